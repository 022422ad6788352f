//! Experiment harness: config parsing, grid runs and trade-off reports.

pub mod config;
pub mod report;
pub mod runner;

use std::path::Path;

use anyhow::Context;
use fairtensor::model::FactorModel;
use fairtensor::synth::{generate, SynthSpec};
use fairtensor::tensor::sensitive_to_text;

pub use config::{load_config, parse_config, ExperimentConfig};
pub use runner::run_experiment;

/// Writes `tensor.tsv`, `sensitive.tsv` and the generating model
/// `truth.model` into `out`.
pub fn gen_synth(spec: &SynthSpec, out: &Path) -> anyhow::Result<()> {
    let data = generate(spec)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    data.tensor.save(out.join("tensor.tsv"))?;
    std::fs::write(out.join("sensitive.tsv"), sensitive_to_text(&data.context))?;
    FactorModel::save(&data.truth, out.join("truth.model"))?;
    Ok(())
}

pub fn load_synth_spec(path: &Path) -> anyhow::Result<SynthSpec> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let spec: SynthSpec = toml::from_str(&text).with_context(|| format!("invalid spec {}", path.display()))?;
    spec.validate()?;
    Ok(spec)
}
