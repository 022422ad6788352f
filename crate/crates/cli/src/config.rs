//! Experiment configuration, read from TOML.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use fairtensor::augment::TargetRule;
use fairtensor::model::CostcoShape;
use fairtensor::staff::StaffSettings;
use fairtensor::synth::SynthSpec;
use fairtensor::train::{Objective, TrainConfig};
use fairtensor::ModelKind;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelName {
    Cp,
    Costco,
}

impl ModelName {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelName::Cp => "cp",
            ModelName::Costco => "costco",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SynthSpec),
    Files {
        /// COO text file.
        tensor: PathBuf,
        /// `entity label` lines for the sensitive mode.
        sensitive: PathBuf,
        sensitive_mode: usize,
        /// Inferred from the largest coordinates when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dims: Option<Vec<usize>>,
    },
}

/// Optimizer settings shared by every run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub rank: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Factor entries start uniform in `(-init_scale, init_scale)`.
    pub init_scale: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            rank: t.rank,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            max_epochs: t.max_epochs,
            patience: t.patience,
            init_scale: 0.5,
        }
    }
}

impl TrainSection {
    pub fn to_config(&self, objective: Objective, fairness_coeff: f64, seed: u64) -> TrainConfig {
        TrainConfig {
            rank: self.rank,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            fairness_coeff,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed,
            objective,
        }
    }
}

/// Entry sampling settings; `k` and `gamma` come from the sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    pub p: usize,
    pub q: usize,
    pub targets: TargetRule,
}

impl Default for AugmentSection {
    fn default() -> Self {
        let s = StaffSettings::default();
        Self { p: s.p, q: s.q, targets: s.targets }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sweep {
    /// Fraction of minority entries kept before splitting.
    pub keep_rate: Vec<f64>,
    pub lambda_f: Vec<f64>,
    pub gamma: Vec<f64>,
    pub k: Vec<usize>,
}

impl Default for Sweep {
    fn default() -> Self {
        Self {
            keep_rate: vec![1.0, 0.1, 0.05],
            lambda_f: (-6..=2).map(|e| 10f64.powi(e)).collect(),
            gamma: vec![0.1, 0.5, 0.9, 1.0],
            k: vec![3, 5, 7, 9, 11, 13, 15],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Results directory. Relative paths here and in `[data]` resolve
    /// against the config file's directory.
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub models: Vec<ModelName>,
    pub objectives: Vec<Objective>,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    pub data: DataSource,
    pub train: TrainSection,
    pub costco: CostcoShape,
    pub augment: AugmentSection,
    pub sweep: Sweep,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("results"),
            seeds: vec![0, 1, 2],
            models: vec![ModelName::Cp, ModelName::Costco],
            objectives: vec![Objective::Plain, Objective::MadrPenalty, Objective::MadePenalty, Objective::Staff],
            split: [0.8, 0.1, 0.1],
            data: DataSource::Synthetic(SynthSpec::default()),
            train: TrainSection::default(),
            costco: CostcoShape::default(),
            augment: AugmentSection::default(),
            sweep: Sweep::default(),
        }
    }
}

fn check_list<T>(name: &str, list: &[T]) -> anyhow::Result<()> {
    if list.is_empty() {
        bail!("`{name}` must not be empty");
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn model_kind(&self, model: ModelName) -> ModelKind {
        match model {
            ModelName::Cp => ModelKind::Cp,
            ModelName::Costco => ModelKind::Costco(self.costco),
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        check_list("seeds", &self.seeds)?;
        check_list("models", &self.models)?;
        check_list("objectives", &self.objectives)?;
        check_list("sweep.keep_rate", &self.sweep.keep_rate)?;
        let o = &self.objectives;
        if o.iter().any(|&x| x != Objective::Plain) {
            check_list("sweep.lambda_f", &self.sweep.lambda_f)?;
        }
        if o.contains(&Objective::Staff) {
            check_list("sweep.gamma", &self.sweep.gamma)?;
            check_list("sweep.k", &self.sweep.k)?;
        }
        for &r in &self.sweep.keep_rate {
            if !(r > 0.0 && r <= 1.0) {
                bail!("keep_rate must lie in (0, 1], got {r}");
            }
        }
        for &l in &self.sweep.lambda_f {
            if !(l >= 0.0 && l.is_finite()) {
                bail!("lambda_f must be non-negative, got {l}");
            }
        }
        for &g in &self.sweep.gamma {
            if !(0.0..=1.0).contains(&g) {
                bail!("gamma must lie in [0, 1], got {g}");
            }
        }
        if self.sweep.k.contains(&0) {
            bail!("k must be positive");
        }
        let [a, b, c] = self.split;
        if [a, b, c].iter().any(|x| x.is_nan() || *x < 0.0) || (a + b + c - 1.0).abs() > 1e-9 || a == 0.0 || b == 0.0 {
            bail!("split fractions must be non-negative, sum to 1, and give non-empty train and validation sets");
        }
        if !(self.train.init_scale > 0.0 && self.train.init_scale.is_finite()) {
            bail!("init_scale must be positive");
        }
        if self.costco.channels == 0 || self.costco.hidden == 0 {
            bail!("costco channels and hidden width must be positive");
        }
        self.train.to_config(Objective::Plain, 0.0, 0).validate()?;
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate()?;
        }
        Ok(())
    }

    /// Rewrites relative paths against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        if let DataSource::Files { tensor, sensitive, .. } = &mut self.data {
            fix(tensor);
            fix(sensitive);
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

pub fn parse_config(text: &str) -> anyhow::Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads and validates a config file, resolving relative paths against its
/// directory.
pub fn load_config(path: &Path) -> anyhow::Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg = parse_config(&text).with_context(|| format!("invalid config {}", path.display()))?;
    cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    Ok(cfg)
}
