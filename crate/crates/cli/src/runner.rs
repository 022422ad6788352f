//! Grid execution and result files.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use anyhow::{anyhow, bail, Context};
use fairtensor::metrics::{evaluate, EvalResult};
use fairtensor::staff::{pretrain, run_staff, StaffSettings};
use fairtensor::synth::generate;
use fairtensor::tensor::{downsample_minority, load_sensitive, load_tensor, split, DataSplit};
use fairtensor::train::{train, Objective, TrainReport};
use fairtensor::{init_model, SensitiveContext, SparseTensor};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{DataSource, ExperimentConfig, ModelName};

pub struct Dataset {
    pub tensor: SparseTensor,
    pub context: SensitiveContext,
}

pub fn load_dataset(source: &DataSource) -> anyhow::Result<Dataset> {
    match source {
        DataSource::Synthetic(spec) => {
            let d = generate(spec)?;
            Ok(Dataset { tensor: d.tensor, context: d.context })
        }
        DataSource::Files { tensor, sensitive, sensitive_mode, dims } => {
            let t = load_tensor(tensor, dims.as_deref()).with_context(|| format!("loading {}", tensor.display()))?;
            if *sensitive_mode >= t.order() {
                bail!("sensitive mode {sensitive_mode} out of range for an order-{} tensor", t.order());
            }
            let ctx = load_sensitive(sensitive, t.dims()[*sensitive_mode], *sensitive_mode)
                .with_context(|| format!("loading {}", sensitive.display()))?;
            Ok(Dataset { tensor: t, context: ctx })
        }
    }
}

/// One run of the grid. Hyper-parameters an objective does not use are
/// `None`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub model: ModelName,
    pub objective: Objective,
    pub keep_rate: f64,
    pub lambda_f: Option<f64>,
    pub gamma: Option<f64>,
    pub k: Option<usize>,
    pub seed: u64,
}

impl GridPoint {
    fn setting_key(&self) -> String {
        let opt = |v: Option<String>| v.unwrap_or_default();
        format!(
            "{}|{}|{}|{}|{}|{}",
            self.model.as_str(),
            self.objective.name(),
            self.keep_rate,
            opt(self.lambda_f.map(|v| v.to_string())),
            opt(self.gamma.map(|v| v.to_string())),
            opt(self.k.map(|v| v.to_string()))
        )
    }
}

/// Expands the sweep in a fixed order: model, keep rate, objective, then the
/// objective's own hyper-parameters, with seeds innermost.
pub fn grid(cfg: &ExperimentConfig) -> Vec<GridPoint> {
    let sw = &cfg.sweep;
    let mut out = Vec::new();
    for &model in &cfg.models {
        for &keep_rate in &sw.keep_rate {
            for &objective in &cfg.objectives {
                let lambdas: Vec<Option<f64>> = match objective {
                    Objective::Plain => vec![None],
                    _ => sw.lambda_f.iter().map(|&l| Some(l)).collect(),
                };
                let (gammas, ks): (Vec<Option<f64>>, Vec<Option<usize>>) = match objective {
                    Objective::Staff => (sw.gamma.iter().map(|&g| Some(g)).collect(), sw.k.iter().map(|&k| Some(k)).collect()),
                    _ => (vec![None], vec![None]),
                };
                for &lambda_f in &lambdas {
                    for &gamma in &gammas {
                        for &k in &ks {
                            for &seed in &cfg.seeds {
                                out.push(GridPoint { model, objective, keep_rate, lambda_f, gamma, k, seed });
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct ResultRow {
    pub point: GridPoint,
    pub eval: EvalResult,
}

pub fn csv_header(labels: &[String]) -> Vec<String> {
    let mut h: Vec<String> = ["model", "objective", "keep_rate", "lambda_f", "gamma", "k", "seed", "mse", "made", "madr"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend(labels.iter().map(|l| format!("mae_{l}")));
    h
}

fn csv_record(row: &ResultRow, num_groups: usize) -> Vec<String> {
    let p = &row.point;
    let opt = |v: Option<String>| v.unwrap_or_default();
    let mut r = vec![
        p.model.as_str().to_string(),
        p.objective.name().to_string(),
        p.keep_rate.to_string(),
        opt(p.lambda_f.map(|v| v.to_string())),
        opt(p.gamma.map(|v| v.to_string())),
        opt(p.k.map(|v| v.to_string())),
        p.seed.to_string(),
        row.eval.mse.to_string(),
        row.eval.made.to_string(),
        row.eval.madr.to_string(),
    ];
    r.extend((0..num_groups).map(|g| row.eval.per_group[&g].mae.to_string()));
    r
}

type Shared<T> = Result<T, String>;

fn flatten<T>(r: anyhow::Result<T>) -> Shared<T> {
    r.map_err(|e| format!("{e:#}"))
}

/// Writes rows in grid order as they complete, so an interrupted run keeps
/// every finished prefix.
struct OrderedWriter {
    csv: csv::Writer<BufWriter<File>>,
    num_groups: usize,
    next: usize,
    pending: BTreeMap<usize, Option<ResultRow>>,
    rows: Vec<ResultRow>,
}

impl OrderedWriter {
    fn push(&mut self, i: usize, row: Option<ResultRow>) -> anyhow::Result<()> {
        self.pending.insert(i, row);
        while let Some(row) = self.pending.remove(&self.next) {
            if let Some(row) = row {
                self.csv.write_record(csv_record(&row, self.num_groups))?;
                self.rows.push(row);
            }
            self.next += 1;
        }
        self.csv.flush()?;
        Ok(())
    }
}

#[derive(Debug)]
pub struct RunOutcome {
    pub output_dir: PathBuf,
    pub rows: Vec<ResultRow>,
    pub failures: Vec<(GridPoint, String)>,
}

fn run_point(
    cfg: &ExperimentConfig,
    p: &GridPoint,
    data: &Dataset,
    parts: &Shared<DataSplit>,
    plain: Option<&Shared<TrainReport>>,
) -> anyhow::Result<EvalResult> {
    let parts = parts.as_ref().map_err(|e| anyhow!("preparing data: {e}"))?;
    let kind = cfg.model_kind(p.model);
    let ctx = &data.context;
    let model = match p.objective {
        Objective::Plain => {
            plain.expect("plain runs are pretrained").as_ref().map_err(|e| anyhow!("{e}"))?.model.clone()
        }
        Objective::MadrPenalty | Objective::MadePenalty => {
            let tc = cfg.train.to_config(p.objective, p.lambda_f.unwrap_or(0.0), p.seed);
            let init = init_model(kind, parts.train.dims(), tc.rank, cfg.train.init_scale, p.seed)?;
            train(init, &parts.train, &parts.validation, ctx, &tc, None)?.model
        }
        Objective::Staff => {
            let pre = plain.expect("staff runs are pretrained").as_ref().map_err(|e| anyhow!("pretraining: {e}"))?;
            let tc = cfg.train.to_config(Objective::Staff, p.lambda_f.unwrap_or(0.0), p.seed);
            let settings = StaffSettings {
                k: p.k.unwrap_or(1),
                gamma: p.gamma.unwrap_or(1.0),
                p: cfg.augment.p,
                q: cfg.augment.q,
                targets: cfg.augment.targets,
            };
            run_staff(kind, &parts.train, &parts.validation, ctx, &tc, &settings, &pre.model, cfg.train.init_scale)?
                .report
                .model
        }
    };
    Ok(evaluate(&model, &parts.test, ctx)?)
}

/// Runs every grid point on a pool of `workers` threads (0 picks the
/// default) and writes `results.csv`, `summary.json` and the effective
/// config into the output directory. Returns an error after writing if any
/// point failed.
pub fn run_experiment(cfg: &ExperimentConfig, workers: usize) -> anyhow::Result<RunOutcome> {
    cfg.validate()?;
    let data = load_dataset(&cfg.data)?;
    let points = grid(cfg);
    let out_dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    std::fs::write(out_dir.join("config.toml"), cfg.to_toml())?;
    log::info!("{} grid points, {} entries, dims {:?}", points.len(), data.tensor.nnz(), data.tensor.dims());

    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build()?;

    // Downsampling happens before the split so every stage sees the same
    // reduced minority.
    let mut data_keys: Vec<(u64, u64)> = points.iter().map(|p| (p.keep_rate.to_bits(), p.seed)).collect();
    data_keys.sort_unstable();
    data_keys.dedup();
    let prepared: HashMap<(u64, u64), Shared<DataSplit>> = pool.install(|| {
        data_keys
            .par_iter()
            .map(|&(rate, seed)| {
                let r = downsample_minority(&data.tensor, &data.context, f64::from_bits(rate), seed)
                    .and_then(|t| split(&t, (cfg.split[0], cfg.split[1], cfg.split[2]), seed));
                ((rate, seed), flatten(r.map_err(Into::into)))
            })
            .collect()
    });

    let mut pre_keys: Vec<(ModelName, u64, u64)> = points
        .iter()
        .filter(|p| matches!(p.objective, Objective::Plain | Objective::Staff))
        .map(|p| (p.model, p.keep_rate.to_bits(), p.seed))
        .collect();
    pre_keys.sort_unstable();
    pre_keys.dedup();
    let pretrained: HashMap<(ModelName, u64, u64), Shared<TrainReport>> = pool.install(|| {
        pre_keys
            .par_iter()
            .map(|&(model, rate, seed)| {
                let r = match &prepared[&(rate, seed)] {
                    Ok(parts) => {
                        let tc = cfg.train.to_config(Objective::Plain, 0.0, seed);
                        flatten(
                            pretrain(cfg.model_kind(model), &parts.train, &parts.validation, &data.context, &tc, cfg.train.init_scale)
                                .map_err(Into::into),
                        )
                    }
                    Err(e) => Err(e.clone()),
                };
                log::info!("pretrained {} keep_rate={} seed={seed}", model.as_str(), f64::from_bits(rate));
                ((model, rate, seed), r)
            })
            .collect()
    });

    let num_groups = data.context.num_groups();
    let mut csv = csv::Writer::from_writer(BufWriter::new(File::create(out_dir.join("results.csv"))?));
    csv.write_record(csv_header(data.context.labels()))?;
    csv.flush()?;
    let mut writer = OrderedWriter { csv, num_groups, next: 0, pending: BTreeMap::new(), rows: Vec::new() };
    let mut failures = Vec::new();

    let (tx, rx) = mpsc::channel();
    std::thread::scope(|s| -> anyhow::Result<()> {
        let (points, prepared, pretrained, data, pool) = (&points, &prepared, &pretrained, &data, &pool);
        s.spawn(move || {
            pool.install(|| {
                points.par_iter().enumerate().for_each_with(tx, |tx, (i, p)| {
                    let key = (p.keep_rate.to_bits(), p.seed);
                    let plain = pretrained.get(&(p.model, key.0, key.1));
                    let r = run_point(cfg, p, data, &prepared[&key], plain);
                    let _ = tx.send((i, r));
                })
            })
        });
        for (i, r) in rx {
            let p = points[i];
            match r {
                Ok(eval) => {
                    log::info!("done {}: mse={} made={}", p.setting_key(), eval.mse, eval.made);
                    writer.push(i, Some(ResultRow { point: p, eval }))?;
                }
                Err(e) => {
                    log::error!("{} seed {} failed: {e:#}", p.setting_key(), p.seed);
                    failures.push((p, format!("{e:#}")));
                    writer.push(i, None)?;
                }
            }
        }
        Ok(())
    })?;

    let rows = writer.rows;
    write_summary(&out_dir.join("summary.json"), &rows)?;
    if !failures.is_empty() {
        bail!("{} of {} runs failed; completed rows are in {}", failures.len(), points.len(), out_dir.display());
    }
    Ok(RunOutcome { output_dir: out_dir, rows, failures })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; zero for a single seed.
    pub std: f64,
}

pub fn mean_std(xs: &[f64]) -> MeanStd {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    MeanStd { mean, std }
}

#[derive(Debug, Serialize)]
struct SummaryEntry {
    model: &'static str,
    objective: &'static str,
    keep_rate: f64,
    lambda_f: Option<f64>,
    gamma: Option<f64>,
    k: Option<usize>,
    seeds: Vec<u64>,
    mse: MeanStd,
    made: MeanStd,
    madr: MeanStd,
}

fn write_summary(path: &Path, rows: &[ResultRow]) -> anyhow::Result<()> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<&ResultRow>> = HashMap::new();
    for r in rows {
        let key = r.point.setting_key();
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    let entries: Vec<SummaryEntry> = order
        .iter()
        .map(|key| {
            let rs = &groups[key];
            let p = rs[0].point;
            let col = |f: fn(&EvalResult) -> f64| mean_std(&rs.iter().map(|r| f(&r.eval)).collect::<Vec<_>>());
            SummaryEntry {
                model: p.model.as_str(),
                objective: p.objective.name(),
                keep_rate: p.keep_rate,
                lambda_f: p.lambda_f,
                gamma: p.gamma,
                k: p.k,
                seeds: rs.iter().map(|r| r.point.seed).collect(),
                mse: col(|e| e.mse),
                made: col(|e| e.made),
                madr: col(|e| e.madr),
            }
        })
        .collect();
    std::fs::write(path, serde_json::to_string_pretty(&entries)? + "\n")?;
    Ok(())
}
