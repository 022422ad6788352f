//! Held-out evaluation: MSE, per-group error, MADE and MADR.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FactorModel;
use crate::tensor::{SensitiveContext, SparseTensor};

pub use crate::tensor::group_counts;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub count: usize,
    pub mse: f64,
    pub mae: f64,
    /// Mean absolute reconstructed value, the per-group MADR term.
    pub mean_abs_recon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mse: f64,
    pub made: f64,
    pub madr: f64,
    pub per_group: BTreeMap<usize, GroupStats>,
}

impl EvalResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("EvalResult serializes")
    }
}

/// Largest absolute difference between any two values. With two groups this
/// is exactly `|a - b|`.
pub fn max_pairwise_gap(values: impl IntoIterator<Item = f64>) -> f64 {
    let (lo, hi) = values
        .into_iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if lo.is_finite() && hi.is_finite() {
        hi - lo
    } else {
        0.0
    }
}

/// Metrics from `(group, target, prediction)` triples. Every group in
/// `0..num_groups` must be present.
pub fn evaluate_predictions(
    num_groups: usize,
    rows: impl IntoIterator<Item = (usize, f64, f64)>,
) -> Result<EvalResult> {
    let mut count = vec![0usize; num_groups];
    let mut sq = vec![0.0; num_groups];
    let mut abs_err = vec![0.0; num_groups];
    let mut abs_rec = vec![0.0; num_groups];
    for (g, x, pred) in rows {
        let e = x - pred;
        count[g] += 1;
        sq[g] += e * e;
        abs_err[g] += e.abs();
        abs_rec[g] += pred.abs();
    }
    if let Some(g) = (0..num_groups).find(|&g| count[g] == 0) {
        return Err(Error::EmptyGroup(g));
    }
    let total: usize = count.iter().sum();
    let mse = sq.iter().sum::<f64>() / total as f64;
    let per_group: BTreeMap<usize, GroupStats> = (0..num_groups)
        .map(|g| {
            let n = count[g] as f64;
            (
                g,
                GroupStats { count: count[g], mse: sq[g] / n, mae: abs_err[g] / n, mean_abs_recon: abs_rec[g] / n },
            )
        })
        .collect();
    let made = max_pairwise_gap(per_group.values().map(|s| s.mae));
    let madr = max_pairwise_gap(per_group.values().map(|s| s.mean_abs_recon));
    Ok(EvalResult { mse, made, madr, per_group })
}

/// Evaluates `model` on every entry of `test`.
pub fn evaluate(model: &FactorModel, test: &SparseTensor, ctx: &SensitiveContext) -> Result<EvalResult> {
    let mut rows = Vec::with_capacity(test.nnz());
    for (idx, x) in test.entries() {
        rows.push((ctx.group_of_index(idx), x, model.predict(idx)?));
    }
    evaluate_predictions(ctx.num_groups(), rows)
}

/// Plain MSE; no group requirement.
pub fn mse(model: &FactorModel, test: &SparseTensor) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Argument("MSE of an empty tensor".into()));
    }
    let mut sum = 0.0;
    for (idx, x) in test.entries() {
        let e = x - model.predict(idx)?;
        sum += e * e;
    }
    Ok(sum / test.nnz() as f64)
}
