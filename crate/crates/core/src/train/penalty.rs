//! Loss terms and penalties with their gradients.
//!
//! Every `*_into` function adds `coeff * d(term)/dp` into a dense gradient
//! buffer laid out like [`FactorModel::params`] and returns the unscaled
//! value of the term. The plain variants return the value together with a
//! freshly allocated gradient.

use crate::error::{Error, Result};
use crate::model::FactorModel;
use crate::tensor::{SensitiveContext, SparseTensor};

/// A subset of a tensor's entries, by position.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub tensor: &'a SparseTensor,
    pub positions: &'a [usize],
}

impl<'a> Batch<'a> {
    pub fn new(tensor: &'a SparseTensor, positions: &'a [usize]) -> Self {
        Self { tensor, positions }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'a [usize], f64)> + '_ {
        self.positions.iter().map(|&k| (self.tensor.index(k), self.tensor.value(k)))
    }
}

/// Sign with `sign(0) = 0`.
#[inline]
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Sum of squared residuals over the batch.
pub fn data_loss_into(model: &FactorModel, batch: Batch<'_>, grad: &mut [f64]) -> f64 {
    let mut loss = 0.0;
    for (idx, x) in batch.iter() {
        model.accumulate_gradient(idx, grad, |pred| {
            let r = pred - x;
            loss += r * r;
            2.0 * r
        });
    }
    loss
}

/// `weight_decay * sum_n ||U^(n)||_F^2 * fraction`, the share of the
/// factor-norm penalty charged to one batch.
pub fn weight_decay_into(model: &FactorModel, weight_decay: f64, fraction: f64, grad: &mut [f64]) -> f64 {
    if weight_decay == 0.0 {
        return 0.0;
    }
    let range = model.factors_range();
    let scale = weight_decay * fraction;
    let mut norm = 0.0;
    for (g, &p) in grad[range.clone()].iter_mut().zip(&model.params()[range]) {
        norm += p * p;
        *g += 2.0 * scale * p;
    }
    scale * norm
}

/// Data term plus the batch's share of the L2 factor penalty.
/// `total_entries` is the size of the full training set.
pub fn loss_plain(model: &FactorModel, batch: Batch<'_>, weight_decay: f64, total_entries: usize) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Argument("loss of an empty batch".into()));
    }
    let mut data = 0.0;
    for (idx, x) in batch.iter() {
        let r = model.predict(idx)? - x;
        data += r * r;
    }
    let norm: f64 = model.params()[model.factors_range()].iter().map(|p| p * p).sum();
    Ok(data + weight_decay * norm * batch.len() as f64 / total_entries as f64)
}

#[derive(Clone, Copy)]
enum GroupStat {
    /// `|x~|`
    AbsReconstruction,
    /// `|x~ - x|`
    AbsError,
}

impl GroupStat {
    fn value_and_slope(self, pred: f64, target: f64) -> (f64, f64) {
        let z = match self {
            GroupStat::AbsReconstruction => pred,
            GroupStat::AbsError => pred - target,
        };
        (z.abs(), sign(z))
    }
}

/// Gap between the largest and smallest per-group batch mean of `stat`.
/// For two groups this is `|mean_g1 - mean_g2|`. Zero when fewer than two
/// groups appear in the batch.
fn group_gap_into(
    model: &FactorModel,
    batch: Batch<'_>,
    ctx: &SensitiveContext,
    stat: GroupStat,
    coeff: f64,
    grad: &mut [f64],
) -> f64 {
    let m = ctx.num_groups();
    let mut count = vec![0usize; m];
    let mut sum = vec![0.0; m];
    for (idx, x) in batch.iter() {
        let g = ctx.group_of_index(idx);
        count[g] += 1;
        sum[g] += stat.value_and_slope(model.predict_unchecked(idx), x).0;
    }
    let present: Vec<usize> = (0..m).filter(|&g| count[g] > 0).collect();
    if present.len() < 2 {
        return 0.0;
    }
    let mean = |g: usize| sum[g] / count[g] as f64;
    let mut hi = present[0];
    let mut lo = present[0];
    for &g in &present[1..] {
        if mean(g) > mean(hi) {
            hi = g;
        }
        if mean(g) < mean(lo) {
            lo = g;
        }
    }
    let gap = mean(hi) - mean(lo);
    if gap == 0.0 || coeff == 0.0 {
        return gap;
    }
    for (idx, x) in batch.iter() {
        let g = ctx.group_of_index(idx);
        let side = if g == hi {
            1.0
        } else if g == lo {
            -1.0
        } else {
            continue;
        };
        let w = coeff * side / count[g] as f64;
        model.accumulate_gradient(idx, grad, |pred| w * stat.value_and_slope(pred, x).1);
    }
    gap
}

pub fn penalty_madr_into(
    model: &FactorModel,
    batch: Batch<'_>,
    ctx: &SensitiveContext,
    coeff: f64,
    grad: &mut [f64],
) -> f64 {
    group_gap_into(model, batch, ctx, GroupStat::AbsReconstruction, coeff, grad)
}

pub fn penalty_made_into(
    model: &FactorModel,
    batch: Batch<'_>,
    ctx: &SensitiveContext,
    coeff: f64,
    grad: &mut [f64],
) -> f64 {
    group_gap_into(model, batch, ctx, GroupStat::AbsError, coeff, grad)
}

/// Difference of the groups' mean absolute reconstructions on the batch.
pub fn penalty_madr(model: &FactorModel, batch: Batch<'_>, ctx: &SensitiveContext) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; model.num_params()];
    let v = penalty_madr_into(model, batch, ctx, 1.0, &mut grad);
    (v, grad)
}

/// Difference of the groups' mean absolute errors on the batch, the
/// training-time stand-in for held-out MADE.
pub fn penalty_made(model: &FactorModel, batch: Batch<'_>, ctx: &SensitiveContext) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; model.num_params()];
    let v = penalty_made_into(model, batch, ctx, 1.0, &mut grad);
    (v, grad)
}

/// `coeff * sum ||u_original - u_augmented||^2` over the pairs, on rows of
/// the sensitive factor matrix. Returns the scaled value.
pub fn penalty_coupling_into(
    model: &FactorModel,
    sensitive_mode: usize,
    pairs: &[(usize, usize)],
    coeff: f64,
    grad: &mut [f64],
) -> Result<f64> {
    let dim = *model
        .dims()
        .get(sensitive_mode)
        .ok_or_else(|| Error::Argument(format!("sensitive mode {sensitive_mode} out of range")))?;
    let mut total = 0.0;
    for &(o, a) in pairs {
        for e in [o, a] {
            if e >= dim {
                return Err(Error::Bounds { mode: sensitive_mode, coord: e, dim });
            }
        }
        let ro = model.row_range(sensitive_mode, o);
        let ra = model.row_range(sensitive_mode, a);
        let params = model.params();
        for r in 0..model.rank() {
            let d = params[ro.start + r] - params[ra.start + r];
            total += d * d;
            grad[ro.start + r] += 2.0 * coeff * d;
            grad[ra.start + r] -= 2.0 * coeff * d;
        }
    }
    Ok(coeff * total)
}

pub fn penalty_coupling(
    model: &FactorModel,
    sensitive_mode: usize,
    pairs: &[(usize, usize)],
    coeff: f64,
) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; model.num_params()];
    let v = penalty_coupling_into(model, sensitive_mode, pairs, coeff, &mut grad)?;
    Ok((v, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FactorModel, ModelKind};
    use crate::tensor::parse_sensitive;

    /// One-mode CP model with rank 1: prediction at `[i]` is the row value.
    fn vector_model(values: &[f64]) -> FactorModel {
        let mut m = FactorModel::zeroed(ModelKind::Cp, &[values.len()], 1).unwrap();
        m.params_mut().copy_from_slice(values);
        m
    }

    fn two_groups(groups: &[usize]) -> SensitiveContext {
        let text: String = groups.iter().enumerate().map(|(i, g)| format!("{i} g{g}\n")).collect();
        let ctx = parse_sensitive(&text, groups.len(), 0).unwrap();
        assert_eq!(ctx.groups(), groups);
        ctx
    }

    fn all_positions(t: &SparseTensor) -> Vec<usize> {
        (0..t.nnz()).collect()
    }

    #[test]
    fn madr_hand_case() {
        // group 0 reconstructions {2, -2}, group 1 {1}
        let m = vector_model(&[2.0, -2.0, 1.0]);
        let t = SparseTensor::new(vec![3], vec![(vec![0], 0.0), (vec![1], 0.0), (vec![2], 0.0)]).unwrap();
        let ctx = two_groups(&[0, 0, 1]);
        let pos = all_positions(&t);
        let (v, _) = penalty_madr(&m, Batch::new(&t, &pos), &ctx);
        assert_eq!(v, 1.0);
    }

    #[test]
    fn madr_equal_reconstructions() {
        let m = vector_model(&[0.7, 0.7, 0.7, 0.7]);
        let t = SparseTensor::new(vec![4], (0..4).map(|i| (vec![i], i as f64)).collect()).unwrap();
        let ctx = two_groups(&[0, 1, 0, 1]);
        let pos = all_positions(&t);
        let (v, g) = penalty_madr(&m, Batch::new(&t, &pos), &ctx);
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn made_hand_cases() {
        let ctx = two_groups(&[0, 0, 1]);
        let t = SparseTensor::new(vec![3], vec![(vec![0], 0.0), (vec![1], 0.0), (vec![2], 0.0)]).unwrap();
        let pos = all_positions(&t);
        // abs errors {1,3} vs {2}
        let m = vector_model(&[1.0, -3.0, 2.0]);
        assert_eq!(penalty_made(&m, Batch::new(&t, &pos), &ctx).0, 0.0);
        // perfect
        let m = vector_model(&[0.0, 0.0, 0.0]);
        assert_eq!(penalty_made(&m, Batch::new(&t, &pos), &ctx).0, 0.0);
        // {1} vs {4}
        let ctx = two_groups(&[0, 1]);
        let t = SparseTensor::new(vec![2], vec![(vec![0], 0.0), (vec![1], 0.0)]).unwrap();
        let pos = all_positions(&t);
        let m = vector_model(&[1.0, -4.0]);
        assert_eq!(penalty_made(&m, Batch::new(&t, &pos), &ctx).0, 3.0);
    }

    #[test]
    fn one_group_batch_has_no_penalty() {
        let ctx = two_groups(&[0, 0, 1]);
        let t = SparseTensor::new(vec![3], vec![(vec![0], 0.0), (vec![1], 5.0)]).unwrap();
        let m = vector_model(&[1.0, 2.0, 3.0]);
        let pos = all_positions(&t);
        assert_eq!(penalty_made(&m, Batch::new(&t, &pos), &ctx).0, 0.0);
        assert_eq!(penalty_madr(&m, Batch::new(&t, &pos), &ctx).0, 0.0);
    }

    #[test]
    fn coupling_hand_cases() {
        let mut m = FactorModel::zeroed(ModelKind::Cp, &[2, 1], 2).unwrap();
        m.row_mut(0, 0).copy_from_slice(&[1.0, 0.0]);
        m.row_mut(0, 1).copy_from_slice(&[0.0, 1.0]);
        let (v, g) = penalty_coupling(&m, 0, &[(0, 1)], 1.0).unwrap();
        assert_eq!(v, 2.0);
        assert_eq!(&g[0..4], &[2.0, -2.0, -2.0, 2.0]);
        let (v, _) = penalty_coupling(&m, 0, &[(0, 0)], 1.0).unwrap();
        assert_eq!(v, 0.0);
        assert!(matches!(penalty_coupling(&m, 0, &[(0, 2)], 1.0), Err(Error::Bounds { coord: 2, .. })));
    }

    #[test]
    fn loss_plain_cases() {
        let m = vector_model(&[3.0]);
        let t = SparseTensor::new(vec![1], vec![(vec![0], 1.0)]).unwrap();
        let pos = [0];
        assert_eq!(loss_plain(&m, Batch::new(&t, &pos), 0.0, 1).unwrap(), 4.0);
        // batch share of the factor penalty: 0.5 * 9 * (1 / 4)
        assert_eq!(loss_plain(&m, Batch::new(&t, &pos), 0.5, 4).unwrap(), 4.0 + 0.5 * 9.0 / 4.0);
        assert!(loss_plain(&m, Batch::new(&t, &[]), 0.0, 1).is_err());
    }

    #[test]
    fn sign_convention() {
        assert_eq!(sign(0.0), 0.0);
        assert_eq!(sign(-0.0), 0.0);
        assert_eq!(sign(2.0), 1.0);
        assert_eq!(sign(-1e-300), -1.0);
    }
}
