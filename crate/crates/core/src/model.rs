//! Reconstruction models: CP and a compact CoSTCo network.
//!
//! All parameters of a [`FactorModel`] live in one flat buffer. Factor
//! matrices come first (mode by mode, row-major `I_n x R`), followed by the
//! network weights for CoSTCo. Optimizers and gradient buffers share that
//! layout, so an update is a single pass over two slices.
//!
//! The CoSTCo network maps the stacked rows `Z` (`N x R`) to a scalar:
//!
//! ```text
//! h1[c][r] = act(b1[c] + sum_n w1[c][n] * Z[n][r])          conv over modes
//! h2[c]    = act(b2[c] + sum_{c',r} w2[c][c'][r] * h1[c'][r]) conv over rank
//! h3[k]    = act(b3[k] + sum_c w3[k][c] * h2[c])              hidden layer
//! out      = b4 + sum_k w4[k] * h3[k]
//! ```

use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }
}

/// Layer sizes of the CoSTCo network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostcoShape {
    pub channels: usize,
    pub hidden: usize,
    pub activation: Activation,
}

impl Default for CostcoShape {
    fn default() -> Self {
        Self { channels: 8, hidden: 32, activation: Activation::Relu }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Cp,
    Costco(CostcoShape),
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Cp => "cp",
            ModelKind::Costco(_) => "costco",
        }
    }
}

/// Offsets of each CoSTCo layer inside the theta block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ThetaLayout {
    order: usize,
    rank: usize,
    shape: CostcoShape,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    w4: usize,
    b4: usize,
    len: usize,
}

impl ThetaLayout {
    fn new(order: usize, rank: usize, shape: CostcoShape) -> Result<Self> {
        if shape.channels == 0 || shape.hidden == 0 {
            return Err(Error::Config(format!(
                "CoSTCo needs positive channels and hidden width, got {shape:?}"
            )));
        }
        let (c, h) = (shape.channels, shape.hidden);
        let overflow = || Error::Config("CoSTCo parameter count overflows".into());
        let w1 = 0;
        let b1 = w1 + c.checked_mul(order).ok_or_else(overflow)?;
        let w2 = b1 + c;
        let b2 = w2 + c.checked_mul(c).and_then(|x| x.checked_mul(rank)).ok_or_else(overflow)?;
        let w3 = b2 + c;
        let b3 = w3 + h.checked_mul(c).ok_or_else(overflow)?;
        let w4 = b3 + h;
        let b4 = w4 + h;
        Ok(Self { order, rank, shape, w1, b1, w2, b2, w3, b3, w4, b4, len: b4 + 1 })
    }

    /// `(offset, len, fan_in)` per weight block and its bias.
    fn layers(&self) -> [(Range<usize>, Range<usize>, usize); 4] {
        let (c, h) = (self.shape.channels, self.shape.hidden);
        [
            (self.w1..self.b1, self.b1..self.w2, self.order),
            (self.w2..self.b2, self.b2..self.w3, c * self.rank),
            (self.w3..self.b3, self.b3..self.w4, c),
            (self.w4..self.b4, self.b4..self.len, h),
        ]
    }
}

/// Factor matrices plus model-specific parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel {
    kind: ModelKind,
    rank: usize,
    dims: Vec<usize>,
    factor_offsets: Vec<usize>,
    theta_offset: usize,
    theta: Option<ThetaLayout>,
    params: Vec<f64>,
}

/// Gradient of one entry's loss term with respect to the parameters it
/// touches: the `N` selected factor rows and, for CoSTCo, the network.
#[derive(Debug, Clone, PartialEq)]
pub struct EntryGradient {
    /// `(mode, row, d/d row)`, one per mode.
    pub rows: Vec<(usize, usize, Vec<f64>)>,
    /// Dense gradient of the network weights; empty for CP.
    pub theta: Vec<f64>,
}

impl FactorModel {
    /// A model with every parameter set to zero.
    pub fn zeroed(kind: ModelKind, dims: &[usize], rank: usize) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Argument("rank must be positive".into()));
        }
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::Argument(format!("invalid dims {dims:?}")));
        }
        let mut factor_offsets = Vec::with_capacity(dims.len());
        let mut offset = 0usize;
        for &d in dims {
            factor_offsets.push(offset);
            offset = d
                .checked_mul(rank)
                .and_then(|x| x.checked_add(offset))
                .ok_or_else(|| Error::Argument("parameter count overflows".into()))?;
        }
        let theta = match kind {
            ModelKind::Cp => None,
            ModelKind::Costco(shape) => Some(ThetaLayout::new(dims.len(), rank, shape)?),
        };
        let total = offset
            .checked_add(theta.map_or(0, |t| t.len))
            .ok_or_else(|| Error::Argument("parameter count overflows".into()))?;
        Ok(Self {
            kind,
            rank,
            dims: dims.to_vec(),
            factor_offsets,
            theta_offset: offset,
            theta,
            params: vec![0.0; total],
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn order(&self) -> usize {
        self.dims.len()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Range of mode `n`'s factor matrix inside [`params`](Self::params).
    pub fn factor_range(&self, mode: usize) -> Range<usize> {
        let start = self.factor_offsets[mode];
        start..start + self.dims[mode] * self.rank
    }

    /// Range of every factor matrix, i.e. everything but the network.
    pub fn factors_range(&self) -> Range<usize> {
        0..self.theta_offset
    }

    pub fn theta_range(&self) -> Range<usize> {
        self.theta_offset..self.params.len()
    }

    pub fn factor(&self, mode: usize) -> &[f64] {
        &self.params[self.factor_range(mode)]
    }

    pub fn theta(&self) -> &[f64] {
        &self.params[self.theta_range()]
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        let r = self.theta_range();
        &mut self.params[r]
    }

    pub fn row_range(&self, mode: usize, row: usize) -> Range<usize> {
        let start = self.factor_offsets[mode] + row * self.rank;
        start..start + self.rank
    }

    pub fn row(&self, mode: usize, row: usize) -> &[f64] {
        &self.params[self.row_range(mode, row)]
    }

    pub fn row_mut(&mut self, mode: usize, row: usize) -> &mut [f64] {
        let r = self.row_range(mode, row);
        &mut self.params[r]
    }

    pub fn check_index(&self, index: &[usize]) -> Result<()> {
        if index.len() != self.order() {
            return Err(Error::DimensionMismatch(format!(
                "index {index:?} has {} coordinates, model has order {}",
                index.len(),
                self.order()
            )));
        }
        for (mode, (&c, &d)) in index.iter().zip(&self.dims).enumerate() {
            if c >= d {
                return Err(Error::Bounds { mode, coord: c, dim: d });
            }
        }
        Ok(())
    }

    fn rows_at(&self, index: &[usize]) -> Vec<&[f64]> {
        index.iter().enumerate().map(|(n, &i)| self.row(n, i)).collect()
    }

    /// Reconstruction at `index` for either kind.
    pub fn predict(&self, index: &[usize]) -> Result<f64> {
        self.check_index(index)?;
        Ok(self.predict_unchecked(index))
    }

    /// `index` must already be validated.
    pub fn predict_unchecked(&self, index: &[usize]) -> f64 {
        match self.kind {
            ModelKind::Cp => {
                let mut sum = 0.0;
                for r in 0..self.rank {
                    let mut prod = 1.0;
                    for (n, &i) in index.iter().enumerate() {
                        prod *= self.params[self.factor_offsets[n] + i * self.rank + r];
                    }
                    sum += prod;
                }
                sum
            }
            ModelKind::Costco(_) => self.costco_forward(&self.rows_at(index)).out,
        }
    }

    /// Sum over ranks of the product of the selected factor entries.
    pub fn predict_cp(&self, index: &[usize]) -> Result<f64> {
        if self.kind != ModelKind::Cp {
            return Err(Error::Config("predict_cp called on a CoSTCo model".into()));
        }
        self.predict(index)
    }

    pub fn predict_costco(&self, index: &[usize]) -> Result<f64> {
        if !matches!(self.kind, ModelKind::Costco(_)) {
            return Err(Error::Config("predict_costco called on a CP model".into()));
        }
        self.predict(index)
    }

    /// Evaluates the model on explicitly supplied rows rather than rows
    /// looked up from the factors.
    pub fn predict_generic(&self, rows: &[&[f64]]) -> Result<f64> {
        self.check_rows(rows)?;
        Ok(match self.kind {
            ModelKind::Cp => cp_value(rows, self.rank),
            ModelKind::Costco(_) => self.costco_forward(rows).out,
        })
    }

    fn check_rows(&self, rows: &[&[f64]]) -> Result<()> {
        if rows.len() != self.order() {
            return Err(Error::Argument(format!("expected {} rows, got {}", self.order(), rows.len())));
        }
        if let Some(r) = rows.iter().find(|r| r.len() != self.rank) {
            return Err(Error::Argument(format!("row of length {} for rank {}", r.len(), self.rank)));
        }
        Ok(())
    }

    /// `2 * residual * d(prediction)/dp` for every parameter touched by `index`.
    pub fn gradients(&self, index: &[usize], residual: f64) -> Result<EntryGradient> {
        self.check_index(index)?;
        let rows = self.rows_at(index);
        let (row_grads, theta) = self.generic_gradient(&rows, 2.0 * residual)?;
        Ok(EntryGradient {
            rows: index
                .iter()
                .enumerate()
                .zip(row_grads)
                .map(|((n, &i), g)| (n, i, g))
                .collect(),
            theta,
        })
    }

    /// `weight * d f(rows) / d(rows, theta)`: one gradient per row plus the
    /// dense network gradient (empty for CP).
    pub fn generic_gradient(&self, rows: &[&[f64]], weight: f64) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        self.check_rows(rows)?;
        let mut row_grads = vec![vec![0.0; self.rank]; rows.len()];
        let mut theta = vec![0.0; self.theta.map_or(0, |t| t.len)];
        match self.kind {
            ModelKind::Cp => cp_backward(rows, self.rank, weight, |n, r, g| row_grads[n][r] += g),
            ModelKind::Costco(_) => {
                let cache = self.costco_forward(rows);
                self.costco_backward(rows, &cache, weight, |n, r, g| row_grads[n][r] += g, &mut theta);
            }
        }
        Ok((row_grads, theta))
    }

    /// Evaluates the entry at a validated `index`, then adds
    /// `weight(prediction) * d(prediction)/dp` into the dense buffer `grad`
    /// (same layout as [`params`](Self::params)). Returns the prediction.
    pub fn accumulate_gradient(
        &self,
        index: &[usize],
        grad: &mut [f64],
        weight: impl FnOnce(f64) -> f64,
    ) -> f64 {
        debug_assert_eq!(grad.len(), self.params.len());
        let rank = self.rank;
        let offsets: Vec<usize> = index
            .iter()
            .enumerate()
            .map(|(n, &i)| self.factor_offsets[n] + i * rank)
            .collect();
        match self.kind {
            ModelKind::Cp => {
                let pred = self.predict_unchecked(index);
                let w = weight(pred);
                if w != 0.0 {
                    let rows = self.rows_at(index);
                    cp_backward(&rows, rank, w, |n, r, g| grad[offsets[n] + r] += g);
                }
                pred
            }
            ModelKind::Costco(_) => {
                let rows = self.rows_at(index);
                let cache = self.costco_forward(&rows);
                let w = weight(cache.out);
                if w != 0.0 {
                    let (head, theta) = grad.split_at_mut(self.theta_offset);
                    self.costco_backward(&rows, &cache, w, |n, r, g| head[offsets[n] + r] += g, theta);
                }
                cache.out
            }
        }
    }

    fn costco_forward(&self, rows: &[&[f64]]) -> CostcoCache {
        let t = self.theta.expect("CoSTCo layout");
        let th = &self.params[self.theta_offset..];
        let (c, h, r_) = (t.shape.channels, t.shape.hidden, self.rank);
        let act = t.shape.activation;
        let n_modes = rows.len();

        let mut pre1 = vec![0.0; c * r_];
        for ch in 0..c {
            let b = th[t.b1 + ch];
            for r in 0..r_ {
                let mut s = b;
                for (n, row) in rows.iter().enumerate() {
                    s += th[t.w1 + ch * n_modes + n] * row[r];
                }
                pre1[ch * r_ + r] = s;
            }
        }
        let h1: Vec<f64> = pre1.iter().map(|&x| act.apply(x)).collect();

        let mut pre2 = vec![0.0; c];
        for (co, p) in pre2.iter_mut().enumerate() {
            let w = &th[t.w2 + co * c * r_..t.w2 + (co + 1) * c * r_];
            *p = th[t.b2 + co] + w.iter().zip(&h1).map(|(a, b)| a * b).sum::<f64>();
        }
        let h2: Vec<f64> = pre2.iter().map(|&x| act.apply(x)).collect();

        let mut pre3 = vec![0.0; h];
        for (k, p) in pre3.iter_mut().enumerate() {
            let w = &th[t.w3 + k * c..t.w3 + (k + 1) * c];
            *p = th[t.b3 + k] + w.iter().zip(&h2).map(|(a, b)| a * b).sum::<f64>();
        }
        let h3: Vec<f64> = pre3.iter().map(|&x| act.apply(x)).collect();

        let out = th[t.b4] + th[t.w4..t.w4 + h].iter().zip(&h3).map(|(a, b)| a * b).sum::<f64>();
        CostcoCache { pre1, h1, pre2, h2, pre3, h3, out }
    }

    fn costco_backward(
        &self,
        rows: &[&[f64]],
        cache: &CostcoCache,
        upstream: f64,
        mut row_grad: impl FnMut(usize, usize, f64),
        theta_grad: &mut [f64],
    ) {
        let t = self.theta.expect("CoSTCo layout");
        let th = &self.params[self.theta_offset..];
        let (c, h, r_) = (t.shape.channels, t.shape.hidden, self.rank);
        let act = t.shape.activation;
        let n_modes = rows.len();

        theta_grad[t.b4] += upstream;
        let mut d_pre3 = vec![0.0; h];
        for k in 0..h {
            theta_grad[t.w4 + k] += upstream * cache.h3[k];
            d_pre3[k] = upstream * th[t.w4 + k] * act.derivative(cache.pre3[k]);
        }

        let mut d_h2 = vec![0.0; c];
        for (k, &dp) in d_pre3.iter().enumerate() {
            if dp == 0.0 {
                continue;
            }
            theta_grad[t.b3 + k] += dp;
            for ch in 0..c {
                theta_grad[t.w3 + k * c + ch] += dp * cache.h2[ch];
                d_h2[ch] += dp * th[t.w3 + k * c + ch];
            }
        }
        let d_pre2: Vec<f64> =
            d_h2.iter().zip(&cache.pre2).map(|(&d, &p)| d * act.derivative(p)).collect();

        let mut d_h1 = vec![0.0; c * r_];
        for (co, &dp) in d_pre2.iter().enumerate() {
            if dp == 0.0 {
                continue;
            }
            theta_grad[t.b2 + co] += dp;
            let base = t.w2 + co * c * r_;
            for j in 0..c * r_ {
                theta_grad[base + j] += dp * cache.h1[j];
                d_h1[j] += dp * th[base + j];
            }
        }

        for ch in 0..c {
            for r in 0..r_ {
                let d = d_h1[ch * r_ + r] * act.derivative(cache.pre1[ch * r_ + r]);
                if d == 0.0 {
                    continue;
                }
                theta_grad[t.b1 + ch] += d;
                for (n, row) in rows.iter().enumerate() {
                    theta_grad[t.w1 + ch * n_modes + n] += d * row[r];
                    row_grad(n, r, d * th[t.w1 + ch * n_modes + n]);
                }
            }
        }
    }

    /// Writes the versioned text checkpoint.
    pub fn to_checkpoint(&self) -> String {
        let mut out = String::from("fairtensor-model 1\n");
        match self.kind {
            ModelKind::Cp => out.push_str("kind cp\n"),
            ModelKind::Costco(s) => {
                let _ = writeln!(out, "kind costco {} {} {}", s.channels, s.hidden, s.activation.name());
            }
        }
        let _ = writeln!(out, "rank {}", self.rank);
        let dims: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(out, "dims {}", dims.join(" "));
        let _ = writeln!(out, "params {}", self.params.len());
        for v in &self.params {
            let _ = writeln!(out, "{v:.16e}");
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_checkpoint())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        parse_checkpoint(&std::fs::read_to_string(path)?)
    }
}

struct CostcoCache {
    pre1: Vec<f64>,
    h1: Vec<f64>,
    pre2: Vec<f64>,
    h2: Vec<f64>,
    pre3: Vec<f64>,
    h3: Vec<f64>,
    out: f64,
}

fn cp_value(rows: &[&[f64]], rank: usize) -> f64 {
    (0..rank).map(|r| rows.iter().map(|row| row[r]).product::<f64>()).sum()
}

fn cp_backward(rows: &[&[f64]], rank: usize, weight: f64, mut emit: impl FnMut(usize, usize, f64)) {
    for r in 0..rank {
        for n in 0..rows.len() {
            let mut prod = weight;
            for (m, row) in rows.iter().enumerate() {
                if m != n {
                    prod *= row[r];
                }
            }
            emit(n, r, prod);
        }
    }
}

/// Parses the text produced by [`FactorModel::to_checkpoint`].
pub fn parse_checkpoint(text: &str) -> Result<FactorModel> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let mut next = |what: &str| {
        lines.next().ok_or_else(|| Error::Parse { line: 0, message: format!("checkpoint ends before {what}") })
    };
    let bad = |line: usize, message: String| Error::Parse { line, message };

    let (ln, header) = next("header")?;
    if header != "fairtensor-model 1" {
        return Err(bad(ln, format!("unsupported checkpoint header {header:?}")));
    }

    let (ln, kind_line) = next("kind")?;
    let fields: Vec<&str> = kind_line.split_whitespace().collect();
    let kind = match fields.as_slice() {
        ["kind", "cp"] => ModelKind::Cp,
        ["kind", "costco", c, h, a] => {
            let channels = c.parse().map_err(|_| bad(ln, format!("invalid channel count {c:?}")))?;
            let hidden = h.parse().map_err(|_| bad(ln, format!("invalid hidden width {h:?}")))?;
            let activation = match *a {
                "relu" => Activation::Relu,
                "identity" => Activation::Identity,
                other => return Err(bad(ln, format!("unknown activation {other:?}"))),
            };
            ModelKind::Costco(CostcoShape { channels, hidden, activation })
        }
        _ => return Err(bad(ln, format!("invalid kind line {kind_line:?}"))),
    };

    let keyed = |(ln, line): (usize, &str), key: &str| -> Result<Vec<usize>> {
        let mut it = line.split_whitespace();
        if it.next() != Some(key) {
            return Err(bad(ln, format!("expected `{key}` line")));
        }
        it.map(|f| f.parse::<usize>().map_err(|_| bad(ln, format!("invalid number {f:?}"))))
            .collect()
    };
    let (rln, rline) = next("rank")?;
    let rank = match keyed((rln, rline), "rank")?.as_slice() {
        [r] => *r,
        _ => return Err(bad(rln, "rank line needs one value".into())),
    };
    let dims = keyed(next("dims")?, "dims")?;
    let (pln, pline) = next("params")?;
    let declared = match keyed((pln, pline), "params")?.as_slice() {
        [p] => *p,
        _ => return Err(bad(pln, "params line needs one value".into())),
    };

    let mut values = Vec::new();
    for (ln, line) in lines {
        if line.is_empty() {
            continue;
        }
        if values.len() == declared {
            return Err(bad(ln, "more parameter values than declared".into()));
        }
        let v: f64 = line.parse().map_err(|_| bad(ln, format!("invalid parameter {line:?}")))?;
        if !v.is_finite() {
            return Err(bad(ln, format!("non-finite parameter {v}")));
        }
        values.push(v);
    }
    if values.len() != declared {
        return Err(bad(pln, format!("declared {declared} parameters, found {}", values.len())));
    }
    // Validate the shape arithmetic before allocating anything sized by it.
    let expected = expected_param_count(kind, &dims, rank)?;
    if expected != declared {
        return Err(Error::Config(format!(
            "shape implies {expected} parameters, checkpoint declares {declared}"
        )));
    }
    let mut model = FactorModel::zeroed(kind, &dims, rank)?;
    model.params.copy_from_slice(&values);
    Ok(model)
}

fn expected_param_count(kind: ModelKind, dims: &[usize], rank: usize) -> Result<usize> {
    if rank == 0 || dims.is_empty() || dims.contains(&0) {
        return Err(Error::Config(format!("invalid rank {rank} or dims {dims:?}")));
    }
    let overflow = || Error::Config("parameter count overflows".into());
    let mut total = 0usize;
    for &d in dims {
        total = d.checked_mul(rank).and_then(|x| x.checked_add(total)).ok_or_else(overflow)?;
    }
    if let ModelKind::Costco(shape) = kind {
        total = total.checked_add(ThetaLayout::new(dims.len(), rank, shape)?.len).ok_or_else(overflow)?;
    }
    Ok(total)
}

/// Seeded initialization. Factor entries are uniform in `(-scale, scale)`;
/// CoSTCo weights and biases are uniform in `±1/sqrt(fan_in)` per layer.
///
/// Every factor matrix and every network layer draws from its own ChaCha
/// stream, consumed row by row. Rows `0..I_n` of a mode therefore come out
/// the same whatever the sizes of the other modes and whether mode `n` is
/// later enlarged.
pub fn init_model(kind: ModelKind, dims: &[usize], rank: usize, scale: f64, seed: u64) -> Result<FactorModel> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Argument(format!("init scale must be positive, got {scale}")));
    }
    let mut model = FactorModel::zeroed(kind, dims, rank)?;
    for mode in 0..dims.len() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(mode as u64);
        let range = model.factor_range(mode);
        for p in &mut model.params[range] {
            *p = uniform_open(&mut rng, scale);
        }
    }
    if let Some(layout) = model.theta {
        let off = model.theta_offset;
        for (layer, (w, b, fan_in)) in layout.layers().into_iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((dims.len() + layer) as u64);
            let bound = 1.0 / (fan_in as f64).sqrt();
            for p in &mut model.params[off + w.start..off + w.end] {
                *p = uniform_open(&mut rng, bound);
            }
            for p in &mut model.params[off + b.start..off + b.end] {
                *p = uniform_open(&mut rng, bound);
            }
        }
    }
    Ok(model)
}

fn uniform_open(rng: &mut impl Rng, bound: f64) -> f64 {
    loop {
        let x: f64 = rng.random_range(-bound..bound);
        if x != -bound {
            return x;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cp_with_rows(rows: &[&[f64]]) -> FactorModel {
        let dims = vec![1; rows.len()];
        let mut m = FactorModel::zeroed(ModelKind::Cp, &dims, rows[0].len()).unwrap();
        for (n, r) in rows.iter().enumerate() {
            m.row_mut(n, 0).copy_from_slice(r);
        }
        m
    }

    #[test]
    fn cp_scalar_product() {
        let m = cp_with_rows(&[&[2.0], &[2.0], &[2.0]]);
        assert_eq!(m.predict_cp(&[0, 0, 0]).unwrap(), 8.0);
    }

    #[test]
    fn cp_orthogonal_ranks() {
        let m = cp_with_rows(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(m.predict_cp(&[0, 0, 0]).unwrap(), 0.0);
    }

    #[test]
    fn cp_bounds() {
        let m = init_model(ModelKind::Cp, &[2, 3], 2, 0.1, 0).unwrap();
        assert!(matches!(m.predict_cp(&[2, 0]), Err(Error::Bounds { mode: 0, .. })));
        assert!(m.predict_cp(&[0]).is_err());
        assert!(m.predict_costco(&[0, 0]).is_err());
    }

    #[test]
    fn cp_gradient_product_rule() {
        let m = cp_with_rows(&[&[3.0], &[5.0]]);
        let g = m.gradients(&[0, 0], 1.0).unwrap();
        assert_eq!(g.rows, vec![(0, 0, vec![10.0]), (1, 0, vec![6.0])]);
        assert!(g.theta.is_empty());
        let z = m.gradients(&[0, 0], 0.0).unwrap();
        assert!(z.rows.iter().all(|(_, _, v)| v.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn generic_rows_and_zero_row() {
        let m = init_model(ModelKind::Cp, &[4, 5, 6], 3, 0.5, 9).unwrap();
        let idx = [1, 2, 3];
        let rows: Vec<&[f64]> = (0..3).map(|n| m.row(n, idx[n])).collect();
        assert_eq!(m.predict_generic(&rows).unwrap(), m.predict_cp(&idx).unwrap());
        let zero = [0.0; 3];
        assert_eq!(m.predict_generic(&[rows[0], &zero, rows[2]]).unwrap(), 0.0);
        assert!(m.predict_generic(&[rows[0], &[0.0; 2], rows[2]]).is_err());
    }

    #[test]
    fn costco_zero_network() {
        let shape = CostcoShape { channels: 3, hidden: 4, activation: Activation::Relu };
        let mut m = init_model(ModelKind::Costco(shape), &[3, 3, 3], 2, 0.5, 1).unwrap();
        m.theta_mut().fill(0.0);
        assert_eq!(m.predict_costco(&[0, 1, 2]).unwrap(), 0.0);
    }

    #[test]
    fn costco_identity_configuration() {
        // one channel, all-ones kernels, linear activation, unit MLP:
        // the network sums every entry of the stacked rows
        let shape = CostcoShape { channels: 1, hidden: 1, activation: Activation::Identity };
        let mut m = init_model(ModelKind::Costco(shape), &[3, 4, 2], 3, 1.0, 5).unwrap();
        let t = m.theta.unwrap();
        let th = m.theta_mut();
        th.fill(0.0);
        th[t.w1..t.b1].fill(1.0);
        th[t.w2..t.b2].fill(1.0);
        th[t.w3] = 1.0;
        th[t.w4] = 1.0;
        let idx = [2, 1, 0];
        let expected: f64 = (0..3).map(|n| m.row(n, idx[n]).iter().sum::<f64>()).sum();
        let got = m.predict_costco(&idx).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn init_contracts() {
        let kind = ModelKind::Costco(CostcoShape::default());
        let a = init_model(kind, &[5, 6, 7], 4, 0.1, 3).unwrap();
        let b = init_model(kind, &[5, 6, 7], 4, 0.1, 3).unwrap();
        let c = init_model(kind, &[5, 6, 7], 4, 0.1, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params(), c.params());
        assert!(a.params()[a.factors_range()].iter().all(|x| x.abs() < 0.1));
        assert!(init_model(ModelKind::Cp, &[2], 1, 0.0, 0).is_err());
        let idx = [1, 2, 3];
        assert_eq!(a.predict(&idx).unwrap().to_bits(), b.predict(&idx).unwrap().to_bits());
    }

    #[test]
    fn init_rows_stable_under_enlargement() {
        let a = init_model(ModelKind::Cp, &[5, 6, 7], 3, 0.1, 11).unwrap();
        let b = init_model(ModelKind::Cp, &[10, 6, 7], 3, 0.1, 11).unwrap();
        assert_eq!(a.factor(0), &b.factor(0)[..15]);
        assert_eq!(a.factor(1), b.factor(1));
        assert_eq!(a.factor(2), b.factor(2));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let kind = ModelKind::Costco(CostcoShape { channels: 2, hidden: 3, activation: Activation::Relu });
        let m = init_model(kind, &[3, 4], 2, 0.3, 8).unwrap();
        let back = parse_checkpoint(&m.to_checkpoint()).unwrap();
        assert_eq!(m, back);
        let cp = init_model(ModelKind::Cp, &[3, 4, 5], 2, 0.3, 8).unwrap();
        assert_eq!(parse_checkpoint(&cp.to_checkpoint()).unwrap(), cp);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(parse_checkpoint("").is_err());
        assert!(parse_checkpoint("fairtensor-model 1\nkind cp\nrank 1\ndims 2\nparams 3\n1\n2\n3\n").is_err());
        assert!(parse_checkpoint("fairtensor-model 1\nkind cp\nrank 1\ndims 99999999999 99999999999\nparams 1\n1\n").is_err());
        assert!(parse_checkpoint("fairtensor-model 2\nkind cp\n").is_err());
    }
}
