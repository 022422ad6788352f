//! Seeded ground-truth tensors with controlled group imbalance.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FactorModel, ModelKind};
use crate::tensor::{ceil_count, SensitiveContext, SparseTensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub dims: Vec<usize>,
    /// Rank of the generating CP model.
    pub rank: usize,
    pub sensitive_mode: usize,
    /// Entities `0..majority` form the majority group.
    pub majority: usize,
    /// The next `minority` entities form the minority group.
    pub minority: usize,
    /// Observed fraction of the majority slice.
    pub majority_density: f64,
    pub minority_density: f64,
    pub noise_std: f64,
    /// When positive, sensitive-mode rows are drawn around this many shared
    /// centroids instead of independently, so entities have look-alikes in
    /// both groups.
    pub clusters: usize,
    /// Standard deviation of a row around its centroid, relative to the
    /// centroid scale.
    pub cluster_spread: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            dims: vec![60, 40, 20],
            rank: 3,
            sensitive_mode: 0,
            majority: 30,
            minority: 30,
            majority_density: 0.2,
            minority_density: 0.02,
            noise_std: 0.1,
            clusters: 0,
            cluster_spread: 0.1,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        if self.dims.is_empty() || self.dims.contains(&0) {
            return bad(format!("invalid dims {:?}", self.dims));
        }
        if self.sensitive_mode >= self.dims.len() {
            return bad(format!("sensitive mode {} out of range", self.sensitive_mode));
        }
        if self.rank == 0 {
            return bad("rank must be positive".into());
        }
        if self.majority + self.minority != self.dims[self.sensitive_mode] {
            return bad(format!(
                "group sizes {} + {} must equal the sensitive dim {}",
                self.majority, self.minority, self.dims[self.sensitive_mode]
            ));
        }
        if self.majority == 0 || self.minority == 0 {
            return bad("both groups need at least one entity".into());
        }
        for d in [self.majority_density, self.minority_density] {
            if !(d > 0.0 && d <= 1.0) {
                return bad(format!("densities must lie in (0, 1], got {d}"));
            }
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std must be non-negative, got {}", self.noise_std));
        }
        if !(self.cluster_spread >= 0.0 && self.cluster_spread.is_finite()) {
            return bad(format!("cluster_spread must be non-negative, got {}", self.cluster_spread));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub tensor: SparseTensor,
    pub context: SensitiveContext,
    pub truth: FactorModel,
}

/// Draws a CP model, then `ceil(density * slice)` distinct entries from each
/// group's slice, valued by the model plus Gaussian noise.
///
/// Factor entries are standard normal scaled by `rank^(-1/(2N))`, which gives
/// noise-free values unit variance regardless of rank and order. With
/// `clusters > 0` the sensitive rows are centroid plus scaled Gaussian
/// spread instead.
pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let dims = &spec.dims;
    let order = dims.len();
    let s = spec.sensitive_mode;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut truth = FactorModel::zeroed(ModelKind::Cp, dims, spec.rank)?;
    let scale = (spec.rank as f64).powf(-1.0 / (2.0 * order as f64));
    for p in truth.params_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *p = z * scale;
    }
    if spec.clusters > 0 {
        let r = spec.rank;
        let centroids: Vec<f64> = (0..spec.clusters * r)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                scale * z
            })
            .collect();
        for i in 0..dims[s] {
            let c = rng.random_range(0..spec.clusters);
            for (k, v) in truth.row_mut(s, i).iter_mut().enumerate() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = centroids[c * r + k] + spec.cluster_spread * scale * z;
            }
        }
    }

    let others: Vec<usize> = (0..order).filter(|&n| n != s).collect();
    let slice: usize = others.iter().map(|&n| dims[n]).product();
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Argument(e.to_string()))?;

    let groups = [(0, 0..spec.majority, spec.majority_density), (1, spec.majority..dims[s], spec.minority_density)];
    let mut entries = Vec::new();
    for (g, entities, density) in groups {
        let space = entities.len() * slice;
        let count = ceil_count(density, space);
        if count == 0 {
            return Err(Error::EmptyGroup(g));
        }
        let mut picked: Vec<usize> = sample(&mut rng, space, count).into_vec();
        picked.sort_unstable();
        for flat in picked {
            let mut idx = vec![0; order];
            idx[s] = entities.start + flat / slice;
            let mut rest = flat % slice;
            for &n in others.iter().rev() {
                idx[n] = rest % dims[n];
                rest /= dims[n];
            }
            let clean = truth.predict_unchecked(&idx);
            let value = if spec.noise_std > 0.0 { clean + noise.sample(&mut rng) } else { clean };
            entries.push((idx, value));
        }
    }

    let group_of = (0..dims[s]).map(|i| usize::from(i >= spec.majority)).collect();
    let context = SensitiveContext::new(s, group_of, vec!["majority".into(), "minority".into()])?;
    Ok(SynthData { tensor: SparseTensor::new(dims.clone(), entries)?, context, truth })
}
