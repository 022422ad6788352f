//! Fairness-aware neighbor graph and sensitive-entity augmentation.
//!
//! Each targeted sensitive entity `i` gets an augmented twin `i*` placed
//! after the original entities on the sensitive mode. The twin's entries
//! are a sample of `i`'s own observed entries (values kept) plus a sample of
//! its graph neighbors' observed entries, re-valued by the pretrained model
//! with the sensitive row replaced by the average of `i`'s row and its
//! neighbors' rows.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FactorModel;
use crate::tensor::{SensitiveContext, SparseTensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub id: usize,
    pub score: f64,
}

/// K nearest neighbors of every sensitive entity under the blended score.
#[derive(Debug, Clone, PartialEq)]
pub struct FairGraph {
    pub k: usize,
    pub gamma: f64,
    /// Sorted by score descending, ties by ascending id.
    pub neighbors: Vec<Vec<Neighbor>>,
}

impl FairGraph {
    pub fn neighbor_ids(&self, entity: usize) -> Vec<usize> {
        self.neighbors[entity].iter().map(|n| n.id).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `gamma * cos(u_i, u_j) + (1 - gamma) * (1 - cos(f_i, f_j))`.
pub fn fair_similarity(u_i: &[f64], u_j: &[f64], f_i: &[f64], f_j: &[f64], gamma: f64) -> f64 {
    let s_f = dot(u_i, u_j) / (norm(u_i) * norm(u_j));
    let s_g = 1.0 - dot(f_i, f_j) / (norm(f_i) * norm(f_j));
    gamma * s_f + (1.0 - gamma) * s_g
}

/// Builds the graph from the sensitive factor matrix (`I_s x rank`,
/// row-major) of a pretrained model.
pub fn build_graph(factors: &[f64], rank: usize, ctx: &SensitiveContext, k: usize, gamma: f64) -> Result<FairGraph> {
    let n = ctx.num_entities();
    if rank == 0 || factors.len() != n * rank {
        return Err(Error::DimensionMismatch(format!(
            "factor matrix of {} values does not hold {n} rows of rank {rank}",
            factors.len()
        )));
    }
    if k == 0 || k >= n {
        return Err(Error::Argument(format!("K must satisfy 0 < K < {n}, got {k}")));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Argument(format!("gamma must lie in [0, 1], got {gamma}")));
    }
    let rows: Vec<&[f64]> = factors.chunks_exact(rank).collect();
    if let Some(i) = rows.iter().position(|r| norm(r) == 0.0 || !norm(r).is_finite()) {
        return Err(Error::ZeroNormRow(i));
    }
    let one_hot = ctx.one_hot();

    let by_rank = |a: &Neighbor, b: &Neighbor| b.score.total_cmp(&a.score).then(a.id.cmp(&b.id));
    let neighbors = (0..n)
        .map(|i| {
            let mut cands: Vec<Neighbor> = (0..n)
                .filter(|&j| j != i)
                .map(|j| Neighbor { id: j, score: fair_similarity(rows[i], rows[j], &one_hot[i], &one_hot[j], gamma) })
                .collect();
            cands.select_nth_unstable_by(k - 1, by_rank);
            cands.truncate(k);
            cands.sort_by(by_rank);
            cands
        })
        .collect();
    Ok(FairGraph { k, gamma, neighbors })
}

/// Which sensitive entities receive an augmented twin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetRule {
    #[default]
    All,
    /// Entities whose observed count is below the median count.
    BelowMedian,
}

impl TargetRule {
    pub fn select(self, counts: &[usize]) -> Vec<usize> {
        match self {
            TargetRule::All => (0..counts.len()).collect(),
            TargetRule::BelowMedian => {
                let mut sorted = counts.to_vec();
                sorted.sort_unstable();
                let len = sorted.len();
                let median = if len == 0 {
                    0.0
                } else if len % 2 == 1 {
                    sorted[len / 2] as f64
                } else {
                    (sorted[len / 2 - 1] + sorted[len / 2]) as f64 / 2.0
                };
                (0..counts.len()).filter(|&i| (counts[i] as f64) < median).collect()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntrySource {
    /// Sampled from the original entity, true value kept.
    Original,
    /// Sampled from a neighbor, value predicted with the averaged row.
    Neighbor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedEntry {
    pub index: Vec<usize>,
    pub value: f64,
    pub source: EntrySource,
    /// Position of the sampled entry in the source training tensor.
    pub source_position: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedCounts {
    pub original: usize,
    pub augmented: usize,
    pub from_original: usize,
    pub from_neighbors: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedTensor {
    pub sensitive_mode: usize,
    /// Size of the original sensitive mode; augmented ids start here.
    pub original_dim: usize,
    pub dims: Vec<usize>,
    pub entries: Vec<AugmentedEntry>,
    /// `(original, augmented)`, one per targeted entity.
    pub pairs: Vec<(usize, usize)>,
    pub counts: Vec<AugmentedCounts>,
}

impl AugmentedTensor {
    pub fn num_augmented(&self) -> usize {
        self.pairs.len()
    }

    /// Shape of the assembled tensor: the sensitive mode grows by the
    /// number of augmented entities.
    pub fn enlarged_dims(&self) -> Vec<usize> {
        let mut d = self.dims.clone();
        d[self.sensitive_mode] = self.original_dim + self.num_augmented();
        d
    }

    /// The augmented entries alone, shaped like the assembled tensor.
    pub fn to_tensor(&self) -> Result<SparseTensor> {
        SparseTensor::new(self.enlarged_dims(), self.entries.iter().map(|e| (e.index.clone(), e.value)).collect())
    }

    /// Writes the entries in COO text and the pair list as a sidecar.
    pub fn save(&self, tensor_path: impl AsRef<Path>, pairs_path: impl AsRef<Path>) -> Result<()> {
        self.to_tensor()?.save(tensor_path)?;
        std::fs::write(pairs_path, pairs_to_text(&self.pairs))?;
        Ok(())
    }
}

pub fn pairs_to_text(pairs: &[(usize, usize)]) -> String {
    let mut out = String::new();
    for (o, a) in pairs {
        let _ = writeln!(out, "{o}\t{a}");
    }
    out
}

/// Parses `original_id augmented_id` lines.
pub fn parse_pairs(text: &str) -> Result<Vec<(usize, usize)>> {
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut f = line.split_whitespace().map(str::parse::<usize>);
        match (f.next(), f.next(), f.next()) {
            (Some(Ok(o)), Some(Ok(a)), None) => pairs.push((o, a)),
            _ => {
                return Err(Error::Parse { line: i + 1, message: "expected `original_id augmented_id`".into() });
            }
        }
    }
    Ok(pairs)
}

/// Settings for [`generate_entries`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Entries sampled from the original entity.
    pub p: usize,
    /// Entries sampled from the neighbors.
    pub q: usize,
    pub seed: u64,
    pub targets: TargetRule,
}

/// Sensitive row averaged over `entity` and its neighbors.
pub fn averaged_row(model: &FactorModel, sensitive_mode: usize, entity: usize, neighbors: &[usize]) -> Vec<f64> {
    let mut avg = model.row(sensitive_mode, entity).to_vec();
    for &j in neighbors {
        for (a, &x) in avg.iter_mut().zip(model.row(sensitive_mode, j)) {
            *a += x;
        }
    }
    let denom = (neighbors.len() + 1) as f64;
    avg.iter_mut().for_each(|a| *a /= denom);
    avg
}

pub fn generate_entries(
    train: &SparseTensor,
    graph: &FairGraph,
    pretrained: &FactorModel,
    ctx: &SensitiveContext,
    cfg: &AugmentConfig,
) -> Result<AugmentedTensor> {
    let s = ctx.sensitive_mode();
    if pretrained.dims() != train.dims() {
        return Err(Error::DimensionMismatch(format!(
            "pretrained model dims {:?} differ from tensor dims {:?}",
            pretrained.dims(),
            train.dims()
        )));
    }
    let n_entities = train.dims()[s];
    if graph.neighbors.len() != n_entities || ctx.num_entities() != n_entities {
        return Err(Error::DimensionMismatch(format!(
            "graph covers {} entities, context {}, tensor mode {s} has {n_entities}",
            graph.neighbors.len(),
            ctx.num_entities()
        )));
    }

    let mut by_entity: Vec<Vec<usize>> = vec![Vec::new(); n_entities];
    for k in 0..train.nnz() {
        by_entity[train.index(k)[s]].push(k);
    }
    let observed: Vec<usize> = by_entity.iter().map(Vec::len).collect();
    let targets = cfg.targets.select(&observed);

    let mut entries = Vec::new();
    let mut pairs = Vec::with_capacity(targets.len());
    let mut counts = Vec::with_capacity(targets.len());
    for (t, &entity) in targets.iter().enumerate() {
        let aug_id = n_entities + t;
        pairs.push((entity, aug_id));
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(entity as u64);

        let own = &by_entity[entity];
        let neighbor_ids = graph.neighbor_ids(entity);
        let pool: Vec<usize> = neighbor_ids.iter().flat_map(|&j| by_entity[j].iter().copied()).collect();
        if own.is_empty() && pool.is_empty() {
            log::warn!("sensitive entity {entity} has no observed or neighbor entries; nothing to sample");
        }

        let mut seen: HashSet<Vec<usize>> = HashSet::new();
        let reindex = |k: usize| {
            let mut idx = train.index(k).to_vec();
            idx[s] = aug_id;
            idx
        };

        let take = cfg.p.min(own.len());
        let mut from_original = 0;
        for i in sample(&mut rng, own.len(), take) {
            let k = own[i];
            let index = reindex(k);
            seen.insert(index.clone());
            entries.push(AugmentedEntry { index, value: train.value(k), source: EntrySource::Original, source_position: k });
            from_original += 1;
        }

        let picked: Vec<usize> = if pool.len() <= cfg.q {
            pool.clone()
        } else {
            sample(&mut rng, pool.len(), cfg.q).into_iter().map(|i| pool[i]).collect()
        };
        let mut from_neighbors = 0;
        if !picked.is_empty() {
            let avg = averaged_row(pretrained, s, entity, &neighbor_ids);
            for k in picked {
                let index = reindex(k);
                if !seen.insert(index.clone()) {
                    continue;
                }
                let src = train.index(k);
                let rows: Vec<&[f64]> = (0..train.order())
                    .map(|n| if n == s { &avg[..] } else { pretrained.row(n, src[n]) })
                    .collect();
                let value = pretrained.predict_generic(&rows)?;
                entries.push(AugmentedEntry { index, value, source: EntrySource::Neighbor, source_position: k });
                from_neighbors += 1;
            }
        }
        counts.push(AugmentedCounts { original: entity, augmented: aug_id, from_original, from_neighbors });
    }

    Ok(AugmentedTensor {
        sensitive_mode: s,
        original_dim: n_entities,
        dims: train.dims().to_vec(),
        entries,
        pairs,
        counts,
    })
}

/// Concatenates original and augmented entries into one tensor whose
/// sensitive mode is enlarged, and returns the coupling pairs.
pub fn assemble(train: &SparseTensor, aug: &AugmentedTensor) -> Result<(SparseTensor, Vec<(usize, usize)>)> {
    let s = aug.sensitive_mode;
    if train.dims() != aug.dims.as_slice() {
        return Err(Error::DimensionMismatch(format!(
            "augmentation was built for dims {:?}, tensor has {:?}",
            aug.dims,
            train.dims()
        )));
    }
    let order = train.order();
    let mut indices = Vec::with_capacity((train.nnz() + aug.entries.len()) * order);
    let mut values = Vec::with_capacity(train.nnz() + aug.entries.len());
    for (idx, v) in train.entries() {
        indices.extend_from_slice(idx);
        values.push(v);
    }
    for e in &aug.entries {
        assert!(
            e.index[s] >= aug.original_dim,
            "augmented entry {:?} falls in the original sensitive range",
            e.index
        );
        indices.extend_from_slice(&e.index);
        values.push(e.value);
    }
    let tensor = SparseTensor::from_flat(aug.enlarged_dims(), indices, values)?;
    Ok((tensor, aug.pairs.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelKind};
    use crate::tensor::parse_sensitive;

    fn ctx(groups: &[usize]) -> SensitiveContext {
        let text: String = groups.iter().enumerate().map(|(i, g)| format!("{i} g{g}\n")).collect();
        parse_sensitive(&text, groups.len(), 0).unwrap()
    }

    #[test]
    fn gamma_zero_prefers_cross_group() {
        let c = ctx(&[0, 0, 0, 1, 1, 1]);
        let factors: Vec<f64> = (0..12).map(|x| (x as f64 * 0.37).sin() + 1.5).collect();
        let g = build_graph(&factors, 2, &c, 3, 0.0).unwrap();
        for i in 0..6 {
            for nb in &g.neighbors[i] {
                assert_ne!(c.group_of(nb.id), c.group_of(i));
                assert_eq!(nb.score, 1.0);
            }
            // ties broken by ascending id
            let ids = g.neighbor_ids(i);
            assert!(ids.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn graph_errors() {
        let c = ctx(&[0, 1, 0]);
        let mut f = vec![1.0, 0.0, 0.5, 0.5, 0.0, 1.0];
        assert!(build_graph(&f, 2, &c, 3, 0.5).is_err());
        assert!(build_graph(&f, 2, &c, 1, 1.5).is_err());
        f[2] = 0.0;
        f[3] = 0.0;
        assert!(matches!(build_graph(&f, 2, &c, 1, 0.5), Err(Error::ZeroNormRow(1))));
    }

    #[test]
    fn below_median_rule() {
        assert_eq!(TargetRule::BelowMedian.select(&[5, 1, 3, 10]), vec![1, 2]);
        assert_eq!(TargetRule::BelowMedian.select(&[5, 1, 9]), vec![1]);
        assert_eq!(TargetRule::All.select(&[5, 1]), vec![0, 1]);
    }

    fn setup() -> (SparseTensor, SensitiveContext, FactorModel) {
        let mut entries = Vec::new();
        for j in 0..4 {
            for k in 0..3 {
                entries.push((vec![0, j, k], 1.0 + j as f64));
                if (j + k) % 2 == 0 {
                    entries.push((vec![2, j, k], 0.5));
                }
            }
        }
        entries.push((vec![1, 0, 0], 2.0));
        entries.push((vec![1, 3, 2], 4.0));
        let t = SparseTensor::new(vec![4, 4, 3], entries).unwrap();
        let c = ctx(&[0, 1, 0, 1]);
        let m = init_model(ModelKind::Cp, &[4, 4, 3], 2, 0.5, 2).unwrap();
        (t, c, m)
    }

    #[test]
    fn degenerate_counts_produce_only_pairs() {
        let (t, c, m) = setup();
        let g = build_graph(m.factor(0), 2, &c, 2, 0.5).unwrap();
        let aug = generate_entries(&t, &g, &m, &c, &AugmentConfig { p: 0, q: 0, seed: 1, targets: TargetRule::All }).unwrap();
        assert!(aug.entries.is_empty());
        assert_eq!(aug.pairs, vec![(0, 4), (1, 5), (2, 6), (3, 7)]);
        let (big, pairs) = assemble(&t, &aug).unwrap();
        assert_eq!(big.dims(), &[8, 4, 3]);
        assert_eq!(big.nnz(), t.nnz());
        assert_eq!(pairs, aug.pairs);
    }

    #[test]
    fn original_sample_capped_by_observed() {
        let (t, c, m) = setup();
        let g = build_graph(m.factor(0), 2, &c, 1, 0.5).unwrap();
        let aug = generate_entries(&t, &g, &m, &c, &AugmentConfig { p: 30, q: 0, seed: 1, targets: TargetRule::All }).unwrap();
        assert_eq!(aug.counts[1].from_original, 2);
        assert_eq!(aug.counts[0].from_original, 12);
        for e in &aug.entries {
            assert_eq!(e.value, t.value(e.source_position));
        }
    }

    #[test]
    fn twin_neighbor_collapses_to_shared_row() {
        // entity 1's only neighbor carries an identical factor row, so the
        // averaged row is that row itself
        let (t, c, mut m) = setup();
        let shared = m.row(0, 0).to_vec();
        m.row_mut(0, 1).copy_from_slice(&shared);
        let g = FairGraph { k: 1, gamma: 1.0, neighbors: vec![
            vec![Neighbor { id: 1, score: 1.0 }],
            vec![Neighbor { id: 0, score: 1.0 }],
            vec![Neighbor { id: 0, score: 0.0 }],
            vec![Neighbor { id: 0, score: 0.0 }],
        ] };
        let aug = generate_entries(&t, &g, &m, &c, &AugmentConfig { p: 0, q: 30, seed: 4, targets: TargetRule::All }).unwrap();
        let mut checked = 0;
        for e in aug.entries.iter().filter(|e| e.index[0] == 5) {
            let mut src = e.index.clone();
            src[0] = 0;
            let expected = m.predict_cp(&src).unwrap();
            assert!((e.value - expected).abs() < 1e-12);
            checked += 1;
        }
        assert_eq!(checked, 12);
    }

    #[test]
    fn pairs_roundtrip_and_errors() {
        let pairs = vec![(0, 4), (3, 5)];
        assert_eq!(parse_pairs(&pairs_to_text(&pairs)).unwrap(), pairs);
        assert!(matches!(parse_pairs("0 1\n2 x\n"), Err(Error::Parse { line: 2, .. })));
    }
}
