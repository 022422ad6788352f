//! Sparse COO tensors, sensitive-attribute context, text ingestion,
//! train/validation/test splitting and minority downsampling.
//!
//! Tensor files hold one observed entry per line: `N` zero-based
//! coordinates followed by the value, separated by tabs or spaces. Lines
//! starting with `#` and blank lines are ignored. Sensitive files hold
//! `entity_index group_label` pairs in the same style.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// N-mode sparse tensor in coordinate format.
///
/// Indices are stored flat, `order` coordinates per entry. Construction
/// validates bounds and rejects duplicate index tuples, so every instance
/// upholds both invariants.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTensor {
    dims: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseTensor {
    /// Builds a tensor from index tuples and values.
    pub fn new(dims: Vec<usize>, entries: Vec<(Vec<usize>, f64)>) -> Result<Self> {
        let mut indices = Vec::with_capacity(entries.len() * dims.len());
        let mut values = Vec::with_capacity(entries.len());
        for (idx, v) in entries {
            if idx.len() != dims.len() {
                return Err(Error::DimensionMismatch(format!(
                    "index {idx:?} has {} coordinates, tensor has order {}",
                    idx.len(),
                    dims.len()
                )));
            }
            indices.extend_from_slice(&idx);
            values.push(v);
        }
        Self::from_flat(dims, indices, values)
    }

    /// Builds a tensor from a flat index buffer (`order` coordinates per entry).
    pub fn from_flat(dims: Vec<usize>, indices: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::Argument(format!(
                "tensor dims must be a non-empty list of positive sizes, got {dims:?}"
            )));
        }
        let order = dims.len();
        if indices.len() != values.len() * order {
            return Err(Error::DimensionMismatch(format!(
                "{} index coordinates for {} values of an order-{order} tensor",
                indices.len(),
                values.len()
            )));
        }
        let mut seen = HashSet::with_capacity(values.len());
        for idx in indices.chunks_exact(order) {
            for (mode, (&c, &d)) in idx.iter().zip(&dims).enumerate() {
                if c >= d {
                    return Err(Error::Bounds { mode, coord: c, dim: d });
                }
            }
            if !seen.insert(idx) {
                return Err(Error::DuplicateEntry(idx.to_vec()));
            }
        }
        Ok(Self { dims, indices, values })
    }

    /// An empty tensor with the given shape.
    pub fn empty(dims: Vec<usize>) -> Result<Self> {
        Self::from_flat(dims, Vec::new(), Vec::new())
    }

    pub fn order(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index(&self, k: usize) -> &[usize] {
        let n = self.order();
        &self.indices[k * n..(k + 1) * n]
    }

    pub fn value(&self, k: usize) -> f64 {
        self.values[k]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Iterates `(index, value)` pairs in storage order.
    pub fn entries(&self) -> impl Iterator<Item = (&[usize], f64)> + '_ {
        self.indices
            .chunks_exact(self.order())
            .zip(self.values.iter().copied())
    }

    /// Keeps the entries at the given positions, in the given order.
    pub fn select(&self, positions: &[usize]) -> SparseTensor {
        let n = self.order();
        let mut indices = Vec::with_capacity(positions.len() * n);
        let mut values = Vec::with_capacity(positions.len());
        for &k in positions {
            indices.extend_from_slice(self.index(k));
            values.push(self.values[k]);
        }
        SparseTensor { dims: self.dims.clone(), indices, values }
    }

    /// Same entries, new shape. Every coordinate must still be in bounds.
    pub fn with_dims(&self, dims: Vec<usize>) -> Result<SparseTensor> {
        Self::from_flat(dims, self.indices.clone(), self.values.clone())
    }

    /// Serializes to the COO text format with 17 significant digits.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# dims {}",
            self.dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(" ")
        );
        for (idx, v) in self.entries() {
            for c in idx {
                let _ = write!(out, "{c}\t");
            }
            let _ = writeln!(out, "{v:.16e}");
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

/// Reads a `# dims d_1 ... d_N` comment line, if present.
fn dims_header(text: &str) -> Result<Option<Vec<usize>>> {
    for (i, line) in text.lines().enumerate() {
        let Some(rest) = line.trim().strip_prefix('#') else { continue };
        let mut fields = rest.split_whitespace();
        if fields.next() != Some("dims") {
            continue;
        }
        let dims = fields
            .map(|f| f.parse::<usize>().map_err(|_| Error::Parse { line: i + 1, message: format!("invalid dim {f:?}") }))
            .collect::<Result<Vec<_>>>()?;
        return Ok(Some(dims));
    }
    Ok(None)
}

/// Parses COO text. Shape comes from `dims`, else from a `# dims` header
/// line, else each mode's size is the largest coordinate plus one with the
/// order taken from the first entry line.
pub fn parse_tensor(text: &str, dims: Option<&[usize]>) -> Result<SparseTensor> {
    let header = if dims.is_none() { dims_header(text)? } else { None };
    let dims = dims.or(header.as_deref());
    let mut order = dims.map(|d| d.len());
    let mut indices = Vec::new();
    let mut values = Vec::new();
    for (line, content) in content_lines(text) {
        let fields: Vec<&str> = content.split_whitespace().collect();
        if fields.len() < 2 {
            return Err(Error::Parse {
                line,
                message: "expected at least one coordinate and a value".into(),
            });
        }
        let n = *order.get_or_insert(fields.len() - 1);
        if fields.len() != n + 1 {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", n + 1, fields.len()),
            });
        }
        for f in &fields[..n] {
            let c: usize = f.parse().map_err(|_| Error::Parse {
                line,
                message: format!("invalid coordinate {f:?}"),
            })?;
            indices.push(c);
        }
        let v: f64 = fields[n].parse().map_err(|_| Error::Parse {
            line,
            message: format!("invalid value {:?}", fields[n]),
        })?;
        if !v.is_finite() {
            return Err(Error::Parse { line, message: format!("non-finite value {v}") });
        }
        values.push(v);
    }
    let dims = match dims {
        Some(d) => d.to_vec(),
        None => {
            let n = order.ok_or_else(|| Error::Argument("tensor file has no entries and no dims were given".into()))?;
            let mut d = vec![0usize; n];
            for idx in indices.chunks_exact(n) {
                for (m, &c) in idx.iter().enumerate() {
                    d[m] = d[m].max(c.checked_add(1).ok_or(Error::Bounds {
                        mode: m,
                        coord: c,
                        dim: usize::MAX,
                    })?);
                }
            }
            d
        }
    };
    SparseTensor::from_flat(dims, indices, values)
}

/// Reads a COO text file; see [`parse_tensor`].
pub fn load_tensor(path: impl AsRef<Path>, dims: Option<&[usize]>) -> Result<SparseTensor> {
    parse_tensor(&std::fs::read_to_string(path)?, dims)
}

/// Sensitive attribute of one tensor mode: a group id per entity.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitiveContext {
    sensitive_mode: usize,
    group_of: Vec<usize>,
    labels: Vec<String>,
}

impl SensitiveContext {
    /// `group_of[i]` is the group of entity `i`; `labels[g]` names group `g`.
    pub fn new(sensitive_mode: usize, group_of: Vec<usize>, labels: Vec<String>) -> Result<Self> {
        if labels.len() < 2 {
            return Err(Error::Argument(format!(
                "a sensitive attribute needs at least two groups, got {}",
                labels.len()
            )));
        }
        if let Some(&g) = group_of.iter().find(|&&g| g >= labels.len()) {
            return Err(Error::Argument(format!("group id {g} has no label")));
        }
        Ok(Self { sensitive_mode, group_of, labels })
    }

    pub fn sensitive_mode(&self) -> usize {
        self.sensitive_mode
    }

    pub fn num_groups(&self) -> usize {
        self.labels.len()
    }

    pub fn num_entities(&self) -> usize {
        self.group_of.len()
    }

    pub fn group_of(&self, entity: usize) -> usize {
        self.group_of[entity]
    }

    pub fn groups(&self) -> &[usize] {
        &self.group_of
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Group of the entry at `index`, read from its sensitive coordinate.
    pub fn group_of_index(&self, index: &[usize]) -> usize {
        self.group_of[index[self.sensitive_mode]]
    }

    /// One-hot row of entity `i`.
    pub fn one_hot_row(&self, entity: usize) -> Vec<f64> {
        let mut row = vec![0.0; self.num_groups()];
        row[self.group_of[entity]] = 1.0;
        row
    }

    /// The full `I_s x M` one-hot feature matrix, row-major.
    pub fn one_hot(&self) -> Vec<Vec<f64>> {
        (0..self.num_entities()).map(|i| self.one_hot_row(i)).collect()
    }

    /// Context over an enlarged sensitive mode where each `(original,
    /// augmented)` pair gives the augmented entity its original's group.
    pub fn enlarged(&self, pairs: &[(usize, usize)]) -> Result<Self> {
        let total = pairs
            .iter()
            .map(|&(_, a)| a + 1)
            .max()
            .unwrap_or(0)
            .max(self.num_entities());
        let mut group_of: Vec<Option<usize>> =
            self.group_of.iter().copied().map(Some).chain(std::iter::repeat(None)).take(total).collect();
        for &(o, a) in pairs {
            if o >= self.num_entities() {
                return Err(Error::Bounds { mode: self.sensitive_mode, coord: o, dim: self.num_entities() });
            }
            group_of[a] = Some(self.group_of[o]);
        }
        let group_of = group_of
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.ok_or(Error::MissingLabel(i)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.sensitive_mode, group_of, self.labels.clone())
    }
}

/// Parses `entity group_label` lines. Labels get dense ids in order of first
/// appearance; every entity in `0..num_entities` must be labelled.
pub fn parse_sensitive(text: &str, num_entities: usize, sensitive_mode: usize) -> Result<SensitiveContext> {
    let mut ids: HashMap<String, usize> = HashMap::new();
    let mut labels = Vec::new();
    let mut group_of = vec![None; num_entities];
    for (line, content) in content_lines(text) {
        let mut fields = content.split_whitespace();
        let (Some(e), Some(label), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(Error::Parse { line, message: "expected `entity_index group_label`".into() });
        };
        let e: usize = e.parse().map_err(|_| Error::Parse {
            line,
            message: format!("invalid entity index {e:?}"),
        })?;
        if e >= num_entities {
            return Err(Error::Bounds { mode: sensitive_mode, coord: e, dim: num_entities });
        }
        let next = labels.len();
        let g = *ids.entry(label.to_string()).or_insert_with(|| {
            labels.push(label.to_string());
            next
        });
        if group_of[e].replace(g).is_some_and(|prev| prev != g) {
            return Err(Error::Parse { line, message: format!("entity {e} labelled twice with different groups") });
        }
    }
    let group_of = group_of
        .into_iter()
        .enumerate()
        .map(|(i, g)| g.ok_or(Error::MissingLabel(i)))
        .collect::<Result<Vec<_>>>()?;
    SensitiveContext::new(sensitive_mode, group_of, labels)
}

pub fn load_sensitive(path: impl AsRef<Path>, num_entities: usize, sensitive_mode: usize) -> Result<SensitiveContext> {
    parse_sensitive(&std::fs::read_to_string(path)?, num_entities, sensitive_mode)
}

/// Writes a context back out as `entity label` lines.
pub fn sensitive_to_text(ctx: &SensitiveContext) -> String {
    let mut out = String::new();
    for (i, &g) in ctx.groups().iter().enumerate() {
        let _ = writeln!(out, "{i}\t{}", ctx.labels()[g]);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSplit {
    pub train: SparseTensor,
    pub validation: SparseTensor,
    pub test: SparseTensor,
}

/// `ceil(rate * count)`, tolerant of the representation error in products
/// like `0.05 * 200`.
pub fn ceil_count(rate: f64, count: usize) -> usize {
    let x = rate * count as f64;
    ((x - 1e-9).ceil().max(0.0) as usize).min(count)
}

fn floor_count(rate: f64, count: usize) -> usize {
    ((rate * count as f64 + 1e-9).floor().max(0.0) as usize).min(count)
}

/// Seeded shuffle, then train and validation take `floor(ratio * n)`
/// entries each and test takes the remainder.
pub fn split(tensor: &SparseTensor, ratios: (f64, f64, f64), seed: u64) -> Result<DataSplit> {
    let (rt, rv, rs) = ratios;
    if !(rt > 0.0 && rv > 0.0 && rs > 0.0) {
        return Err(Error::Argument(format!("split ratios must be positive, got {ratios:?}")));
    }
    if (rt + rv + rs - 1.0).abs() > 1e-9 {
        return Err(Error::Argument(format!("split ratios must sum to 1, got {ratios:?}")));
    }
    if tensor.is_empty() {
        return Err(Error::Argument("cannot split an empty tensor".into()));
    }
    let n = tensor.nnz();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = floor_count(rt, n);
    let n_val = floor_count(rv, n).min(n - n_train);
    Ok(DataSplit {
        train: tensor.select(&order[..n_train]),
        validation: tensor.select(&order[n_train..n_train + n_val]),
        test: tensor.select(&order[n_train + n_val..]),
    })
}

/// Observed-entry count per group.
pub fn group_counts(tensor: &SparseTensor, ctx: &SensitiveContext) -> Vec<usize> {
    let mut counts = vec![0; ctx.num_groups()];
    for (idx, _) in tensor.entries() {
        counts[ctx.group_of_index(idx)] += 1;
    }
    counts
}

/// The group with the fewest observed entries (lowest id on ties).
pub fn minority_group(tensor: &SparseTensor, ctx: &SensitiveContext) -> usize {
    let counts = group_counts(tensor, ctx);
    (0..counts.len()).min_by_key(|&g| counts[g]).unwrap_or(0)
}

/// Keeps exactly `ceil(keep_rate * count)` of the minority group's entries,
/// chosen by seeded shuffle-truncate. All other entries are untouched and
/// storage order is preserved.
pub fn downsample_minority(
    tensor: &SparseTensor,
    ctx: &SensitiveContext,
    keep_rate: f64,
    seed: u64,
) -> Result<SparseTensor> {
    if !(keep_rate > 0.0 && keep_rate <= 1.0) {
        return Err(Error::Argument(format!("keep_rate must lie in (0, 1], got {keep_rate}")));
    }
    let minority = minority_group(tensor, ctx);
    let mut minority_pos: Vec<usize> =
        (0..tensor.nnz()).filter(|&k| ctx.group_of_index(tensor.index(k)) == minority).collect();
    let keep = ceil_count(keep_rate, minority_pos.len());
    minority_pos.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let kept: HashSet<usize> = minority_pos[..keep].iter().copied().collect();
    let positions: Vec<usize> = (0..tensor.nnz())
        .filter(|&k| ctx.group_of_index(tensor.index(k)) != minority || kept.contains(&k))
        .collect();
    Ok(tensor.select(&positions))
}
