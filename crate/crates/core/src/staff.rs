//! The two-stage augmentation pipeline: pretrain on the original tensor,
//! build the neighbor graph from the pretrained sensitive factors, generate
//! augmented entities, then train on the enlarged tensor with the coupling
//! penalty.

use serde::{Deserialize, Serialize};

use crate::augment::{assemble, build_graph, generate_entries, AugmentConfig, AugmentedTensor, FairGraph, TargetRule};
use crate::error::Result;
use crate::model::{init_model, FactorModel, ModelKind};
use crate::tensor::{SensitiveContext, SparseTensor};
use crate::train::{train, Objective, TrainConfig, TrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StaffSettings {
    pub k: usize,
    pub gamma: f64,
    pub p: usize,
    pub q: usize,
    pub targets: TargetRule,
}

impl Default for StaffSettings {
    fn default() -> Self {
        Self { k: 5, gamma: 0.5, p: 30, q: 30, targets: TargetRule::All }
    }
}

/// Trains a fresh model with the plain objective. This is both the plain
/// baseline and the first stage of the pipeline.
pub fn pretrain(
    kind: ModelKind,
    train_set: &SparseTensor,
    val: &SparseTensor,
    ctx: &SensitiveContext,
    cfg: &TrainConfig,
    init_scale: f64,
) -> Result<TrainReport> {
    let cfg = TrainConfig { objective: Objective::Plain, fairness_coeff: 0.0, ..cfg.clone() };
    let model = init_model(kind, train_set.dims(), cfg.rank, init_scale, cfg.seed)?;
    train(model, train_set, val, ctx, &cfg, None)
}

#[derive(Debug, Clone)]
pub struct StaffOutcome {
    pub graph: FairGraph,
    pub augmented: AugmentedTensor,
    pub report: TrainReport,
}

/// Second stage. The fresh model is initialized with the same seed as the
/// plain run, so the original rows start from identical values.
#[allow(clippy::too_many_arguments)]
pub fn run_staff(
    kind: ModelKind,
    train_set: &SparseTensor,
    val: &SparseTensor,
    ctx: &SensitiveContext,
    cfg: &TrainConfig,
    settings: &StaffSettings,
    pretrained: &FactorModel,
    init_scale: f64,
) -> Result<StaffOutcome> {
    let s = ctx.sensitive_mode();
    let graph = build_graph(pretrained.factor(s), pretrained.rank(), ctx, settings.k, settings.gamma)?;
    let aug_cfg = AugmentConfig { p: settings.p, q: settings.q, seed: cfg.seed, targets: settings.targets };
    let augmented = generate_entries(train_set, &graph, pretrained, ctx, &aug_cfg)?;
    let (enlarged, pairs) = assemble(train_set, &augmented)?;
    let big_ctx = ctx.enlarged(&pairs)?;
    let cfg = TrainConfig { objective: Objective::Staff, ..cfg.clone() };
    let model = init_model(kind, enlarged.dims(), cfg.rank, init_scale, cfg.seed)?;
    let report = train(model, &enlarged, val, &big_ctx, &cfg, Some(&pairs))?;
    Ok(StaffOutcome { graph, augmented, report })
}
