//! Minibatch Adam training under the plain, MADR-penalized,
//! MADE-penalized or coupled (augmentation) objectives.

mod adam;
pub mod penalty;

use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::Adam;
pub use penalty::{
    loss_plain, penalty_coupling, penalty_made, penalty_madr, sign, Batch,
};

use crate::error::{Error, Result};
use crate::metrics::{evaluate, mse};
use crate::model::FactorModel;
use crate::tensor::{SensitiveContext, SparseTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Plain,
    MadrPenalty,
    MadePenalty,
    Staff,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Plain => "plain",
            Objective::MadrPenalty => "madr_penalty",
            Objective::MadePenalty => "made_penalty",
            Objective::Staff => "staff",
        }
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "plain" => Objective::Plain,
            "madr_penalty" => Objective::MadrPenalty,
            "made_penalty" => Objective::MadePenalty,
            "staff" => Objective::Staff,
            other => return Err(Error::Argument(format!("unknown objective {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub rank: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Coefficient of the L2 penalty on the factor matrices.
    pub weight_decay: f64,
    /// Weight of the MADR/MADE penalty or of the coupling term.
    pub fairness_coeff: f64,
    pub max_epochs: usize,
    /// Epochs without a new best validation MSE before stopping; 0 disables
    /// early stopping.
    pub patience: usize,
    pub seed: u64,
    pub objective: Objective,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rank: 10,
            batch_size: 1024,
            learning_rate: 0.01,
            weight_decay: 1e-3,
            fairness_coeff: 0.0,
            max_epochs: 200,
            patience: 10,
            seed: 0,
            objective: Objective::Plain,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        if self.rank == 0 {
            return bad("rank must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(self.fairness_coeff >= 0.0 && self.fairness_coeff.is_finite()) {
            return bad(format!("fairness_coeff must be non-negative, got {}", self.fairness_coeff));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
    /// `None` when a group has no validation entries.
    pub val_made: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    /// Parameters at the best epoch.
    pub model: FactorModel,
}

impl TrainReport {
    pub fn best(&self) -> &EpochLog {
        &self.epochs[self.best_epoch]
    }

    /// One row per epoch: `epoch,train_loss,val_mse,val_made`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_mse,val_made\n");
        for e in &self.epochs {
            let made = e.val_made.map(|m| format!("{m:.17e}")).unwrap_or_default();
            let _ = writeln!(out, "{},{:.17e},{:.17e},{}", e.epoch, e.train_loss, e.val_mse, made);
        }
        out
    }
}

fn check_shapes(model: &FactorModel, train: &SparseTensor, val: &SparseTensor, ctx: &SensitiveContext) -> Result<()> {
    if model.dims() != train.dims() {
        return Err(Error::DimensionMismatch(format!(
            "model dims {:?} differ from training tensor dims {:?}",
            model.dims(),
            train.dims()
        )));
    }
    if val.order() != model.order() || val.dims().iter().zip(model.dims()).any(|(v, m)| v > m) {
        return Err(Error::DimensionMismatch(format!(
            "validation dims {:?} exceed model dims {:?}",
            val.dims(),
            model.dims()
        )));
    }
    let s = ctx.sensitive_mode();
    if s >= model.order() || ctx.num_entities() < train.dims()[s] {
        return Err(Error::DimensionMismatch(format!(
            "sensitive context covers {} entities of mode {s}, tensor has {:?}",
            ctx.num_entities(),
            train.dims()
        )));
    }
    Ok(())
}

/// Trains `model` on `train`, selecting the epoch with the lowest
/// validation MSE.
///
/// Each batch's gradient is the squared-error gradient, plus the L2 factor
/// penalty and (for [`Objective::Staff`]) the coupling penalty, both scaled
/// by `batch_len / |train|` so their totals over an epoch match a single
/// full-data term, plus `fairness_coeff` times the batch-level MADR or MADE
/// gap for the penalty objectives. `coupling` must be given exactly when the
/// objective is `Staff`.
pub fn train(
    mut model: FactorModel,
    train: &SparseTensor,
    val: &SparseTensor,
    ctx: &SensitiveContext,
    cfg: &TrainConfig,
    coupling: Option<&[(usize, usize)]>,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_shapes(&model, train, val, ctx)?;
    if model.rank() != cfg.rank {
        return Err(Error::DimensionMismatch(format!(
            "model rank {} differs from configured rank {}",
            model.rank(),
            cfg.rank
        )));
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::Argument("training and validation tensors must be non-empty".into()));
    }
    let pairs = match (cfg.objective, coupling) {
        (Objective::Staff, Some(p)) => p,
        (Objective::Staff, None) => return Err(Error::Argument("the staff objective needs coupling pairs".into())),
        (_, Some(_)) => return Err(Error::Argument("coupling pairs are only used by the staff objective".into())),
        (_, None) => &[][..],
    };

    let total = train.nnz();
    let s = ctx.sensitive_mode();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1 << 32);
    let mut adam = Adam::new(model.num_params(), cfg.learning_rate);
    let mut grad = vec![0.0; model.num_params()];
    let mut order: Vec<usize> = (0..total).collect();

    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, FactorModel)> = None;

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = Batch::new(train, chunk);
            let fraction = chunk.len() as f64 / total as f64;
            grad.fill(0.0);
            let mut loss = penalty::data_loss_into(&model, batch, &mut grad);
            loss += penalty::weight_decay_into(&model, cfg.weight_decay, fraction, &mut grad);
            if cfg.fairness_coeff != 0.0 {
                let c = cfg.fairness_coeff;
                loss += match cfg.objective {
                    Objective::Plain => 0.0,
                    Objective::MadrPenalty => c * penalty::penalty_madr_into(&model, batch, ctx, c, &mut grad),
                    Objective::MadePenalty => c * penalty::penalty_made_into(&model, batch, ctx, c, &mut grad),
                    Objective::Staff => penalty::penalty_coupling_into(&model, s, pairs, c * fraction, &mut grad)?,
                };
            }
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            epoch_loss += loss;
            adam.step(model.params_mut(), &grad);
        }

        let val_mse = mse(&model, val)?;
        let val_made = match evaluate(&model, val, ctx) {
            Ok(r) => Some(r.made),
            Err(Error::EmptyGroup(_)) => None,
            Err(e) => return Err(e),
        };
        if !val_mse.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: usize::MAX });
        }
        epochs.push(EpochLog { epoch, train_loss: epoch_loss, val_mse, val_made });
        log::debug!("epoch {epoch}: train loss {epoch_loss:.6e}, val mse {val_mse:.6e}");

        match &best {
            Some((_, b, _)) if val_mse >= *b => {}
            _ => best = Some((epoch, val_mse, model.clone())),
        }
        let best_epoch = best.as_ref().map_or(0, |b| b.0);
        if cfg.patience > 0 && epoch - best_epoch >= cfg.patience {
            break;
        }
    }

    let (best_epoch, _, model) = best.ok_or_else(|| Error::Argument("max_epochs must be at least 1".into()))?;
    Ok(TrainReport { epochs, best_epoch, model })
}
