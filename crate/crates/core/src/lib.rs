//! Sparse tensor completion with CP and CoSTCo reconstruction models, group
//! fairness metrics, and fairness-aware entity augmentation with coupled
//! regularization.

pub mod augment;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod staff;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{init_model, CostcoShape, FactorModel, ModelKind};
pub use tensor::{SensitiveContext, SparseTensor};
