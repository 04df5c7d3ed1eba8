//! Desk-scale adversarial training: a small reverse-mode autodiff engine,
//! convolutional classifiers, random block shuffling, gradient and
//! black-box attacks, the PGDAT / TRADES / RLFAT objective family, and
//! robustness metrics.

pub mod attacks;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod rbs;
pub mod seed;
pub mod training;

pub use attacks::{AttackBudget, AttackLoss, AttackResult, AttackSpec, NAttackParams};
pub use autodiff::{Graph, Real, Tensor, Var};
pub use data::Dataset;
pub use error::{Error, Result};
pub use eval::{Accuracy, SalienceMap, SensitivityReport, ShiftKind};
pub use model::{Classifier, Differentiable, Layer, Model, ModelSpec};
pub use rbs::{RbsPlan, SplitMode};
pub use training::{Method, StepOutput, TrainConfig, TrainLog};
