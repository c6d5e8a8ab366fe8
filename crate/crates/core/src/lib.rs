//! Direct-perception regression with tolerance-aware interval training.
//!
//! The crate covers a small reverse-mode autodiff engine, layered networks,
//! interval bound propagation from a hidden layer, the tolerance losses,
//! staged training, FGSM robustness comparison and the data pipeline.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod interval;
pub mod losses;
pub mod model_io;
pub mod network;
pub mod tensor;
pub mod training;

pub use attack::{compare_models, minimal_epsilon, AttackConfig, ComparisonReport, EpsilonSearch};
pub use autodiff::{Graph, Var};
pub use data::Sample;
pub use error::{Error, Result};
pub use interval::{IntervalTensor, RobustSpec};
pub use losses::{LossKind, LossReport, ToleranceBand};
pub use model_io::{load_model, save_model, Provenance};
pub use network::{LayerSpec, Network};
pub use tensor::{Padding, Tensor};
pub use training::{OptimizerConfig, Schedule, Stage};
