//! Capsule-network aggregation of multi-head attention.
//!
//! The h per-head attention outputs at each token position are treated as
//! input capsules, combed into l output capsules by dynamic routing or EM
//! routing, and passed through a residual feed-forward block. Everything
//! runs on a small reverse-mode autodiff engine so the whole mechanism can
//! be trained and gradient-checked on a CPU.

pub mod attention;
pub mod autodiff;
pub mod capsule_layer;
pub mod checks;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod params;
pub mod routing;
pub mod sweep;
pub mod task;
pub mod tensor;
pub mod trace_export;
pub mod train;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::{Float, Tensor};
