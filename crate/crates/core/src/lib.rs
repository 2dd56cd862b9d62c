//! Sinkhorn–Knopp matrix scaling and entropic optimal transport.

pub mod bench;
pub mod diagnostics;
pub mod eot;
pub mod error;
pub mod flow;
pub mod generators;
pub mod matrix;
pub mod permanent;
pub mod reduction;
pub mod scaling;

pub use error::{Axis, Error, Result};
pub use matrix::{Marginals, Matrix, ScalingInstance};
pub use scaling::{sk_run, sk_step, SkOutcome, SkState, SkTrace, TraceOptions, TraceRecord};
