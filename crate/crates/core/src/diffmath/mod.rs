//! Minimal differentiable numeric core.
//!
//! Forward ops are plain functions over `&[f64]`; each differentiable op has a
//! matching `*_backward` that maps an upstream gradient to the input gradient.
//! Trainable state lives in a [`ParamSet`], which owns both values and
//! gradient accumulators.

mod gradcheck;
mod mat;
mod ops;
mod params;

pub use gradcheck::{grad_check, GradCheckReport, DEFAULT_STEP};
pub use mat::{dot, norm, Mat};
pub use ops::*;
pub use params::{sgd_step, GradBuf, ParamId, ParamSet};
