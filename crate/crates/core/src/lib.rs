//! Logit-level foreground-guided adaptation for frozen vision-language
//! backbones, operating on pre-extracted embeddings.
//!
//! The base branch re-projects image/text features with residual bottleneck
//! adapters distilled toward foreground-view predictions, weighted by a
//! learned foreground trust score. The new branch blends frozen backbone
//! logits with zero-shot prior logits through a second trust gate and never
//! touches the adapters.

pub mod dataio;
pub mod diffmath;
mod error;
pub mod fdc;
pub mod gates;
pub mod indicators;
pub mod losses;
pub mod pc;
pub mod trainer;

pub use error::{Error, Result};
