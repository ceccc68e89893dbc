use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{Branch, LossRegistry, LossToggles, FDC_CE, FDC_DIST, FRG, PC_CE, PC_KL};

use super::{evaluate, harmonic_mean, BranchMetrics, Checkpoint, Prepared, TrainConfig};

/// Named loss-toggle presets for ablation sweeps.
pub const ABLATIONS: &[(&str, &[&str])] = &[
    ("full", &[]),
    ("baseline", &[FRG, FDC_CE, FDC_DIST, PC_CE, PC_KL]),
    ("fdc-only", &[FRG, PC_CE, PC_KL]),
    ("pc-only", &[FRG, FDC_CE, FDC_DIST]),
    ("no-pc", &[PC_CE, PC_KL]),
    ("no-frg", &[FRG]),
    ("no-fdc-ce", &[FDC_CE]),
    ("no-dist", &[FDC_DIST]),
    ("no-pc-ce", &[PC_CE]),
    ("no-pc-kl", &[PC_KL]),
];

/// Apply a named preset on top of `toggles`.
pub fn apply_ablation(name: &str, toggles: &mut LossToggles) -> Result<()> {
    let (_, off) = ABLATIONS.iter().find(|(n, _)| *n == name).ok_or_else(|| {
        let known: Vec<_> = ABLATIONS.iter().map(|(n, _)| *n).collect();
        Error::Config(format!(
            "unknown ablation `{name}` (known: {})",
            known.join(", ")
        ))
    })?;
    for t in *off {
        toggles.disable(t);
    }
    LossRegistry::builtin().validate(toggles)
}

/// Everything a run reports. Wall-clock time is kept out so that reports
/// are reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub ablation: Option<String>,
    pub config: TrainConfig,
    pub base_params: Option<usize>,
    pub new_params: Option<usize>,
    /// Parameters in one reliability gate.
    pub gate_params: usize,
    pub base: Option<BranchMetrics>,
    pub new: Option<BranchMetrics>,
    pub hm: Option<f64>,
    pub mean_d_fg: Option<f64>,
    pub mean_r: Option<f64>,
    pub mean_b: Option<f64>,
}

/// Evaluate whatever branches the checkpoint holds.
pub fn run_report(prep: &Prepared, ck: &Checkpoint, ablation: Option<&str>) -> Result<RunReport> {
    let cfg = &ck.config;
    let base = match &ck.base {
        Some(b) => Some(evaluate(prep, Some(b), None, cfg, Branch::Base)?),
        None => None,
    };
    let new_ready = if cfg.uses_prior() {
        ck.new.is_some()
    } else {
        ck.base.is_some()
    };
    let new = if new_ready {
        Some(evaluate(
            prep,
            ck.base.as_ref(),
            ck.new.as_ref(),
            cfg,
            Branch::New,
        )?)
    } else {
        None
    };
    Ok(RunReport {
        seed: cfg.seed,
        ablation: ablation.map(str::to_string),
        config: cfg.clone(),
        base_params: ck.base.as_ref().map(|b| b.params.num_scalars()),
        new_params: ck.new.as_ref().map(|n| n.params.num_scalars()),
        gate_params: cfg.gate_depth.param_count(cfg.dim_rg),
        hm: match (&base, &new) {
            (Some(b), Some(n)) => Some(harmonic_mean(b.accuracy, n.accuracy)),
            _ => None,
        },
        mean_d_fg: base.as_ref().map(|m| m.mean_d_fg),
        mean_r: base.as_ref().map(|m| m.mean_trust),
        mean_b: new
            .as_ref()
            .filter(|_| cfg.uses_prior())
            .map(|m| m.mean_trust),
        base,
        new,
    })
}
