//! Finite-difference checks of every loss term on small random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffmath::{grad_check, l2_normalize, Mat, ParamSet, DEFAULT_STEP};
use crate::error::Result;
use crate::fdc::{AdapterParams, BaseLayout, BaseObjective, BaseSample};
use crate::gates::{GateParams, IndicatorMask, Standardizer, TrustMode};
use crate::indicators::{backbone_logits, build_frg_stats, frg_supervision, LogitBundle};
use crate::losses::{
    active_terms, Branch, LossRegistry, LossToggles, FDC_CE, FDC_DIST, FRG, PC_CE, PC_KL,
};
use crate::pc::{NewLayout, PcObjective, PriorSample};

use super::TrainConfig;

pub const GRAD_TOL: f64 = 1e-3;

/// Instance size used by the suite.
pub const SUITE_CLASSES: usize = 3;
pub const SUITE_DIM: usize = 16;
const SUITE_BATCH: usize = 4;
const SUITE_BOTTLENECK: usize = 6;
const SUITE_HIDDEN: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradEntry {
    /// A single term name, or `base` / `pc` for a whole branch objective.
    pub loss: String,
    pub max_rel_error: f64,
    pub worst: Option<String>,
    pub passed: bool,
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Result<Vec<f64>> {
    let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    l2_normalize(&v)
}

fn randomize(ps: &mut ParamSet, rng: &mut ChaCha8Rng, amp: f64) {
    let ids: Vec<_> = ps.ids().collect();
    for id in ids {
        for x in ps.value_mut(id).as_mut_slice() {
            *x = rng.random_range(-amp..amp);
        }
    }
}

fn finish(loss: &str, ps: &mut ParamSet, report: crate::diffmath::GradCheckReport) -> GradEntry {
    ps.zero_grad();
    GradEntry {
        loss: loss.to_string(),
        max_rel_error: report.max_rel_error,
        passed: report.passes(GRAD_TOL),
        worst: report.worst.map(|(n, k)| format!("{n}[{k}]")),
    }
}

/// Check each of the five terms alone, then both branch objectives. With
/// `inject_fault` the analytic gradient is negated before comparison.
pub fn gradient_suite(cfg: &TrainConfig, seed: u64, inject_fault: bool) -> Result<Vec<GradEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, d) = (SUITE_CLASSES, SUITE_DIM);
    let data: Vec<f64> = (0..c)
        .map(|_| unit(&mut rng, d))
        .collect::<Result<Vec<_>>>()?
        .concat();
    let bank = Mat::from_vec(c, d, data)?;
    let sign = if inject_fault { -1.0 } else { 1.0 };

    let mut base_samples = Vec::new();
    let mut prior_samples = Vec::new();
    for i in 0..SUITE_BATCH {
        let label = i % c;
        let feat_full = unit(&mut rng, d)?;
        let feat_fg = unit(&mut rng, d)?;
        let z_full = backbone_logits(&feat_full, &bank, cfg.logit_scale)?;
        let z_fg = backbone_logits(&feat_fg, &bank, cfg.logit_scale)?;
        let z_clip: Vec<f64> = (0..c).map(|_| rng.random_range(-10.0..10.0)).collect();
        let bundle = LogitBundle::new(z_full.clone(), z_fg.clone(), None)?;
        base_samples.push(BaseSample {
            frg_stats: build_frg_stats(&bundle, rng.random_range(0.1..0.9), cfg.tau_d)?.to_array(),
            r_star: frg_supervision(&z_full, &z_fg, label, cfg.tau_d)?,
            feat_full,
            label,
            z_full: z_full.clone(),
            z_fg,
        });
        prior_samples.push(PriorSample::new(label, z_full, z_clip, cfg.tau_d)?);
    }

    let mut ps = ParamSet::new();
    let adapter = AdapterParams::register(&mut ps, d, SUITE_BOTTLENECK, true, &mut rng)?;
    let frg = GateParams::register(&mut ps, "frg", cfg.gate_depth, SUITE_HIDDEN, &mut rng)?;
    randomize(&mut ps, &mut rng, 0.3);
    let base_layout = BaseLayout {
        adapter,
        frg,
        frg_norm: Standardizer::fit(&base_samples.iter().map(|s| s.frg_stats).collect::<Vec<_>>()),
        frg_mask: IndicatorMask::default(),
    };
    let base_batch: Vec<&BaseSample> = base_samples.iter().collect();

    let mut new_ps = ParamSet::new();
    let brg = GateParams::register(&mut new_ps, "brg", cfg.gate_depth, SUITE_HIDDEN, &mut rng)?;
    randomize(&mut new_ps, &mut rng, 0.5);
    let new_layout = NewLayout {
        brg,
        brg_norm: Standardizer::fit(
            &prior_samples
                .iter()
                .map(|s| s.brg_stats)
                .collect::<Vec<_>>(),
        ),
        brg_mask: IndicatorMask::default(),
    };
    let prior_batch: Vec<&PriorSample> = prior_samples.iter().collect();

    let reg = LossRegistry::builtin();
    let mut out = Vec::new();
    let base_cases: [(&str, LossToggles); 4] = [
        (FRG, LossToggles::only(&[FRG], &reg)),
        (FDC_CE, LossToggles::only(&[FDC_CE], &reg)),
        (FDC_DIST, LossToggles::only(&[FDC_DIST], &reg)),
        ("base", LossToggles::all_on()),
    ];
    for (name, toggles) in base_cases {
        let obj = BaseObjective {
            terms: active_terms(&reg, &toggles, Branch::Base, cfg.lambda_d),
            tau_d: cfg.tau_d,
            scale: cfg.logit_scale,
            trust: TrustMode::Learned,
            stop_grad_trust: false,
        };
        let (_, g) = obj.loss_and_grad(&ps, &base_layout, &bank, &base_batch)?;
        ps.accumulate(&g, sign);
        let report = grad_check(
            |p| Ok(obj.loss(p, &base_layout, &bank, &base_batch)?.value),
            &mut ps,
            DEFAULT_STEP,
        )?;
        out.push(finish(name, &mut ps, report));
    }
    let pc_cases: [(&str, LossToggles); 3] = [
        (PC_CE, LossToggles::only(&[PC_CE], &reg)),
        (PC_KL, LossToggles::only(&[PC_KL], &reg)),
        ("pc", LossToggles::all_on()),
    ];
    for (name, toggles) in pc_cases {
        let obj = PcObjective {
            terms: active_terms(&reg, &toggles, Branch::New, cfg.lambda_d),
            tau_d: cfg.tau_d,
            trust: TrustMode::Learned,
        };
        let (_, g) = obj.loss_and_grad(&new_ps, &new_layout, &prior_batch)?;
        new_ps.accumulate(&g, sign);
        let report = grad_check(
            |p| Ok(obj.loss(p, &new_layout, &prior_batch)?.value),
            &mut new_ps,
            DEFAULT_STEP,
        )?;
        out.push(finish(name, &mut new_ps, report));
    }
    Ok(out)
}
