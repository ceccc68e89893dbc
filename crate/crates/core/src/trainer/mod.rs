//! The two decoupled training loops, evaluation and checkpoints.

mod checkpoint;
mod gradsuite;
mod prepare;
mod report;

use std::f64::consts::PI;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{sgd_step, ParamSet};
use crate::error::{Error, Result};
use crate::fdc::{AdapterParams, BaseBranch, BaseLayout, BaseObjective};
use crate::gates::{GateDepth, GateParams, IndicatorMask, Standardizer, TrustMode};
use crate::indicators::NUM_INDICATORS;
use crate::losses::{
    active_terms, BatchLoss, Branch, LossRegistry, LossToggles, FRG, PC_CE, PC_KL,
};
use crate::pc::{infer, NewBranch, NewLayout, PcObjective, PriorSample, Route};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MANIFEST};
pub use gradsuite::{gradient_suite, GradEntry, GRAD_TOL, SUITE_CLASSES, SUITE_DIM};
pub use prepare::{EvalSample, Prepared};
pub use report::{apply_ablation, run_report, RunReport, ABLATIONS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from `lr` to 0 over the run.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub tau_d: f64,
    pub lambda_d: f64,
    pub dim_fdc: usize,
    pub dim_rg: usize,
    pub seed: u64,
    pub logit_scale: f64,
    pub toggles: LossToggles,
    pub textual_adapter: bool,
    pub frg_mask: IndicatorMask,
    pub brg_mask: IndicatorMask,
    pub gate_depth: GateDepth,
    /// Only the gate's own BCE reaches the foreground gate.
    pub stop_grad_trust: bool,
    /// Replace the foreground gate by a constant (its BCE term is dropped).
    pub fixed_r: Option<f64>,
    /// Replace the reliability gate by a constant.
    pub fixed_b: Option<f64>,
    pub lr_schedule: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.0035,
            epochs: 10,
            batch: 4,
            tau_d: 2.0,
            lambda_d: 10.0,
            dim_fdc: 64,
            dim_rg: 32,
            seed: 0,
            logit_scale: 100.0,
            toggles: LossToggles::all_on(),
            textual_adapter: true,
            frg_mask: IndicatorMask::default(),
            brg_mask: IndicatorMask::default(),
            gate_depth: GateDepth::Two,
            stop_grad_trust: false,
            fixed_r: None,
            fixed_b: None,
            lr_schedule: LrSchedule::Constant,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("tau_d", self.tau_d),
            ("logit_scale", self.logit_scale),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.lambda_d.is_finite() && self.lambda_d >= 0.0) {
            return Err(Error::Config(format!(
                "lambda_d must be non-negative, got {}",
                self.lambda_d
            )));
        }
        if self.batch == 0 || self.dim_fdc == 0 || self.dim_rg == 0 {
            return Err(Error::Config(
                "batch, dim_fdc and dim_rg must be positive".into(),
            ));
        }
        for v in [self.fixed_r, self.fixed_b].into_iter().flatten() {
            TrustMode::fixed_score(v)?;
        }
        LossRegistry::builtin().validate(&self.toggles)
    }

    /// Adapter width for feature dimension `dim`: `dim_fdc`, or `dim / 2`
    /// when `dim_fdc` would not be a bottleneck.
    pub fn bottleneck(&self, dim: usize) -> usize {
        if self.dim_fdc < dim {
            self.dim_fdc
        } else {
            (dim / 2).max(1)
        }
    }

    /// True when the new branch is calibrated by the prior; otherwise it
    /// falls back to compensated logits over the new classes.
    pub fn uses_prior(&self) -> bool {
        self.toggles.is_enabled(PC_CE) || self.toggles.is_enabled(PC_KL)
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let t = epoch as f64 / self.epochs.max(1) as f64;
                // keep the final epoch strictly positive
                (self.lr * 0.5 * (1.0 + (PI * t).cos())).max(self.lr * 1e-3)
            }
        }
    }

    /// Independent random streams per branch and purpose, so one branch's
    /// draws never depend on whether the other was trained.
    fn stream(&self, branch: Branch, purpose: Purpose) -> ChaCha8Rng {
        let b = match branch {
            Branch::Base => 0,
            Branch::New => 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(2 * b + purpose as u64);
        rng
    }
}

#[derive(Debug, Clone, Copy)]
enum Purpose {
    Init = 0,
    Shuffle = 1,
}

/// Mean loss of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub branch: Branch,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub terms: std::collections::BTreeMap<String, f64>,
}

impl EpochRecord {
    fn new(branch: Branch, epoch: usize, lr: f64, sum: &BatchLoss, batches: usize) -> Self {
        let k = 1.0 / batches.max(1) as f64;
        Self {
            branch,
            epoch,
            lr,
            loss: sum.value * k,
            terms: sum
                .per_term
                .iter()
                .map(|(n, v)| (n.to_string(), v * k))
                .collect(),
        }
    }
}

/// Result of one training loop. On divergence, `state` holds the last
/// parameters that produced a finite loss and `diverged` says why it
/// stopped.
#[derive(Debug, Clone)]
pub struct TrainRun<T> {
    pub state: T,
    pub history: Vec<EpochRecord>,
    pub epochs_done: usize,
    pub diverged: Option<String>,
}

/// Freshly initialised base branch; zero up-projections make it reproduce
/// the frozen backbone.
pub fn init_base(prep: &Prepared, cfg: &TrainConfig) -> Result<BaseBranch> {
    let mut rng = cfg.stream(Branch::Base, Purpose::Init);
    let mut params = ParamSet::new();
    let adapter = AdapterParams::register(
        &mut params,
        prep.dim,
        cfg.bottleneck(prep.dim),
        cfg.textual_adapter,
        &mut rng,
    )?;
    let frg = GateParams::register(&mut params, "frg", cfg.gate_depth, cfg.dim_rg, &mut rng)?;
    let rows: Vec<[f64; NUM_INDICATORS]> = prep.base_train.iter().map(|s| s.frg_stats).collect();
    Ok(BaseBranch {
        params,
        layout: BaseLayout {
            adapter,
            frg,
            frg_norm: Standardizer::fit(&rows),
            frg_mask: cfg.frg_mask,
        },
    })
}

pub fn init_new(prep: &Prepared, cfg: &TrainConfig) -> Result<NewBranch> {
    let mut rng = cfg.stream(Branch::New, Purpose::Init);
    let mut params = ParamSet::new();
    let brg = GateParams::register(&mut params, "brg", cfg.gate_depth, cfg.dim_rg, &mut rng)?;
    let rows: Vec<[f64; NUM_INDICATORS]> = prep.prior_train.iter().map(|s| s.brg_stats).collect();
    Ok(NewBranch {
        params,
        layout: NewLayout {
            brg,
            brg_norm: Standardizer::fit(&rows),
            brg_mask: cfg.brg_mask,
        },
    })
}

pub fn base_objective(cfg: &TrainConfig) -> BaseObjective {
    let mut toggles = cfg.toggles.clone();
    let trust = match cfg.fixed_r {
        Some(v) => {
            toggles.disable(FRG);
            TrustMode::Fixed(v)
        }
        None => TrustMode::Learned,
    };
    BaseObjective {
        terms: active_terms(
            &LossRegistry::builtin(),
            &toggles,
            Branch::Base,
            cfg.lambda_d,
        ),
        tau_d: cfg.tau_d,
        scale: cfg.logit_scale,
        trust,
        stop_grad_trust: cfg.stop_grad_trust,
    }
}

pub fn pc_objective(cfg: &TrainConfig) -> PcObjective {
    PcObjective {
        terms: active_terms(
            &LossRegistry::builtin(),
            &cfg.toggles,
            Branch::New,
            cfg.lambda_d,
        ),
        tau_d: cfg.tau_d,
        trust: cfg.fixed_b.map_or(TrustMode::Learned, TrustMode::Fixed),
    }
}

/// Seeded shuffled mini-batches over `0..n`.
fn epoch_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// Generic SGD loop; `step` returns the batch loss and gradient.
fn run_loop<T, F>(
    mut state: T,
    params: fn(&mut T) -> &mut ParamSet,
    n: usize,
    cfg: &TrainConfig,
    branch: Branch,
    rng: &mut ChaCha8Rng,
    step: F,
) -> Result<TrainRun<T>>
where
    F: Fn(&T, &[usize]) -> Result<(BatchLoss, crate::diffmath::GradBuf)>,
{
    let mut history = Vec::with_capacity(cfg.epochs);
    if n == 0 && cfg.epochs > 0 {
        return Err(Error::Config(format!(
            "no training samples for the {branch} branch"
        )));
    }
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut sum = BatchLoss::default();
        let batches = epoch_batches(n, cfg.batch, rng);
        for idx in &batches {
            let outcome = step(&state, idx).and_then(|(loss, grads)| {
                let ps = params(&mut state);
                ps.accumulate(&grads, 1.0);
                match sgd_step(ps, lr) {
                    Ok(()) => Ok(loss),
                    Err(e) => {
                        ps.zero_grad();
                        Err(e)
                    }
                }
            });
            match outcome {
                Ok(loss) => {
                    sum.value += loss.value;
                    for (k, v) in loss.per_term {
                        *sum.per_term.entry(k).or_insert(0.0) += v;
                    }
                }
                Err(Error::Diverged(msg)) => {
                    warn!("{branch} branch diverged in epoch {epoch}: {msg}");
                    return Ok(TrainRun {
                        state,
                        history,
                        epochs_done: epoch,
                        diverged: Some(msg),
                    });
                }
                Err(e) => return Err(e),
            }
        }
        let rec = EpochRecord::new(branch, epoch, lr, &sum, batches.len());
        info!("{branch} epoch {epoch}: loss {:.6}", rec.loss);
        history.push(rec);
    }
    Ok(TrainRun {
        state,
        history,
        epochs_done: cfg.epochs,
        diverged: None,
    })
}

/// Optimise adapters and the foreground gate on base-class training data.
pub fn train_base(prep: &Prepared, cfg: &TrainConfig) -> Result<TrainRun<BaseBranch>> {
    cfg.validate()?;
    let branch = init_base(prep, cfg)?;
    let obj = base_objective(cfg);
    debug!(
        "base terms: {:?}",
        obj.terms.iter().map(|t| t.term.name()).collect::<Vec<_>>()
    );
    let mut rng = cfg.stream(Branch::Base, Purpose::Shuffle);
    run_loop(
        branch,
        |b| &mut b.params,
        prep.base_train.len(),
        cfg,
        Branch::Base,
        &mut rng,
        |b, idx| {
            let batch: Vec<_> = idx.iter().map(|&i| &prep.base_train[i]).collect();
            obj.loss_and_grad(&b.params, &b.layout, &prep.base_bank, &batch)
        },
    )
}

/// Optimise the reliability gate alone. With both prior terms disabled
/// the gate is returned untouched.
pub fn train_pc(prep: &Prepared, cfg: &TrainConfig) -> Result<TrainRun<NewBranch>> {
    cfg.validate()?;
    let branch = init_new(prep, cfg)?;
    let obj = pc_objective(cfg);
    if obj.terms.is_empty() || cfg.fixed_b.is_some() {
        return Ok(TrainRun {
            state: branch,
            history: Vec::new(),
            epochs_done: 0,
            diverged: None,
        });
    }
    let mut rng = cfg.stream(Branch::New, Purpose::Shuffle);
    run_loop(
        branch,
        |b| &mut b.params,
        prep.prior_train.len(),
        cfg,
        Branch::New,
        &mut rng,
        |b, idx| {
            let batch: Vec<&PriorSample> = idx.iter().map(|&i| &prep.prior_train[i]).collect();
            obj.loss_and_grad(&b.params, &b.layout, &batch)
        },
    )
}

/// Fit a standalone foreground gate to `(stats, r*)` pairs with the BCE
/// term only. Returns the gate and its training accuracy.
pub fn fit_gate(
    rows: &[([f64; NUM_INDICATORS], u8)],
    cfg: &TrainConfig,
) -> Result<(ParamSet, GateParams, Standardizer, f64)> {
    cfg.validate()?;
    if rows.is_empty() {
        return Err(Error::Config("no gate supervision rows".into()));
    }
    let mut rng = cfg.stream(Branch::Base, Purpose::Init);
    let mut ps = ParamSet::new();
    let gate = GateParams::register(&mut ps, "frg", cfg.gate_depth, cfg.dim_rg, &mut rng)?;
    let stats: Vec<_> = rows.iter().map(|r| r.0).collect();
    let norm = Standardizer::fit(&stats);
    let input = |s: [f64; NUM_INDICATORS]| cfg.frg_mask.apply(norm.apply(s));
    let mut rng = cfg.stream(Branch::Base, Purpose::Shuffle);
    for epoch in 0..cfg.epochs {
        for idx in epoch_batches(rows.len(), cfg.batch, &mut rng) {
            let mut grads = ps.zero_grad_buf();
            let w = 1.0 / idx.len() as f64;
            for i in idx {
                let (t, cache) = gate.forward(&ps, &input(rows[i].0))?;
                let (_, dq) = crate::gates::frg_loss(t, rows[i].1);
                gate.backward(&ps, &cache, w * dq, &mut grads);
            }
            ps.accumulate(&grads, 1.0);
            sgd_step(&mut ps, cfg.lr_at(epoch))?;
        }
    }
    let mut correct = 0usize;
    for (s, t) in rows {
        let r = gate.score(&ps, &input(*s))?;
        correct += usize::from(u8::from(r.value > 0.5) == *t);
    }
    let acc = correct as f64 / rows.len() as f64;
    Ok((ps, gate, norm, acc))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchMetrics {
    pub branch: Branch,
    pub count: usize,
    pub accuracy: f64,
    pub mean_d_fg: f64,
    /// Mean `r` (base) or `b` (new; `r` when the prior is not used).
    pub mean_trust: f64,
}

/// `2ab / (a + b)`, 0 when both are 0.
pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

/// Accuracy and diagnostics on the eval records of one branch.
pub fn evaluate(
    prep: &Prepared,
    base: Option<&BaseBranch>,
    new: Option<&NewBranch>,
    cfg: &TrainConfig,
    branch: Branch,
) -> Result<BranchMetrics> {
    use rayon::prelude::*;

    let (samples, bank, route_branch) = match branch {
        Branch::Base => (&prep.eval_base, &prep.base_bank, Branch::Base),
        Branch::New if cfg.uses_prior() => (&prep.eval_new, &prep.new_bank, Branch::New),
        Branch::New => (&prep.eval_new, &prep.new_bank, Branch::Base),
    };
    if let Some(b) = base {
        if b.layout.adapter.dim() != prep.dim {
            return Err(Error::Config(format!(
                "checkpoint dimension {} does not match dataset dimension {}",
                b.layout.adapter.dim(),
                prep.dim
            )));
        }
    }
    let route = Route::select(route_branch, base, new, bank)?;
    let outs: Vec<_> = samples
        .par_iter()
        .map(|s| infer(&s.input(), route, cfg.logit_scale, cfg.tau_d).map(|o| (o, s.label)))
        .collect::<Result<_>>()?;
    let n = outs.len().max(1) as f64;
    Ok(BranchMetrics {
        branch,
        count: outs.len(),
        accuracy: outs.iter().filter(|(o, l)| o.predicted_class == *l).count() as f64 / n,
        mean_d_fg: outs.iter().map(|(o, _)| o.d_fg).sum::<f64>() / n,
        mean_trust: outs.iter().map(|(o, _)| o.trust).sum::<f64>() / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{synth_generate, Dataset, SynthConfig};
    use crate::losses::{FDC_CE, FDC_DIST};

    fn prep(seed: u64) -> (Dataset, Prepared) {
        let ds = synth_generate(&SynthConfig {
            eval_per_class: 10,
            shots: 8,
            ..SynthConfig::new(seed, 6, 16)
        })
        .unwrap();
        let cfg = TrainConfig::default();
        let p = Prepared::new(&ds, &cfg).unwrap();
        (ds, p)
    }

    #[test]
    fn harmonic_mean_examples() {
        assert!((harmonic_mean(0.8, 0.8) - 0.8).abs() < 1e-15);
        let hm = harmonic_mean(82.40, 73.62);
        assert!(
            (hm - 77.763).abs() < 1e-3 && (hm - 77.76).abs() < 5e-3,
            "{hm}"
        );
        assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = |f: fn(&mut TrainConfig)| {
            let mut c = TrainConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.lr = 0.0));
        assert!(bad(|c| c.batch = 0));
        assert!(bad(|c| c.tau_d = -1.0));
        assert!(bad(|c| c.lambda_d = f64::NAN));
        assert!(bad(|c| c.fixed_r = Some(1.2)));
        assert!(bad(|c| c.toggles.disable("bogus")));
        assert_eq!(TrainConfig::default().bottleneck(512), 64);
        assert_eq!(TrainConfig::default().bottleneck(64), 32);
    }

    #[test]
    fn zero_epochs_returns_initialisation() {
        let (_, p) = prep(1);
        let mut cfg = TrainConfig {
            epochs: 0,
            lambda_d: 0.0,
            ..TrainConfig::default()
        };
        cfg.toggles = LossToggles::only(&[FDC_CE], &LossRegistry::builtin());
        let run = train_base(&p, &cfg).unwrap();
        assert_eq!(run.state, init_base(&p, &cfg).unwrap());
        assert!(run.history.is_empty());
    }

    #[test]
    fn same_seed_same_history() {
        let (_, p) = prep(2);
        let cfg = TrainConfig {
            epochs: 2,
            seed: 5,
            ..TrainConfig::default()
        };
        let a = train_base(&p, &cfg).unwrap();
        let b = train_base(&p, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.state, b.state);
        assert!(a.history.iter().all(|h| h.loss.is_finite()));
        let other = train_base(&p, &TrainConfig { seed: 6, ..cfg }).unwrap();
        assert_ne!(a.history, other.history);
    }

    #[test]
    fn pc_without_terms_is_noop() {
        let (_, p) = prep(3);
        let mut cfg = TrainConfig::default();
        cfg.toggles.disable(PC_CE);
        cfg.toggles.disable(PC_KL);
        let run = train_pc(&p, &cfg).unwrap();
        assert_eq!(run.state, init_new(&p, &cfg).unwrap());
        assert!(!cfg.uses_prior());
    }

    #[test]
    fn pc_is_independent_of_base_training() {
        let (_, p) = prep(4);
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        let before = train_pc(&p, &cfg).unwrap().state;
        let _ = train_base(&p, &cfg).unwrap();
        let after = train_pc(&p, &cfg).unwrap().state;
        assert_eq!(before, after);
        assert_eq!(before.params.num_scalars(), GateDepth::Two.param_count(32));
    }

    #[test]
    fn registries_hold_exactly_their_branch() {
        let (_, p) = prep(5);
        let cfg = TrainConfig::default();
        let base = init_base(&p, &cfg).unwrap();
        assert!(base
            .params
            .names()
            .iter()
            .all(|n| n.starts_with("adapter.") || n.starts_with("frg.")));
        let new = init_new(&p, &cfg).unwrap();
        assert!(new.params.names().iter().all(|n| n.starts_with("brg.")));
        let no_text = init_base(
            &p,
            &TrainConfig {
                textual_adapter: false,
                ..cfg
            },
        )
        .unwrap();
        assert!(no_text
            .params
            .names()
            .iter()
            .all(|n| !n.starts_with("adapter.textual")));
    }

    #[test]
    fn fixed_trust_drops_gate_supervision() {
        let obj = base_objective(&TrainConfig {
            fixed_r: Some(0.5),
            ..TrainConfig::default()
        });
        let names: Vec<_> = obj.terms.iter().map(|t| t.term.name()).collect();
        assert_eq!(names, vec![FDC_CE, FDC_DIST]);
    }

    #[test]
    fn nan_input_stops_with_last_good_state() {
        let (_, mut p) = prep(6);
        let cfg = TrainConfig {
            epochs: 1,
            batch: 100,
            ..TrainConfig::default()
        };
        p.base_train[0].z_fg[0] = f64::NAN;
        let run = train_base(&p, &cfg).unwrap();
        assert!(run.diverged.is_some());
        assert_eq!(run.state, init_base(&p, &cfg).unwrap());
    }

    #[test]
    fn zero_adapters_evaluate_as_frozen_backbone() {
        let (_, p) = prep(7);
        let cfg = TrainConfig::default();
        let base = init_base(&p, &cfg).unwrap();
        let m = evaluate(&p, Some(&base), None, &cfg, Branch::Base).unwrap();
        let frozen = p
            .eval_base
            .iter()
            .filter(|s| crate::diffmath::argmax(&s.z_full) == s.label)
            .count() as f64
            / p.eval_base.len() as f64;
        assert_eq!(m.accuracy, frozen);
        assert!(m.mean_d_fg.is_finite());
        assert!(matches!(
            evaluate(&p, None, None, &cfg, Branch::New),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn cosine_schedule_decays() {
        let cfg = TrainConfig {
            lr_schedule: LrSchedule::Cosine,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(0), cfg.lr);
        assert!(cfg.lr_at(5) < cfg.lr && cfg.lr_at(9) > 0.0);
        assert_eq!(TrainConfig::default().lr_at(7), 0.0035);
    }
}
