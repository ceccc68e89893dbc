//! Prior calibration for new classes and the decoupled inference router.
//!
//! The new branch never touches the adapters: it blends the frozen backbone
//! logits with the zero-shot prior logits using the backbone-reliability gate.

use rayon::prelude::*;

use crate::diffmath::{argmax, dot, softmax_temp, GradBuf, Mat, ParamSet};
use crate::error::{Error, Result};
use crate::fdc::BaseBranch;
use crate::gates::{GateCache, GateParams, IndicatorMask, Standardizer, TrustMode, TrustScore};
use crate::indicators::{
    build_brg_stats, build_frg_stats, fg_shift_index, LogitBundle, NUM_INDICATORS,
};
use crate::losses::{combine, BatchLoss, Branch, Combined, TermInput, WeightedTerm};

/// `(1 − b)·z_full + b·z_clip`.
pub fn blend(z_full: &[f64], z_clip: &[f64], b: f64) -> Result<Vec<f64>> {
    if z_full.len() != z_clip.len() {
        return Err(Error::shape(z_full.len(), z_clip.len(), "prior logits"));
    }
    Ok(z_full
        .iter()
        .zip(z_clip)
        .map(|(f, c)| (1.0 - b) * f + b * c)
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcOutput {
    pub b: TrustScore,
    pub z_pc: Vec<f64>,
    pub predicted_class: usize,
}

impl PcOutput {
    pub fn new(b: TrustScore, z_full: &[f64], z_clip: &[f64]) -> Result<Self> {
        let z_pc = blend(z_full, z_clip, b.value)?;
        let predicted_class = argmax(&z_pc);
        Ok(Self {
            b,
            z_pc,
            predicted_class,
        })
    }
}

/// One base-class sample used to fit the reliability gate.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSample {
    pub label: usize,
    pub z_full: Vec<f64>,
    pub z_clip: Vec<f64>,
    /// Raw `[H(p_full), H(p_clip), cos]`.
    pub brg_stats: [f64; NUM_INDICATORS],
}

impl PriorSample {
    pub fn new(label: usize, z_full: Vec<f64>, z_clip: Vec<f64>, tau_d: f64) -> Result<Self> {
        let bundle = LogitBundle::new(z_full, vec![0.0; z_clip.len()], Some(z_clip))?;
        let brg_stats = build_brg_stats(&bundle, tau_d)?.to_array();
        if label >= bundle.class_count() {
            return Err(Error::Domain(format!(
                "label {label} outside {} classes",
                bundle.class_count()
            )));
        }
        let LogitBundle { z_full, z_clip, .. } = bundle;
        Ok(Self {
            label,
            z_full,
            z_clip: z_clip.expect("set above"),
            brg_stats,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NewLayout {
    pub brg: GateParams,
    pub brg_norm: Standardizer,
    pub brg_mask: IndicatorMask,
}

impl NewLayout {
    pub fn gate_input(&self, raw: [f64; NUM_INDICATORS]) -> [f64; NUM_INDICATORS] {
        self.brg_mask.apply(self.brg_norm.apply(raw))
    }

    pub fn trust(&self, ps: &ParamSet, raw: [f64; NUM_INDICATORS]) -> Result<TrustScore> {
        self.brg.score(ps, &self.gate_input(raw))
    }
}

/// Trainable state of the new branch: only the reliability gate.
#[derive(Debug, Clone, PartialEq)]
pub struct NewBranch {
    pub params: ParamSet,
    pub layout: NewLayout,
}

impl NewBranch {
    pub fn calibrate(&self, z_full: &[f64], z_clip: &[f64], tau_d: f64) -> Result<PcOutput> {
        let bundle = LogitBundle::new(z_full.to_vec(), z_full.to_vec(), Some(z_clip.to_vec()))?;
        let stats = build_brg_stats(&bundle, tau_d)?.to_array();
        PcOutput::new(self.layout.trust(&self.params, stats)?, z_full, z_clip)
    }
}

/// The prior-calibration objective: CE on the blend plus KL to the prior.
#[derive(Debug, Clone)]
pub struct PcObjective {
    pub terms: Vec<WeightedTerm>,
    pub tau_d: f64,
    pub trust: TrustMode,
}

impl PcObjective {
    fn sample_pass(
        &self,
        ps: &ParamSet,
        layout: &NewLayout,
        s: &PriorSample,
    ) -> Result<(Combined, TrustScore, Option<GateCache>)> {
        let (b, cache) = match self.trust {
            TrustMode::Learned => {
                let (t, c) = layout.brg.forward(ps, &layout.gate_input(s.brg_stats))?;
                (t, Some(c))
            }
            TrustMode::Fixed(v) => (TrustMode::fixed_score(v)?, None),
        };
        let z_pc = blend(&s.z_full, &s.z_clip, b.value)?;
        let p_clip = softmax_temp(&s.z_clip, self.tau_d)?;
        let input = TermInput {
            label: s.label,
            tau_d: self.tau_d,
            logits: &z_pc,
            trust: b,
            r_star: 0,
            p_full: &[],
            p_fg: &[],
            p_clip: &p_clip,
        };
        let combined = combine(&self.terms, &input, false)?;
        if !combined.value.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite prior loss {}",
                combined.value
            )));
        }
        Ok((combined, b, cache))
    }

    /// Mean loss and gradient. Only gate parameters receive gradient.
    pub fn loss_and_grad(
        &self,
        ps: &ParamSet,
        layout: &NewLayout,
        batch: &[&PriorSample],
    ) -> Result<(BatchLoss, GradBuf)> {
        if batch.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let passes: Vec<(Combined, GradBuf)> = batch
            .par_iter()
            .map(|s| {
                let (c, b, cache) = self.sample_pass(ps, layout, s)?;
                let mut g = ps.zero_grad_buf();
                if let Some(cache) = cache {
                    let diff: Vec<f64> =
                        s.z_clip.iter().zip(&s.z_full).map(|(c, f)| c - f).collect();
                    let db = dot(&c.d_logits, &diff);
                    layout
                        .brg
                        .backward(ps, &cache, db * b.slope() + c.d_trust_logit, &mut g);
                }
                Ok((c, g))
            })
            .collect::<Result<_>>()?;
        let w = 1.0 / batch.len() as f64;
        let mut loss = BatchLoss::default();
        let mut total = ps.zero_grad_buf();
        for (c, g) in &passes {
            loss.push(c, w);
            total.add_scaled(g, w);
        }
        Ok((loss, total))
    }

    pub fn loss(
        &self,
        ps: &ParamSet,
        layout: &NewLayout,
        batch: &[&PriorSample],
    ) -> Result<BatchLoss> {
        if batch.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let w = 1.0 / batch.len() as f64;
        let mut loss = BatchLoss::default();
        for s in batch {
            loss.push(&self.sample_pass(ps, layout, s)?.0, w);
        }
        Ok(loss)
    }
}

/// Per-sample inputs to inference, restricted to the branch's classes.
#[derive(Debug, Clone, Copy)]
pub struct InferInput<'a> {
    pub feat_full: &'a [f64],
    pub feat_fg: &'a [f64],
    pub area_ratio: f64,
    pub z_full: &'a [f64],
    pub z_fg: &'a [f64],
    pub z_clip: Option<&'a [f64]>,
}

/// Which trained state handles a sample.
#[derive(Debug, Clone, Copy)]
pub enum Route<'a> {
    /// Compensated logits against `bank` (the branch's backbone class
    /// features).
    Fdc {
        branch: &'a BaseBranch,
        bank: &'a Mat,
    },
    /// Prior calibration; adapters are never consulted.
    Prior { branch: &'a NewBranch },
}

impl<'a> Route<'a> {
    /// Pick the route for `branch`. The base branch needs the adapters, the
    /// new branch needs the reliability gate.
    pub fn select(
        branch: Branch,
        base: Option<&'a BaseBranch>,
        new: Option<&'a NewBranch>,
        bank: &'a Mat,
    ) -> Result<Self> {
        match (branch, base, new) {
            (Branch::Base, Some(b), _) => Ok(Route::Fdc { branch: b, bank }),
            (Branch::New, _, Some(n)) => Ok(Route::Prior { branch: n }),
            (Branch::Base, None, _) => Err(Error::Config(
                "base branch requires adapter parameters".into(),
            )),
            (Branch::New, _, None) => Err(Error::Config(
                "new branch requires reliability-gate parameters".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Inference {
    pub predicted_class: usize,
    /// `r` on the adapter route, `b` on the prior route.
    pub trust: f64,
    /// Shift index of the logits actually used for prediction.
    pub d_fg: f64,
}

pub fn infer(
    input: &InferInput<'_>,
    route: Route<'_>,
    scale: f64,
    tau_d: f64,
) -> Result<Inference> {
    match route {
        Route::Fdc { branch, bank } => {
            let comp = branch.compensated(input.feat_full, bank, scale, tau_d)?;
            let fg = branch.compensated(input.feat_fg, bank, scale, tau_d)?;
            let bundle = LogitBundle::new(input.z_full.to_vec(), input.z_fg.to_vec(), None)?;
            let stats = build_frg_stats(&bundle, input.area_ratio, tau_d)?.to_array();
            Ok(Inference {
                predicted_class: argmax(&comp.z_fdc),
                trust: branch.layout.trust(&branch.params, stats)?.value,
                d_fg: fg_shift_index(&comp.z_fdc, &fg.z_fdc, tau_d)?,
            })
        }
        Route::Prior { branch } => {
            let z_clip = input
                .z_clip
                .ok_or_else(|| Error::Config("new branch requires prior logits".into()))?;
            let out = branch.calibrate(input.z_full, z_clip, tau_d)?;
            Ok(Inference {
                predicted_class: out.predicted_class,
                trust: out.b.value,
                d_fg: fg_shift_index(input.z_full, input.z_fg, tau_d)?,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::{cross_entropy, grad_check, l2_normalize, DEFAULT_STEP};
    use crate::fdc::{AdapterParams, BaseLayout};
    use crate::gates::GateDepth;
    use crate::indicators::backbone_logits;
    use crate::losses::{active_terms, LossRegistry, LossToggles, PC_CE, PC_KL};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    const TAU: f64 = 2.0;

    fn new_branch(seed: u64, depth: GateDepth, hidden: usize) -> NewBranch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let brg = GateParams::register(&mut params, "brg", depth, hidden, &mut rng).unwrap();
        NewBranch {
            params,
            layout: NewLayout {
                brg,
                brg_norm: Standardizer::identity(),
                brg_mask: IndicatorMask::default(),
            },
        }
    }

    fn objective(toggles: &LossToggles) -> PcObjective {
        PcObjective {
            terms: active_terms(&LossRegistry::builtin(), toggles, Branch::New, 10.0),
            tau_d: TAU,
            trust: TrustMode::Learned,
        }
    }

    fn randomize(ps: &mut ParamSet, seed: u64, amp: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<_> = ps.ids().collect();
        for id in ids {
            for x in ps.value_mut(id).as_mut_slice() {
                *x = rng.random_range(-amp..amp);
            }
        }
    }

    fn random_samples(seed: u64, n: usize, c: usize, amp: f64) -> Vec<PriorSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let zf: Vec<f64> = (0..c).map(|_| amp * rng.random_range(-1.0..1.0)).collect();
                let zc: Vec<f64> = (0..c).map(|_| amp * rng.random_range(-1.0..1.0)).collect();
                PriorSample::new(i % c, zf, zc, TAU).unwrap()
            })
            .collect()
    }

    #[test]
    fn blend_examples() {
        assert_eq!(
            blend(&[1.0, 3.0], &[3.0, 1.0], 0.5).unwrap(),
            vec![2.0, 2.0]
        );
        let z = [0.3, -2.0, 7.5];
        assert_eq!(blend(&z, &z, 0.37).unwrap(), z.to_vec());
        let out = blend(&[1.0, 3.0], &[3.0, 1.0], 1e-9).unwrap();
        assert!((out[0] - 1.0).abs() <= 1e-8 && (out[1] - 3.0).abs() <= 1e-8);
        assert!(matches!(
            blend(&[1.0], &[1.0, 2.0], 0.5),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn pc_loss_examples() {
        let all = LossToggles::all_on();
        let obj = objective(&all);
        let b = new_branch(1, GateDepth::Two, 8);
        // identical logits: KL vanishes whatever b is, leaving CE(z_full)
        let s = PriorSample::new(1, vec![0.5, 2.0, -1.0], vec![0.5, 2.0, -1.0], TAU).unwrap();
        let loss = obj.loss(&b.params, &b.layout, &[&s]).unwrap();
        assert!((loss.per_term[PC_KL]).abs() < 1e-12);
        assert!((loss.value - cross_entropy(&s.z_full, 1, TAU).unwrap()).abs() < 1e-12);

        // b = 1 and a confident, correct prior: both terms vanish
        let fixed = PcObjective {
            trust: TrustMode::Fixed(1.0),
            ..obj.clone()
        };
        let s = PriorSample::new(0, vec![0.0, 5.0, 1.0], vec![200.0, 0.0, 0.0], TAU).unwrap();
        let loss = fixed.loss(&b.params, &b.layout, &[&s]).unwrap();
        assert!(loss.value < 1e-12, "{}", loss.value);
    }

    #[test]
    fn kl_vanishes_under_constant_shift() {
        let obj = PcObjective {
            trust: TrustMode::Fixed(0.3),
            ..objective(&LossToggles::all_on())
        };
        let b = new_branch(0, GateDepth::Two, 8);
        let zc = vec![1.0, -0.5, 2.0];
        let zf: Vec<f64> = zc.iter().map(|z| z + 4.0).collect();
        let s = PriorSample::new(0, zf, zc, TAU).unwrap();
        assert!(obj.loss(&b.params, &b.layout, &[&s]).unwrap().per_term[PC_KL].abs() < 1e-12);
    }

    #[test]
    fn missing_prior_is_config_error() {
        let b = new_branch(0, GateDepth::Two, 8);
        let input = InferInput {
            feat_full: &[1.0, 0.0],
            feat_fg: &[1.0, 0.0],
            area_ratio: 0.5,
            z_full: &[1.0, 0.0],
            z_fg: &[1.0, 0.0],
            z_clip: None,
        };
        assert!(matches!(
            infer(&input, Route::Prior { branch: &b }, 100.0, TAU),
            Err(Error::Config(_))
        ));
        let bank = Mat::zeros(2, 2);
        assert!(matches!(
            Route::select(Branch::Base, None, Some(&b), &bank),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            Route::select(Branch::New, None, None, &bank),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn pc_gradient_matches_finite_differences() {
        let reg = LossRegistry::builtin();
        for (k, toggles) in [
            LossToggles::all_on(),
            LossToggles::only(&[PC_CE], &reg),
            LossToggles::only(&[PC_KL], &reg),
        ]
        .iter()
        .enumerate()
        {
            for depth in [GateDepth::One, GateDepth::Two, GateDepth::Three] {
                let mut b = new_branch(k as u64, depth, 6);
                randomize(&mut b.params, 10 + k as u64, 0.5);
                let data = random_samples(20 + k as u64, 5, 3, 4.0);
                let batch: Vec<&PriorSample> = data.iter().collect();
                let obj = objective(toggles);
                let (_, g) = obj.loss_and_grad(&b.params, &b.layout, &batch).unwrap();
                b.params.accumulate(&g, 1.0);
                let layout = b.layout.clone();
                let r = grad_check(
                    |ps| Ok(obj.loss(ps, &layout, &batch)?.value),
                    &mut b.params,
                    DEFAULT_STEP,
                )
                .unwrap();
                assert!(r.passes(1e-3), "{r:?}");
            }
        }
    }

    #[test]
    fn both_terms_off_gives_zero_gradient() {
        let mut t = LossToggles::all_on();
        t.disable(PC_CE);
        t.disable(PC_KL);
        let b = new_branch(3, GateDepth::Two, 8);
        let data = random_samples(4, 4, 3, 3.0);
        let batch: Vec<&PriorSample> = data.iter().collect();
        let (loss, g) = objective(&t)
            .loss_and_grad(&b.params, &b.layout, &batch)
            .unwrap();
        assert_eq!(loss.value, 0.0);
        assert!(g.iter().all(|m| m.as_slice().iter().all(|&x| x == 0.0)));
    }

    fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        l2_normalize(&v).unwrap()
    }

    #[test]
    fn new_route_ignores_adapter_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 12;
        let bank = Mat::from_vec(4, d, (0..4).flat_map(|_| unit(&mut rng, d)).collect()).unwrap();
        let mut ps = ParamSet::new();
        let adapter = AdapterParams::register(&mut ps, d, 4, true, &mut rng).unwrap();
        let frg = GateParams::register(&mut ps, "frg", GateDepth::Two, 8, &mut rng).unwrap();
        let mut base = BaseBranch {
            params: ps,
            layout: BaseLayout {
                adapter,
                frg,
                frg_norm: Standardizer::identity(),
                frg_mask: IndicatorMask::default(),
            },
        };
        let mut newb = new_branch(6, GateDepth::Two, 8);
        randomize(&mut newb.params, 7, 0.5);

        let full = unit(&mut rng, d);
        let fg = unit(&mut rng, d);
        let z_full = backbone_logits(&full, &bank, 100.0).unwrap();
        let z_fg = backbone_logits(&fg, &bank, 100.0).unwrap();
        let z_clip: Vec<f64> = (0..4).map(|_| rng.random_range(-20.0..20.0)).collect();
        let input = InferInput {
            feat_full: &full,
            feat_fg: &fg,
            area_ratio: 0.4,
            z_full: &z_full,
            z_fg: &z_fg,
            z_clip: Some(&z_clip),
        };
        let reference = infer(
            &input,
            Route::select(Branch::New, Some(&base), Some(&newb), &bank).unwrap(),
            100.0,
            TAU,
        )
        .unwrap();
        let zero_adapter = infer(
            &input,
            Route::Fdc {
                branch: &base,
                bank: &bank,
            },
            100.0,
            TAU,
        )
        .unwrap();
        assert_eq!(zero_adapter.predicted_class, argmax(&z_full));
        for k in 0..100 {
            randomize(&mut base.params, 100 + k, 1.0);
            let out = infer(
                &input,
                Route::select(Branch::New, Some(&base), Some(&newb), &bank).unwrap(),
                100.0,
                TAU,
            )
            .unwrap();
            assert_eq!(out, reference);
        }
    }

    proptest! {
        #[test]
        fn argmax_follows_blend_boundaries(
            zf in prop::collection::vec(-10.0f64..10.0, 2..12),
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let zc: Vec<f64> = (0..zf.len()).map(|_| rng.random_range(-10.0..10.0)).collect();
            let lo = TrustScore { value: 1e-9, logit: (1e-9f64).ln() };
            let hi = TrustScore { value: 1.0 - 1e-9, logit: -(1e-9f64).ln() };
            prop_assert_eq!(PcOutput::new(lo, &zf, &zc).unwrap().predicted_class, argmax(&zf));
            prop_assert_eq!(PcOutput::new(hi, &zf, &zc).unwrap().predicted_class, argmax(&zc));
        }

        #[test]
        fn blend_is_convex(
            zf in prop::collection::vec(-50.0f64..50.0, 1..16),
            b in 0.0f64..1.0,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let zc: Vec<f64> = (0..zf.len()).map(|_| rng.random_range(-50.0..50.0)).collect();
            for ((o, f), c) in blend(&zf, &zc, b).unwrap().iter().zip(&zf).zip(&zc) {
                prop_assert!(*o >= f.min(*c) - 1e-12 && *o <= f.max(*c) + 1e-12);
            }
        }
    }

    /// Logit-level set: the prior is confident and right on some samples and
    /// diffuse and wrong on the rest; the backbone is the opposite.
    fn reliability_set(seed: u64, n: usize, c: usize) -> Vec<PriorSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = i % c;
                let wrong = (label + 1 + rng.random_range(0..c - 1)) % c;
                let noise = |rng: &mut ChaCha8Rng| -> Vec<f64> {
                    (0..c).map(|_| rng.random_range(-1.0..1.0)).collect()
                };
                let mut zf = noise(&mut rng);
                let mut zc = noise(&mut rng);
                if i % 2 == 0 {
                    zc[label] += 12.0;
                    zf[wrong] += 2.0;
                } else {
                    zc[wrong] += 1.5;
                    zf[label] += 6.0;
                }
                PriorSample::new(label, zf, zc, TAU).unwrap()
            })
            .collect()
    }

    fn train(branch: &mut NewBranch, data: &[PriorSample], epochs: usize, lr: f64) {
        let obj = objective(&LossToggles::all_on());
        let rows: Vec<_> = data.iter().map(|s| s.brg_stats).collect();
        branch.layout.brg_norm = Standardizer::fit(&rows);
        for _ in 0..epochs {
            for chunk in data.chunks(4) {
                let batch: Vec<&PriorSample> = chunk.iter().collect();
                let (_, g) = obj
                    .loss_and_grad(&branch.params, &branch.layout, &batch)
                    .unwrap();
                branch.params.accumulate(&g, 1.0);
                crate::diffmath::sgd_step(&mut branch.params, lr).unwrap();
            }
        }
    }

    #[test]
    fn trained_gate_trusts_confident_prior_more() {
        let data = reliability_set(11, 200, 5);
        let mut b = new_branch(12, GateDepth::Two, 32);
        train(&mut b, &data, 10, 0.0035);
        let (mut low, mut high) = (Vec::new(), Vec::new());
        for s in &data {
            let t = b.layout.trust(&b.params, s.brg_stats).unwrap().value;
            if s.brg_stats[1] < 0.5 {
                low.push(t)
            } else {
                high.push(t)
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(!low.is_empty() && !high.is_empty());
        assert!(
            mean(&low) > mean(&high),
            "{} vs {}",
            mean(&low),
            mean(&high)
        );
    }

    #[test]
    fn trained_gate_matches_prior_only_when_prior_is_right() {
        // new classes: prior correct and confident, backbone wrong
        let c = 5;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let test: Vec<PriorSample> = (0..100)
            .map(|i| {
                let label = i % c;
                let mut zf: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
                let mut zc: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
                zf[(label + 1) % c] += 3.0;
                zc[label] += 10.0;
                PriorSample::new(label, zf, zc, TAU).unwrap()
            })
            .collect();
        let mut b = new_branch(22, GateDepth::Two, 32);
        train(&mut b, &reliability_set(23, 200, c), 10, 0.0035);
        let acc = |pick: &dyn Fn(&PriorSample) -> usize| {
            test.iter().filter(|s| pick(s) == s.label).count() as f64 / test.len() as f64
        };
        let trained = acc(&|s| {
            b.calibrate(&s.z_full, &s.z_clip, TAU)
                .unwrap()
                .predicted_class
        });
        let prior_only = acc(&|s| argmax(&s.z_clip));
        assert!(trained >= prior_only - 0.01, "{trained} vs {prior_only}");
    }
}
