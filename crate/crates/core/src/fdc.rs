//! Foreground distillation compensation.
//!
//! Residual bottleneck adapters re-project the frozen image and class-text
//! features; the resulting logits are trained with cross-entropy plus a
//! trust-weighted distillation toward the foreground-view prediction.

use rand::Rng;
use rayon::prelude::*;

use crate::diffmath::{
    kl_div, l2_normalize, l2_normalize_backward, norm, relu, softmax_temp, GradBuf, Mat, ParamId,
    ParamSet,
};
use crate::error::{Error, Result};
use crate::gates::{GateCache, GateParams, IndicatorMask, Standardizer, TrustMode, TrustScore};
use crate::indicators::NUM_INDICATORS;
use crate::losses::{combine, BatchLoss, Combined, TermInput, WeightedTerm};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSide {
    Visual,
    Textual,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Bottleneck {
    w_down: ParamId,
    b_down: ParamId,
    w_up: ParamId,
    b_up: ParamId,
}

/// Layout of the visual and (optional) textual adapters in a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    dim: usize,
    bottleneck: usize,
    visual: Bottleneck,
    textual: Option<Bottleneck>,
}

/// Intermediate values of one adapter application.
#[derive(Debug, Clone)]
pub struct AdaptCache {
    input: Vec<f64>,
    pre: Vec<f64>,
    hidden: Vec<f64>,
    out: Vec<f64>,
    sum_norm: f64,
}

fn side_prefix(side: FeatureSide) -> &'static str {
    match side {
        FeatureSide::Visual => "adapter.visual",
        FeatureSide::Textual => "adapter.textual",
    }
}

impl AdapterParams {
    pub fn param_count(dim: usize, bottleneck: usize, textual: bool) -> usize {
        let one = bottleneck * dim + bottleneck + dim * bottleneck + dim;
        if textual {
            2 * one
        } else {
            one
        }
    }

    /// Down-projection uniform in `±1/sqrt(dim)`, up-projection zero, so a
    /// fresh adapter is an exact residual identity.
    pub fn register<R: Rng>(
        ps: &mut ParamSet,
        dim: usize,
        bottleneck: usize,
        textual: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if bottleneck == 0 || bottleneck >= dim {
            return Err(Error::Config(format!(
                "adapter bottleneck {bottleneck} must be in 1..{dim} (smaller than the feature dimension)"
            )));
        }
        let bound = 1.0 / (dim as f64).sqrt();
        let mut make = |side: FeatureSide, rng: &mut R| {
            let p = side_prefix(side);
            Bottleneck {
                w_down: ps.register(
                    format!("{p}.w_down"),
                    Mat::from_fn(bottleneck, dim, |_, _| rng.random_range(-bound..bound)),
                ),
                b_down: ps.register(
                    format!("{p}.b_down"),
                    Mat::from_fn(bottleneck, 1, |_, _| rng.random_range(-bound..bound)),
                ),
                w_up: ps.register(format!("{p}.w_up"), Mat::zeros(dim, bottleneck)),
                b_up: ps.register(format!("{p}.b_up"), Mat::zeros(dim, 1)),
            }
        };
        let visual = make(FeatureSide::Visual, rng);
        let textual = textual.then(|| make(FeatureSide::Textual, rng));
        Ok(Self {
            dim,
            bottleneck,
            visual,
            textual,
        })
    }

    pub fn attach(ps: &ParamSet, dim: usize, bottleneck: usize, textual: bool) -> Result<Self> {
        let find = |side: FeatureSide| -> Result<Bottleneck> {
            let p = side_prefix(side);
            let get = |suffix: &str, rows: usize, cols: usize| -> Result<ParamId> {
                let name = format!("{p}.{suffix}");
                let id = ps
                    .id(&name)
                    .ok_or_else(|| Error::Config(format!("missing adapter parameter `{name}`")))?;
                let v = ps.value(id);
                if (v.rows(), v.cols()) != (rows, cols) {
                    return Err(Error::Shape(format!(
                        "`{name}` is {}x{}, expected {rows}x{cols}",
                        v.rows(),
                        v.cols()
                    )));
                }
                Ok(id)
            };
            Ok(Bottleneck {
                w_down: get("w_down", bottleneck, dim)?,
                b_down: get("b_down", bottleneck, 1)?,
                w_up: get("w_up", dim, bottleneck)?,
                b_up: get("b_up", dim, 1)?,
            })
        };
        Ok(Self {
            dim,
            bottleneck,
            visual: find(FeatureSide::Visual)?,
            textual: if textual {
                Some(find(FeatureSide::Textual)?)
            } else {
                None
            },
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bottleneck(&self) -> usize {
        self.bottleneck
    }

    pub fn has_textual(&self) -> bool {
        self.textual.is_some()
    }

    fn side(&self, side: FeatureSide) -> Option<&Bottleneck> {
        match side {
            FeatureSide::Visual => Some(&self.visual),
            FeatureSide::Textual => self.textual.as_ref(),
        }
    }

    /// `normalize(x + W_up·relu(W_down·x + b_down) + b_up)`; a disabled side
    /// reduces to `normalize(x)`.
    pub fn adapt(&self, ps: &ParamSet, feat: &[f64], side: FeatureSide) -> Result<Vec<f64>> {
        Ok(self.adapt_with_cache(ps, feat, side)?.0)
    }

    pub fn adapt_with_cache(
        &self,
        ps: &ParamSet,
        feat: &[f64],
        side: FeatureSide,
    ) -> Result<(Vec<f64>, AdaptCache)> {
        if feat.len() != self.dim {
            return Err(Error::shape(self.dim, feat.len(), "adapter input"));
        }
        let (sum, pre, hidden) = match self.side(side) {
            Some(bn) => {
                let mut pre = ps.value(bn.w_down).matvec(feat)?;
                for (p, b) in pre.iter_mut().zip(ps.value(bn.b_down).as_slice()) {
                    *p += b;
                }
                let hidden: Vec<f64> = pre.iter().copied().map(relu).collect();
                let up = ps.value(bn.w_up).matvec(&hidden)?;
                let sum: Vec<f64> = feat
                    .iter()
                    .zip(&up)
                    .zip(ps.value(bn.b_up).as_slice())
                    .map(|((x, u), b)| x + u + b)
                    .collect();
                (sum, pre, hidden)
            }
            None => (feat.to_vec(), Vec::new(), Vec::new()),
        };
        let sum_norm = norm(&sum);
        let out = l2_normalize(&sum)?;
        Ok((
            out.clone(),
            AdaptCache {
                input: feat.to_vec(),
                pre,
                hidden,
                out,
                sum_norm,
            },
        ))
    }

    /// Accumulate parameter gradients given `dL/d(adapted feature)`. Input
    /// features are frozen, so no input gradient is produced.
    pub fn backward(
        &self,
        ps: &ParamSet,
        side: FeatureSide,
        cache: &AdaptCache,
        d_out: &[f64],
        grads: &mut GradBuf,
    ) {
        let Some(bn) = self.side(side) else {
            return;
        };
        let d_sum = l2_normalize_backward(&cache.out, cache.sum_norm, d_out);
        grads.get_mut(bn.w_up).add_outer(&d_sum, &cache.hidden, 1.0);
        grads
            .get_mut(bn.b_up)
            .add_scaled(&Mat::column(d_sum.clone()), 1.0);
        let d_hidden = ps
            .value(bn.w_up)
            .matvec_t(&d_sum)
            .expect("cached widths match");
        let d_pre: Vec<f64> = d_hidden
            .into_iter()
            .zip(&cache.pre)
            .map(|(g, &p)| if p > 0.0 { g } else { 0.0 })
            .collect();
        grads
            .get_mut(bn.w_down)
            .add_outer(&d_pre, &cache.input, 1.0);
        grads
            .get_mut(bn.b_down)
            .add_scaled(&Mat::column(d_pre), 1.0);
    }

    /// Adapt every row of a class bank.
    pub fn adapt_bank(&self, ps: &ParamSet, bank: &Mat) -> Result<(Mat, Vec<AdaptCache>)> {
        let mut data = Vec::with_capacity(bank.len());
        let mut caches = Vec::with_capacity(bank.rows());
        for c in 0..bank.rows() {
            let (v, cache) = self.adapt_with_cache(ps, bank.row(c), FeatureSide::Textual)?;
            data.extend_from_slice(&v);
            caches.push(cache);
        }
        Ok((Mat::from_vec(bank.rows(), bank.cols(), data)?, caches))
    }
}

/// Logits and distribution of the compensated features.
#[derive(Debug, Clone, PartialEq)]
pub struct CompensatedLogits {
    pub z_fdc: Vec<f64>,
    pub p_fdc: Vec<f64>,
}

/// `z[c] = scale·⟨adapt(img), adapt(text_c)⟩`, `p = softmax(z / tau_d)`.
pub fn fdc_logits(
    img_feat: &[f64],
    class_feats: &Mat,
    adapter: &AdapterParams,
    ps: &ParamSet,
    scale: f64,
    tau_d: f64,
) -> Result<CompensatedLogits> {
    let (text, _) = adapter.adapt_bank(ps, class_feats)?;
    logits_from_adapted(
        adapter.adapt(ps, img_feat, FeatureSide::Visual)?.as_slice(),
        &text,
        scale,
        tau_d,
    )
}

fn logits_from_adapted(
    img: &[f64],
    text: &Mat,
    scale: f64,
    tau_d: f64,
) -> Result<CompensatedLogits> {
    let z_fdc: Vec<f64> = text.matvec(img)?.into_iter().map(|v| scale * v).collect();
    let p_fdc = softmax_temp(&z_fdc, tau_d)?;
    Ok(CompensatedLogits { z_fdc, p_fdc })
}

/// `r·KL(p_fg ‖ p_fdc) + (1−r)·KL(p_full ‖ p_fdc)`.
pub fn distill_loss(r: f64, p_fg: &[f64], p_full: &[f64], p_fdc: &[f64]) -> Result<f64> {
    if p_fg.len() != p_fdc.len() || p_full.len() != p_fdc.len() {
        return Err(Error::Shape(
            "distillation distributions differ in length".into(),
        ));
    }
    Ok(r * kl_div(p_fg, p_fdc)? + (1.0 - r) * kl_div(p_full, p_fdc)?)
}

/// One base-class training sample with its frozen backbone quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseSample {
    /// Unit-norm full-image feature.
    pub feat_full: Vec<f64>,
    /// Label as an index into the branch's class bank.
    pub label: usize,
    pub z_full: Vec<f64>,
    pub z_fg: Vec<f64>,
    /// Raw `[ΔH, cos, area]` before standardization.
    pub frg_stats: [f64; NUM_INDICATORS],
    pub r_star: u8,
}

/// Everything besides parameter values that the base branch needs.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseLayout {
    pub adapter: AdapterParams,
    pub frg: GateParams,
    pub frg_norm: Standardizer,
    pub frg_mask: IndicatorMask,
}

impl BaseLayout {
    pub fn gate_input(&self, raw: [f64; NUM_INDICATORS]) -> [f64; NUM_INDICATORS] {
        self.frg_mask.apply(self.frg_norm.apply(raw))
    }

    pub fn trust(&self, ps: &ParamSet, raw: [f64; NUM_INDICATORS]) -> Result<TrustScore> {
        self.frg.score(ps, &self.gate_input(raw))
    }
}

/// Trainable state of the base branch: adapters plus the foreground gate.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseBranch {
    pub params: ParamSet,
    pub layout: BaseLayout,
}

impl BaseBranch {
    pub fn num_trainable(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn compensated(
        &self,
        img: &[f64],
        bank: &Mat,
        scale: f64,
        tau_d: f64,
    ) -> Result<CompensatedLogits> {
        fdc_logits(img, bank, &self.layout.adapter, &self.params, scale, tau_d)
    }
}

/// The base-branch objective over the enabled loss terms.
#[derive(Debug, Clone)]
pub struct BaseObjective {
    pub terms: Vec<WeightedTerm>,
    pub tau_d: f64,
    pub scale: f64,
    pub trust: TrustMode,
    pub stop_grad_trust: bool,
}

struct SamplePass {
    combined: Combined,
    grads: Option<(GradBuf, Mat)>,
}

impl BaseObjective {
    fn trust_of(
        &self,
        ps: &ParamSet,
        layout: &BaseLayout,
        s: &BaseSample,
    ) -> Result<(TrustScore, Option<GateCache>)> {
        match self.trust {
            TrustMode::Learned => {
                let (t, cache) = layout.frg.forward(ps, &layout.gate_input(s.frg_stats))?;
                Ok((t, Some(cache)))
            }
            TrustMode::Fixed(v) => Ok((TrustMode::fixed_score(v)?, None)),
        }
    }

    fn sample_pass(
        &self,
        ps: &ParamSet,
        layout: &BaseLayout,
        text: &Mat,
        s: &BaseSample,
        want_grad: bool,
    ) -> Result<SamplePass> {
        let (img, vcache) =
            layout
                .adapter
                .adapt_with_cache(ps, &s.feat_full, FeatureSide::Visual)?;
        let comp = logits_from_adapted(&img, text, self.scale, self.tau_d)?;
        let (trust, gcache) = self.trust_of(ps, layout, s)?;
        let p_full = softmax_temp(&s.z_full, self.tau_d)?;
        let p_fg = softmax_temp(&s.z_fg, self.tau_d)?;
        let input = TermInput {
            label: s.label,
            tau_d: self.tau_d,
            logits: &comp.z_fdc,
            trust,
            r_star: s.r_star,
            p_full: &p_full,
            p_fg: &p_fg,
            p_clip: &[],
        };
        let combined = combine(&self.terms, &input, self.stop_grad_trust)?;
        if !combined.value.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite base loss {}",
                combined.value
            )));
        }
        if !want_grad {
            return Ok(SamplePass {
                combined,
                grads: None,
            });
        }

        let mut grads = ps.zero_grad_buf();
        let mut d_text = Mat::zeros(text.rows(), text.cols());
        let mut d_img = vec![0.0; img.len()];
        for (c, &dz) in combined.d_logits.iter().enumerate() {
            if dz == 0.0 {
                continue;
            }
            let k = self.scale * dz;
            for (di, ti) in d_img.iter_mut().zip(text.row(c)) {
                *di += k * ti;
            }
            d_text.add_outer(&crate::diffmath::onehot(c, text.rows()), &img, k);
        }
        layout
            .adapter
            .backward(ps, FeatureSide::Visual, &vcache, &d_img, &mut grads);
        if let Some(gc) = gcache {
            layout
                .frg
                .backward(ps, &gc, combined.d_trust_logit, &mut grads);
        }
        Ok(SamplePass {
            combined,
            grads: Some((grads, d_text)),
        })
    }

    /// Mean batch loss and its gradient with respect to every parameter in
    /// `ps`. Samples are processed in parallel and reduced in index order.
    pub fn loss_and_grad(
        &self,
        ps: &ParamSet,
        layout: &BaseLayout,
        bank: &Mat,
        batch: &[&BaseSample],
    ) -> Result<(BatchLoss, GradBuf)> {
        if batch.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let (text, tcaches) = layout.adapter.adapt_bank(ps, bank)?;
        let passes: Vec<SamplePass> = batch
            .par_iter()
            .map(|s| self.sample_pass(ps, layout, &text, s, true))
            .collect::<Result<_>>()?;
        let w = 1.0 / batch.len() as f64;
        let mut loss = BatchLoss::default();
        let mut total = ps.zero_grad_buf();
        let mut d_text = Mat::zeros(text.rows(), text.cols());
        for pass in &passes {
            loss.push(&pass.combined, w);
            let (g, dt) = pass.grads.as_ref().expect("requested gradients");
            total.add_scaled(g, w);
            d_text.add_scaled(dt, w);
        }
        if layout.adapter.has_textual() {
            for (c, cache) in tcaches.iter().enumerate() {
                layout
                    .adapter
                    .backward(ps, FeatureSide::Textual, cache, d_text.row(c), &mut total);
            }
        }
        Ok((loss, total))
    }

    /// Forward-only mean batch loss.
    pub fn loss(
        &self,
        ps: &ParamSet,
        layout: &BaseLayout,
        bank: &Mat,
        batch: &[&BaseSample],
    ) -> Result<BatchLoss> {
        if batch.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let (text, _) = layout.adapter.adapt_bank(ps, bank)?;
        let w = 1.0 / batch.len() as f64;
        let mut loss = BatchLoss::default();
        for s in batch {
            loss.push(&self.sample_pass(ps, layout, &text, s, false)?.combined, w);
        }
        Ok(loss)
    }
}
