//! Reliability gates: small perceptrons mapping three statistics to a trust
//! score in (0, 1).
//!
//! The same code backs the foreground gate (statistics from the full and
//! foreground views) and the prior gate (statistics from backbone and
//! zero-shot prior logits); the two never share parameters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{bce_with_logit, relu, sigmoid, GradBuf, Mat, ParamId, ParamSet};
use crate::error::{Error, Result};
use crate::indicators::NUM_INDICATORS;

/// Number of affine layers in a gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum GateDepth {
    /// One affine map `3 → 1`.
    One,
    /// `3 → hidden → 1` (default).
    Two,
    /// `3 → hidden → hidden → 1`.
    Three,
}

impl TryFrom<u8> for GateDepth {
    type Error = Error;

    fn try_from(layers: u8) -> Result<Self> {
        match layers {
            1 => Ok(GateDepth::One),
            2 => Ok(GateDepth::Two),
            3 => Ok(GateDepth::Three),
            n => Err(Error::Config(format!(
                "unsupported gate depth {n} (expected 1, 2 or 3)"
            ))),
        }
    }
}

impl From<GateDepth> for u8 {
    fn from(d: GateDepth) -> u8 {
        match d {
            GateDepth::One => 1,
            GateDepth::Two => 2,
            GateDepth::Three => 3,
        }
    }
}

impl GateDepth {
    /// Layer widths from input to the scalar head.
    pub fn widths(self, hidden: usize) -> Vec<usize> {
        match self {
            GateDepth::One => vec![NUM_INDICATORS, 1],
            GateDepth::Two => vec![NUM_INDICATORS, hidden, 1],
            GateDepth::Three => vec![NUM_INDICATORS, hidden, hidden, 1],
        }
    }

    pub fn param_count(self, hidden: usize) -> usize {
        self.widths(hidden)
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

/// Layout of one gate inside a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    depth: GateDepth,
    hidden: usize,
    layers: Vec<Dense>,
}

/// Gate output: `value = sigmoid(logit)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrustScore {
    pub value: f64,
    pub logit: f64,
}

impl TrustScore {
    /// The value is kept strictly inside (0, 1) even where `sigmoid` rounds
    /// to an endpoint in floating point.
    pub fn from_logit(logit: f64) -> Self {
        Self {
            value: sigmoid(logit).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON),
            logit,
        }
    }

    /// `d value / d logit`.
    pub fn slope(&self) -> f64 {
        self.value * (1.0 - self.value)
    }
}

/// Where a branch's trust score comes from.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrustMode {
    /// Output of the trainable gate.
    #[default]
    Learned,
    /// A constant in [0, 1]; the gate is bypassed and receives no gradient.
    Fixed(f64),
}

impl TrustMode {
    /// Exact constant score. Endpoints are allowed and give an infinite
    /// logit, so BCE on the score is undefined there.
    pub fn fixed_score(v: f64) -> Result<TrustScore> {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Config(format!(
                "fixed trust must lie in [0, 1], got {v}"
            )));
        }
        Ok(TrustScore {
            value: v,
            logit: (v / (1.0 - v)).ln(),
        })
    }
}

/// Activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct GateCache {
    /// Input to each layer (post-activation of the previous one).
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Vec<f64>>,
}

impl GateParams {
    /// Register a fresh gate under `prefix`. Hidden layers are drawn uniform in
    /// `±1/sqrt(fan_in)`; the scalar head starts at zero so the initial trust
    /// is exactly 0.5.
    pub fn register<R: Rng>(
        ps: &mut ParamSet,
        prefix: &str,
        depth: GateDepth,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::Config("gate hidden width must be positive".into()));
        }
        let widths = depth.widths(hidden);
        let last = widths.len() - 2;
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for (i, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let (w, b) = if i == last {
                (Mat::zeros(fan_out, fan_in), Mat::zeros(fan_out, 1))
            } else {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let w = Mat::from_fn(fan_out, fan_in, |_, _| rng.random_range(-bound..bound));
                let b = Mat::from_fn(fan_out, 1, |_, _| rng.random_range(-bound..bound));
                (w, b)
            };
            layers.push(Dense {
                w: ps.register(format!("{prefix}.l{i}.w"), w),
                b: ps.register(format!("{prefix}.l{i}.b"), b),
            });
        }
        Ok(Self {
            depth,
            hidden,
            layers,
        })
    }

    /// Rebuild the layout of a gate previously registered under `prefix`.
    pub fn attach(ps: &ParamSet, prefix: &str, depth: GateDepth, hidden: usize) -> Result<Self> {
        let widths = depth.widths(hidden);
        let mut layers = Vec::new();
        for (i, pair) in widths.windows(2).enumerate() {
            let find = |suffix: &str, rows: usize, cols: usize| -> Result<ParamId> {
                let name = format!("{prefix}.l{i}.{suffix}");
                let id = ps
                    .id(&name)
                    .ok_or_else(|| Error::Config(format!("missing gate parameter `{name}`")))?;
                let v = ps.value(id);
                if v.rows() != rows || v.cols() != cols {
                    return Err(Error::Shape(format!(
                        "`{name}` is {}x{}, expected {rows}x{cols}",
                        v.rows(),
                        v.cols()
                    )));
                }
                Ok(id)
            };
            layers.push(Dense {
                w: find("w", pair[1], pair[0])?,
                b: find("b", pair[1], 1)?,
            });
        }
        Ok(Self {
            depth,
            hidden,
            layers,
        })
    }

    pub fn depth(&self) -> GateDepth {
        self.depth
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn param_count(&self) -> usize {
        self.depth.param_count(self.hidden)
    }

    pub fn forward(&self, ps: &ParamSet, stats: &[f64]) -> Result<(TrustScore, GateCache)> {
        if stats.len() != NUM_INDICATORS {
            return Err(Error::shape(NUM_INDICATORS, stats.len(), "gate input"));
        }
        let mut cache = GateCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len() - 1),
        };
        let mut x = stats.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = ps.value(layer.w).matvec(&x)?;
            for (yi, bi) in y.iter_mut().zip(ps.value(layer.b).as_slice()) {
                *yi += bi;
            }
            cache.inputs.push(x);
            if i == last {
                return Ok((TrustScore::from_logit(y[0]), cache));
            }
            x = y.iter().copied().map(relu).collect();
            cache.pre.push(y);
        }
        unreachable!("gate has at least one layer")
    }

    pub fn score(&self, ps: &ParamSet, stats: &[f64]) -> Result<TrustScore> {
        Ok(self.forward(ps, stats)?.0)
    }

    /// Accumulate `d_logit · ∂logit/∂θ` into `grads`.
    pub fn backward(&self, ps: &ParamSet, cache: &GateCache, d_logit: f64, grads: &mut GradBuf) {
        if d_logit == 0.0 {
            return;
        }
        let mut dy = vec![d_logit];
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &cache.inputs[i];
            grads.get_mut(layer.w).add_outer(&dy, x, 1.0);
            grads
                .get_mut(layer.b)
                .add_scaled(&Mat::column(dy.clone()), 1.0);
            if i == 0 {
                break;
            }
            let dx = ps
                .value(layer.w)
                .matvec_t(&dy)
                .expect("cached activation matches layer width");
            dy = dx
                .into_iter()
                .zip(&cache.pre[i - 1])
                .map(|(g, &p)| if p > 0.0 { g } else { 0.0 })
                .collect();
        }
    }
}

/// Foreground-gate loss: BCE between the trust score and the hard target,
/// evaluated on the logit. Returns the value and `d/d logit`.
pub fn frg_loss(r: TrustScore, r_star: u8) -> (f64, f64) {
    bce_with_logit(r.logit, r_star)
}

/// Which of the three indicators reach the gate; disabled ones are fed as 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndicatorMask([bool; NUM_INDICATORS]);

impl Default for IndicatorMask {
    fn default() -> Self {
        Self([true; NUM_INDICATORS])
    }
}

impl IndicatorMask {
    pub fn new(enabled: [bool; NUM_INDICATORS]) -> Result<Self> {
        if !enabled.iter().any(|&e| e) {
            return Err(Error::Config(
                "at least one gate indicator must stay enabled".into(),
            ));
        }
        Ok(Self(enabled))
    }

    pub fn enabled(&self) -> [bool; NUM_INDICATORS] {
        self.0
    }

    pub fn apply(&self, stats: [f64; NUM_INDICATORS]) -> [f64; NUM_INDICATORS] {
        let mut out = stats;
        for (o, &on) in out.iter_mut().zip(&self.0) {
            if !on {
                *o = 0.0;
            }
        }
        out
    }
}

impl std::str::FromStr for IndicatorMask {
    type Err = Error;

    /// Three characters of `0`/`1`, e.g. `"110"`.
    fn from_str(s: &str) -> Result<Self> {
        let bits: Vec<bool> = s
            .chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                other => Err(Error::Config(format!("indicator mask char `{other}`"))),
            })
            .collect::<Result<_>>()?;
        let arr: [bool; NUM_INDICATORS] = bits
            .try_into()
            .map_err(|_| Error::Config(format!("indicator mask `{s}` must have 3 digits")))?;
        Self::new(arr)
    }
}

impl std::fmt::Display for IndicatorMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for on in self.0 {
            f.write_str(if on { "1" } else { "0" })?;
        }
        Ok(())
    }
}

/// Per-indicator standardization fitted once on the training set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: [f64; NUM_INDICATORS],
    pub std: [f64; NUM_INDICATORS],
}

impl Default for Standardizer {
    fn default() -> Self {
        Self::identity()
    }
}

impl Standardizer {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; NUM_INDICATORS],
            std: [1.0; NUM_INDICATORS],
        }
    }

    /// Population mean/std; constant columns get unit std.
    pub fn fit(rows: &[[f64; NUM_INDICATORS]]) -> Self {
        if rows.is_empty() {
            return Self::identity();
        }
        let n = rows.len() as f64;
        let mut out = Self::identity();
        for k in 0..NUM_INDICATORS {
            let mean = rows.iter().map(|r| r[k]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            out.mean[k] = mean;
            out.std[k] = if std > 1e-12 { std } else { 1.0 };
        }
        out
    }

    pub fn apply(&self, stats: [f64; NUM_INDICATORS]) -> [f64; NUM_INDICATORS] {
        let mut out = stats;
        for k in 0..NUM_INDICATORS {
            out[k] = (stats[k] - self.mean[k]) / self.std[k];
        }
        out
    }
}
