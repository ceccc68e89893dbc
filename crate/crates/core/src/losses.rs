//! Named loss terms behind a common trait.
//!
//! Each branch objective is the weighted sum of the enabled terms for that
//! branch. Terms report their value plus partial derivatives with respect to
//! the branch logits and the gate's pre-sigmoid trust logit; the objective
//! chains those through the adapters or the blend.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diffmath::{bce_with_logit, cross_entropy_with_grad, kl_to_logits};
use crate::error::{Error, Result};
use crate::gates::TrustScore;

pub const FRG: &str = "frg";
pub const FDC_CE: &str = "fdc_ce";
pub const FDC_DIST: &str = "fdc_dist";
pub const PC_CE: &str = "pc_ce";
pub const PC_KL: &str = "pc_kl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Base,
    New,
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Branch::Base => "base",
            Branch::New => "new",
        })
    }
}

impl std::str::FromStr for Branch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Branch::Base),
            "new" => Ok(Branch::New),
            other => Err(Error::Config(format!("unknown branch `{other}`"))),
        }
    }
}

/// Everything a term may read for one sample. Distributions not used by a
/// branch are empty slices.
#[derive(Debug, Clone, Copy)]
pub struct TermInput<'a> {
    pub label: usize,
    pub tau_d: f64,
    /// Differentiable logits of the branch (`z_FDC` or `z_PC`).
    pub logits: &'a [f64],
    /// Trust score of the branch gate (`r` or `b`).
    pub trust: TrustScore,
    pub r_star: u8,
    pub p_full: &'a [f64],
    pub p_fg: &'a [f64],
    pub p_clip: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct TermOutput {
    pub value: f64,
    /// `∂value/∂logits`, or `None` when the term ignores the logits.
    pub d_logits: Option<Vec<f64>>,
    /// `∂value/∂(trust logit)`; does not include dependence through `logits`.
    pub d_trust_logit: f64,
}

pub trait LossTerm: Send + Sync + fmt::Debug {
    /// Registry key, also used by CLI toggles.
    fn name(&self) -> &'static str;

    fn branch(&self) -> Branch;

    fn describe(&self) -> &'static str;

    /// True for the term that directly supervises the trust score; others
    /// reach the gate only as a differentiable coefficient.
    fn supervises_trust(&self) -> bool {
        false
    }

    fn evaluate(&self, input: &TermInput<'_>) -> Result<TermOutput>;
}

#[derive(Debug)]
struct FrgBce;

impl LossTerm for FrgBce {
    fn name(&self) -> &'static str {
        FRG
    }
    fn branch(&self) -> Branch {
        Branch::Base
    }
    fn describe(&self) -> &'static str {
        "BCE between foreground trust r and hard target r*"
    }
    fn supervises_trust(&self) -> bool {
        true
    }
    fn evaluate(&self, input: &TermInput<'_>) -> Result<TermOutput> {
        let (value, dq) = bce_with_logit(input.trust.logit, input.r_star);
        Ok(TermOutput {
            value,
            d_logits: None,
            d_trust_logit: dq,
        })
    }
}

#[derive(Debug)]
struct FdcCrossEntropy;

impl LossTerm for FdcCrossEntropy {
    fn name(&self) -> &'static str {
        FDC_CE
    }
    fn branch(&self) -> Branch {
        Branch::Base
    }
    fn describe(&self) -> &'static str {
        "cross-entropy of compensated logits on the label"
    }
    fn evaluate(&self, input: &TermInput<'_>) -> Result<TermOutput> {
        let (value, g) = cross_entropy_with_grad(input.logits, input.label, input.tau_d)?;
        Ok(TermOutput {
            value,
            d_logits: Some(g),
            d_trust_logit: 0.0,
        })
    }
}

/// `r·KL(p_fg ‖ p_FDC) + (1−r)·KL(p_full ‖ p_FDC)`.
#[derive(Debug)]
struct FdcDistill;

impl LossTerm for FdcDistill {
    fn name(&self) -> &'static str {
        FDC_DIST
    }
    fn branch(&self) -> Branch {
        Branch::Base
    }
    fn describe(&self) -> &'static str {
        "trust-weighted KL from foreground/full targets to compensated distribution"
    }
    fn evaluate(&self, input: &TermInput<'_>) -> Result<TermOutput> {
        let r = input.trust.value;
        let (kl_fg, g_fg) = kl_to_logits(input.p_fg, input.logits, input.tau_d)?;
        let (kl_full, g_full) = kl_to_logits(input.p_full, input.logits, input.tau_d)?;
        let d_logits = g_fg
            .iter()
            .zip(&g_full)
            .map(|(a, b)| r * a + (1.0 - r) * b)
            .collect();
        Ok(TermOutput {
            value: r * kl_fg + (1.0 - r) * kl_full,
            d_logits: Some(d_logits),
            d_trust_logit: (kl_fg - kl_full) * input.trust.slope(),
        })
    }
}

#[derive(Debug)]
struct PcCrossEntropy;

impl LossTerm for PcCrossEntropy {
    fn name(&self) -> &'static str {
        PC_CE
    }
    fn branch(&self) -> Branch {
        Branch::New
    }
    fn describe(&self) -> &'static str {
        "cross-entropy of calibrated logits on the (base-class) label"
    }
    fn evaluate(&self, input: &TermInput<'_>) -> Result<TermOutput> {
        let (value, g) = cross_entropy_with_grad(input.logits, input.label, input.tau_d)?;
        Ok(TermOutput {
            value,
            d_logits: Some(g),
            d_trust_logit: 0.0,
        })
    }
}

#[derive(Debug)]
struct PcPriorKl;

impl LossTerm for PcPriorKl {
    fn name(&self) -> &'static str {
        PC_KL
    }
    fn branch(&self) -> Branch {
        Branch::New
    }
    fn describe(&self) -> &'static str {
        "KL from the zero-shot prior distribution to the calibrated distribution"
    }
    fn evaluate(&self, input: &TermInput<'_>) -> Result<TermOutput> {
        let (value, g) = kl_to_logits(input.p_clip, input.logits, input.tau_d)?;
        Ok(TermOutput {
            value,
            d_logits: Some(g),
            d_trust_logit: 0.0,
        })
    }
}

/// Loss terms keyed by name.
#[derive(Debug, Clone)]
pub struct LossRegistry {
    terms: Vec<Arc<dyn LossTerm>>,
}

impl Default for LossRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl LossRegistry {
    pub fn empty() -> Self {
        Self { terms: Vec::new() }
    }

    /// The five terms of the two branch objectives.
    pub fn builtin() -> Self {
        let mut reg = Self::empty();
        for term in [
            Arc::new(FrgBce) as Arc<dyn LossTerm>,
            Arc::new(FdcCrossEntropy),
            Arc::new(FdcDistill),
            Arc::new(PcCrossEntropy),
            Arc::new(PcPriorKl),
        ] {
            reg.register(term).expect("builtin names are unique");
        }
        reg
    }

    pub fn register(&mut self, term: Arc<dyn LossTerm>) -> Result<()> {
        if self.get(term.name()).is_some() {
            return Err(Error::Config(format!(
                "loss term `{}` already registered",
                term.name()
            )));
        }
        self.terms.push(term);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Arc<dyn LossTerm>> {
        self.terms.iter().find(|t| t.name() == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.terms.iter().map(|t| t.name())
    }

    pub fn for_branch(&self, branch: Branch) -> impl Iterator<Item = &Arc<dyn LossTerm>> {
        self.terms.iter().filter(move |t| t.branch() == branch)
    }

    /// Reject toggles naming unknown terms.
    pub fn validate(&self, toggles: &LossToggles) -> Result<()> {
        for name in &toggles.disabled {
            if self.get(name).is_none() {
                let known: Vec<_> = self.names().collect();
                return Err(Error::Config(format!(
                    "unknown loss term `{name}` (known: {})",
                    known.join(", ")
                )));
            }
        }
        Ok(())
    }
}

/// Set of disabled loss terms; everything else is on.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossToggles {
    #[serde(default)]
    disabled: BTreeSet<String>,
}

impl LossToggles {
    pub fn all_on() -> Self {
        Self::default()
    }

    pub fn disable(&mut self, name: &str) {
        self.disabled.insert(name.to_string());
    }

    pub fn enable(&mut self, name: &str) {
        self.disabled.remove(name);
    }

    pub fn only(names: &[&str], registry: &LossRegistry) -> Self {
        let mut t = Self::default();
        for n in registry.names() {
            if !names.contains(&n) {
                t.disable(n);
            }
        }
        t
    }

    pub fn is_enabled(&self, name: &str) -> bool {
        !self.disabled.contains(name)
    }

    pub fn disabled(&self) -> impl Iterator<Item = &str> {
        self.disabled.iter().map(String::as_str)
    }
}

/// A term with its weight in the branch objective.
#[derive(Debug, Clone)]
pub struct WeightedTerm {
    pub term: Arc<dyn LossTerm>,
    pub weight: f64,
}

/// Enabled terms of one branch, with `lambda_d` applied to the distillation
/// term.
pub fn active_terms(
    registry: &LossRegistry,
    toggles: &LossToggles,
    branch: Branch,
    lambda_d: f64,
) -> Vec<WeightedTerm> {
    registry
        .for_branch(branch)
        .filter(|t| toggles.is_enabled(t.name()))
        .map(|t| WeightedTerm {
            weight: if t.name() == FDC_DIST { lambda_d } else { 1.0 },
            term: Arc::clone(t),
        })
        .collect()
}

/// Summed output of several weighted terms for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Combined {
    pub value: f64,
    pub per_term: Vec<(&'static str, f64)>,
    pub d_logits: Vec<f64>,
    pub d_trust_logit: f64,
}

/// Evaluate and sum the terms. With `stop_grad_trust`, only the term that
/// supervises the trust score contributes to `d_trust_logit`.
pub fn combine(
    terms: &[WeightedTerm],
    input: &TermInput<'_>,
    stop_grad_trust: bool,
) -> Result<Combined> {
    let mut out = Combined {
        value: 0.0,
        per_term: Vec::with_capacity(terms.len()),
        d_logits: vec![0.0; input.logits.len()],
        d_trust_logit: 0.0,
    };
    for wt in terms {
        let o = wt.term.evaluate(input)?;
        out.value += wt.weight * o.value;
        out.per_term.push((wt.term.name(), o.value));
        if let Some(g) = o.d_logits {
            for (acc, gi) in out.d_logits.iter_mut().zip(g) {
                *acc += wt.weight * gi;
            }
        }
        if !stop_grad_trust || wt.term.supervises_trust() {
            out.d_trust_logit += wt.weight * o.d_trust_logit;
        }
    }
    Ok(out)
}

/// Mean loss over a batch, with per-term means (unweighted).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchLoss {
    pub value: f64,
    pub per_term: BTreeMap<&'static str, f64>,
}

impl BatchLoss {
    pub(crate) fn push(&mut self, c: &Combined, scale: f64) {
        self.value += scale * c.value;
        for (name, v) in &c.per_term {
            *self.per_term.entry(name).or_insert(0.0) += scale * v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::{kl_div, softmax_temp};

    fn input<'a>(logits: &'a [f64], r: f64, p_full: &'a [f64], p_fg: &'a [f64]) -> TermInput<'a> {
        TermInput {
            label: 0,
            tau_d: 2.0,
            logits,
            trust: TrustScore::from_logit((r / (1.0 - r)).ln()),
            r_star: 1,
            p_full,
            p_fg,
            p_clip: &[],
        }
    }

    #[test]
    fn builtin_registry_lists_five_terms() {
        let mut reg = LossRegistry::builtin();
        assert_eq!(
            reg.names().collect::<Vec<_>>(),
            vec![FRG, FDC_CE, FDC_DIST, PC_CE, PC_KL]
        );
        assert_eq!(reg.for_branch(Branch::Base).count(), 3);
        assert_eq!(reg.for_branch(Branch::New).count(), 2);
        assert!(reg.register(Arc::new(FrgBce)).is_err());
    }

    #[test]
    fn unknown_toggle_is_rejected() {
        let mut t = LossToggles::all_on();
        t.disable("nope");
        assert!(matches!(
            LossRegistry::builtin().validate(&t),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn distill_matches_closed_form() {
        // logits whose softmax at tau=2 is [0.7, 0.3]
        let z = [2.0 * (0.7f64 / 0.3).ln(), 0.0];
        let p = softmax_temp(&z, 2.0).unwrap();
        assert!((p[0] - 0.7).abs() < 1e-15);
        let out = FdcDistill
            .evaluate(&input(&z, 0.5, &[0.5, 0.5], &[0.9, 0.1]))
            .unwrap();
        assert!((out.value - 0.101_749_225_079_197).abs() < 1e-12);
        let direct =
            0.5 * kl_div(&[0.9, 0.1], &p).unwrap() + 0.5 * kl_div(&[0.5, 0.5], &p).unwrap();
        assert!((out.value - direct).abs() < 1e-12);
    }

    #[test]
    fn distill_with_coinciding_targets_ignores_trust() {
        let z = [0.3, -1.2, 2.0];
        let target = [0.2, 0.5, 0.3];
        let expect = kl_div(&target, &softmax_temp(&z, 2.0).unwrap()).unwrap();
        for r in [0.01, 0.3, 0.5, 0.97] {
            let v = FdcDistill
                .evaluate(&input(&z, r, &target, &target))
                .unwrap()
                .value;
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn toggles_zero_out_terms() {
        let reg = LossRegistry::builtin();
        let z = [0.3, -1.2, 2.0];
        let p = [0.2, 0.5, 0.3];
        let full = combine(
            &active_terms(&reg, &LossToggles::all_on(), Branch::Base, 10.0),
            &input(&z, 0.6, &p, &p),
            false,
        )
        .unwrap();
        assert_eq!(full.per_term.len(), 3);
        for name in [FRG, FDC_CE, FDC_DIST] {
            let mut t = LossToggles::all_on();
            t.disable(name);
            let c = combine(
                &active_terms(&reg, &t, Branch::Base, 10.0),
                &input(&z, 0.6, &p, &p),
                false,
            )
            .unwrap();
            let dropped = full.per_term.iter().find(|(n, _)| *n == name).unwrap().1;
            let w = if name == FDC_DIST { 10.0 } else { 1.0 };
            assert!((full.value - c.value - w * dropped).abs() < 1e-12);
            assert!(c.per_term.iter().all(|(n, _)| *n != name));
        }
        let none = LossToggles::only(&[], &reg);
        assert!(active_terms(&reg, &none, Branch::Base, 10.0).is_empty());
    }

    #[test]
    fn stop_grad_keeps_only_supervision_on_trust() {
        let reg = LossRegistry::builtin();
        let terms = active_terms(&reg, &LossToggles::all_on(), Branch::Base, 10.0);
        let z = [0.3, -1.2, 2.0];
        let inp = input(&z, 0.6, &[0.2, 0.5, 0.3], &[0.7, 0.2, 0.1]);
        let flowing = combine(&terms, &inp, false).unwrap();
        let stopped = combine(&terms, &inp, true).unwrap();
        let (_, dq) = bce_with_logit(inp.trust.logit, 1);
        assert!((stopped.d_trust_logit - dq).abs() < 1e-15);
        assert!((flowing.d_trust_logit - stopped.d_trust_logit).abs() > 1e-6);
        assert_eq!(flowing.d_logits, stopped.d_logits);
    }
}
