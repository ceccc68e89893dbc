use super::mat::{dot, norm};
use crate::error::{Error, Result};

/// Lower clamp for probabilities inside `ln` in [`kl_div`].
pub const EPS_KL: f64 = 1e-7;
/// Clamp for the trust probability in [`bce`].
pub const EPS_BCE: f64 = 1e-7;
/// Smallest norm accepted by [`l2_normalize`] and [`cosine`].
pub const EPS_NORM: f64 = 1e-12;

fn check_temperature(tau: f64) -> Result<()> {
    if !tau.is_finite() || tau <= 0.0 {
        return Err(Error::Config(format!(
            "temperature must be positive and finite, got {tau}"
        )));
    }
    Ok(())
}

/// `log(softmax(z / tau))`, max-subtracted.
pub fn log_softmax_temp(z: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_temperature(tau)?;
    if z.is_empty() {
        return Err(Error::Shape("softmax over empty logits".into()));
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = z.iter().map(|&v| (v - max) / tau).collect();
    let lse = shifted.iter().map(|s| s.exp()).sum::<f64>().ln();
    Ok(shifted.into_iter().map(|s| s - lse).collect())
}

/// `softmax(z / tau)`.
pub fn softmax_temp(z: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_temperature(tau)?;
    if z.is_empty() {
        return Err(Error::Shape("softmax over empty logits".into()));
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&v| ((v - max) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / s).collect())
}

/// Vector-Jacobian product of [`softmax_temp`]: given `p = softmax(z/tau)`
/// and `dL/dp`, returns `dL/dz`.
pub fn softmax_temp_backward(p: &[f64], grad_p: &[f64], tau: f64) -> Vec<f64> {
    let inner = dot(p, grad_p);
    p.iter()
        .zip(grad_p)
        .map(|(&pi, &gi)| pi * (gi - inner) / tau)
        .collect()
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.is_empty() {
        return Err(Error::Shape(format!("{what}: empty distribution")));
    }
    if let Some(bad) = p.iter().find(|&&x| x < 0.0 || !x.is_finite()) {
        return Err(Error::Domain(format!("{what}: invalid probability {bad}")));
    }
    Ok(())
}

/// Shannon entropy in nats; `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    check_distribution(p, "entropy")?;
    Ok(-p
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>())
}

/// `KL(p || q)` in nats with `q` clamped to at least [`EPS_KL`].
pub fn kl_div(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape(p.len(), q.len(), "kl_div second argument"));
    }
    check_distribution(p, "kl_div p")?;
    check_distribution(q, "kl_div q")?;
    Ok(p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.max(EPS_KL).ln()))
        .sum())
}

/// `KL(target || softmax(z / tau))` evaluated through log-softmax, together
/// with its gradient with respect to `z`.
pub fn kl_to_logits(target: &[f64], z: &[f64], tau: f64) -> Result<(f64, Vec<f64>)> {
    if target.len() != z.len() {
        return Err(Error::shape(target.len(), z.len(), "kl target"));
    }
    let logq = log_softmax_temp(z, tau)?;
    let value = target
        .iter()
        .zip(&logq)
        .filter(|(&t, _)| t > 0.0)
        .map(|(&t, &lq)| t * (t.ln() - lq))
        .sum();
    let mass: f64 = target.iter().sum();
    let grad = logq
        .iter()
        .zip(target)
        .map(|(&lq, &t)| (mass * lq.exp() - t) / tau)
        .collect();
    Ok((value, grad))
}

fn check_label(label: usize, classes: usize) -> Result<()> {
    if label >= classes {
        return Err(Error::Domain(format!(
            "label {label} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// `-ln softmax(z / tau)[label]`.
pub fn cross_entropy(z: &[f64], label: usize, tau: f64) -> Result<f64> {
    check_label(label, z.len())?;
    Ok(-log_softmax_temp(z, tau)?[label])
}

/// Cross-entropy and its gradient `(softmax(z/tau) - onehot) / tau`.
pub fn cross_entropy_with_grad(z: &[f64], label: usize, tau: f64) -> Result<(f64, Vec<f64>)> {
    check_label(label, z.len())?;
    let logp = log_softmax_temp(z, tau)?;
    let grad = logp
        .iter()
        .enumerate()
        .map(|(i, &lp)| (lp.exp() - if i == label { 1.0 } else { 0.0 }) / tau)
        .collect();
    Ok((-logp[label], grad))
}

/// Binary cross-entropy of a probability `r` against a hard target.
pub fn bce(r: f64, target: u8) -> f64 {
    let r = r.clamp(EPS_BCE, 1.0 - EPS_BCE);
    let t = f64::from(target);
    -t * r.ln() - (1.0 - t) * (1.0 - r).ln()
}

/// BCE written on the pre-sigmoid logit `q`: `softplus(q) - t·q`.
/// Returns the value and `d/dq = sigmoid(q) - t`.
pub fn bce_with_logit(q: f64, target: u8) -> (f64, f64) {
    let t = f64::from(target);
    (softplus(q) - t * q, sigmoid(q) - t)
}

pub fn sigmoid(q: f64) -> f64 {
    if q >= 0.0 {
        1.0 / (1.0 + (-q).exp())
    } else {
        let e = q.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^q)` without overflow.
pub fn softplus(q: f64) -> f64 {
    if q > 0.0 {
        q + (-q).exp().ln_1p()
    } else {
        q.exp().ln_1p()
    }
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n.is_nan() || n <= EPS_NORM {
        return Err(Error::Degenerate(format!(
            "cannot normalize vector with norm {n:e}"
        )));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// VJP of [`l2_normalize`]: `y = v/‖v‖`, returns `dL/dv`.
pub fn l2_normalize_backward(y: &[f64], input_norm: f64, grad_y: &[f64]) -> Vec<f64> {
    let inner = dot(y, grad_y);
    y.iter()
        .zip(grad_y)
        .map(|(&yi, &gi)| (gi - yi * inner) / input_norm)
        .collect()
}

pub fn cosine(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape(p.len(), q.len(), "cosine second argument"));
    }
    let (np, nq) = (norm(p), norm(q));
    if !(np > EPS_NORM && nq > EPS_NORM) {
        return Err(Error::Degenerate("cosine of a zero vector".into()));
    }
    Ok((dot(p, q) / (np * nq)).clamp(-1.0, 1.0))
}

/// Index of the largest entry; lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn onehot(label: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[label] = 1.0;
    v
}
