use super::params::ParamSet;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-4;

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − central| / max(1, |central|)` over all entries.
    pub max_rel_error: f64,
    /// Parameter name and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub entries: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Compare the analytic gradients currently stored in `params` with central
/// differences of `loss_fn`. Every parameter entry is perturbed in place and
/// restored afterwards.
pub fn grad_check<F>(loss_fn: F, params: &mut ParamSet, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&ParamSet) -> Result<f64>,
{
    if !(1e-5..=1e-3).contains(&h) {
        return Err(Error::Config(format!(
            "finite-difference step must lie in [1e-5, 1e-3], got {h}"
        )));
    }
    let eval = |ps: &ParamSet| -> Result<f64> {
        let v = loss_fn(ps)?;
        if !v.is_finite() {
            return Err(Error::Domain(format!("loss is not finite ({v})")));
        }
        Ok(v)
    };
    eval(params)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries: 0,
    };
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        for k in 0..params.value(id).len() {
            let analytic = params.grad(id).as_slice()[k];
            let orig = params.value(id).as_slice()[k];
            params.value_mut(id).as_mut_slice()[k] = orig + h;
            let plus = eval(params);
            params.value_mut(id).as_mut_slice()[k] = orig - h;
            let minus = eval(params);
            params.value_mut(id).as_mut_slice()[k] = orig;
            let central = (plus? - minus?) / (2.0 * h);
            let err = (analytic - central).abs() / central.abs().max(1.0);
            report.entries += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((params.name(id).to_string(), k));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::super::mat::Mat;
    use super::super::ops::*;
    use super::*;

    #[test]
    fn quadratic_matches_exactly() {
        let mut ps = ParamSet::new();
        let id = ps.register("w", Mat::column(vec![3.0]));
        ps.grads_mut().get_mut(id).as_mut_slice()[0] = 6.0;
        let r = grad_check(
            |p| Ok(p.value(id).as_slice()[0].powi(2)),
            &mut ps,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert_eq!(ps.value(id).as_slice(), &[3.0]);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let mut ps = ParamSet::new();
        let id = ps.register("w", Mat::column(vec![3.0]));
        ps.grads_mut().get_mut(id).as_mut_slice()[0] = -6.0;
        let r = grad_check(
            |p| Ok(p.value(id).as_slice()[0].powi(2)),
            &mut ps,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(r.max_rel_error > 1.0);
        assert_eq!(r.worst, Some(("w".to_string(), 0)));
    }

    #[test]
    fn rejects_bad_step_and_nonfinite_loss() {
        let mut ps = ParamSet::new();
        ps.register("w", Mat::column(vec![1.0]));
        assert!(matches!(
            grad_check(|_| Ok(0.0), &mut ps, 0.1),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            grad_check(|_| Ok(f64::NAN), &mut ps, 1e-4),
            Err(Error::Domain(_))
        ));
    }

    /// Central differences of a vector function's scalar projection.
    fn fd_vector(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut a = x.to_vec();
                let mut b = x.to_vec();
                a[i] += h;
                b[i] -= h;
                (f(&a) - f(&b)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_grad_close(analytic: &[f64], fd: &[f64]) {
        for (a, n) in analytic.iter().zip(fd) {
            let err = (a - n).abs() / n.abs().max(1.0);
            assert!(err <= 1e-3 * 1e-3, "analytic {a} vs fd {n}");
        }
    }

    #[test]
    fn op_gradients_match_finite_differences() {
        let z = [0.7, -1.2, 2.5, 0.1];
        let w = [0.3, -0.8, 1.1, 0.05];
        let tau = 2.0;

        // softmax VJP, projected on w
        let p = softmax_temp(&z, tau).unwrap();
        let analytic = softmax_temp_backward(&p, &w, tau);
        let fd = fd_vector(
            |x| {
                softmax_temp(x, tau)
                    .unwrap()
                    .iter()
                    .zip(&w)
                    .map(|(a, b)| a * b)
                    .sum()
            },
            &z,
            1e-5,
        );
        assert_grad_close(&analytic, &fd);

        // cross-entropy
        let (_, g) = cross_entropy_with_grad(&z, 2, tau).unwrap();
        assert_grad_close(
            &g,
            &fd_vector(|x| cross_entropy(x, 2, tau).unwrap(), &z, 1e-5),
        );

        // KL(target || softmax(z/tau))
        let target = softmax_temp(&w, 1.0).unwrap();
        let (_, g) = kl_to_logits(&target, &z, tau).unwrap();
        let fd = fd_vector(|x| kl_to_logits(&target, x, tau).unwrap().0, &z, 1e-5);
        assert_grad_close(&g, &fd);

        // l2 normalize VJP
        let n = z.iter().map(|x| x * x).sum::<f64>().sqrt();
        let y = l2_normalize(&z).unwrap();
        let analytic = l2_normalize_backward(&y, n, &w);
        let fd = fd_vector(
            |x| {
                l2_normalize(x)
                    .unwrap()
                    .iter()
                    .zip(&w)
                    .map(|(a, b)| a * b)
                    .sum()
            },
            &z,
            1e-5,
        );
        assert_grad_close(&analytic, &fd);

        // BCE on the logit
        for t in [0u8, 1] {
            let (_, g) = bce_with_logit(0.37, t);
            let fd = fd_vector(|x| bce_with_logit(x[0], t).0, &[0.37], 1e-5);
            assert_grad_close(&[g], &fd);
        }
    }
}
