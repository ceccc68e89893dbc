use super::mat::Mat;
use crate::error::{Error, Result};

/// Handle into a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gradient buffer shaped like a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradBuf {
    grads: Vec<Mat>,
}

impl GradBuf {
    pub fn get(&self, id: ParamId) -> &Mat {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.grads[id.0]
    }

    pub fn zero(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(0.0));
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &GradBuf, scale: f64) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_scaled(b, scale);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Mat> {
        self.grads.iter()
    }
}

/// Named trainable parameters, each paired with a gradient accumulator of
/// identical shape. Registration order is stable and defines iteration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Mat>,
    grads: GradBuf,
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            grads: GradBuf { grads: Vec::new() },
        }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.grads
            .grads
            .push(Mat::zeros(value.rows(), value.cols()));
        self.values.push(value);
        self.names.push(name);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Mat {
        self.grads.get(id)
    }

    pub fn grads(&self) -> &GradBuf {
        &self.grads
    }

    pub fn grads_mut(&mut self) -> &mut GradBuf {
        &mut self.grads
    }

    /// A fresh all-zero buffer with this set's shapes.
    pub fn zero_grad_buf(&self) -> GradBuf {
        GradBuf {
            grads: self
                .values
                .iter()
                .map(|v| Mat::zeros(v.rows(), v.cols()))
                .collect(),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grads.zero();
    }

    pub fn accumulate(&mut self, buf: &GradBuf, scale: f64) {
        self.grads.add_scaled(buf, scale);
    }
}

/// `p ← p − lr·∇p` for every parameter, then zero the accumulators.
///
/// Any non-finite gradient aborts the step before anything is modified.
pub fn sgd_step(params: &mut ParamSet, lr: f64) -> Result<()> {
    if !lr.is_finite() || lr <= 0.0 {
        return Err(Error::Config(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    for id in params.ids() {
        if !params.grad(id).all_finite() {
            return Err(Error::Diverged(format!(
                "non-finite gradient in `{}`",
                params.name(id)
            )));
        }
    }
    for (value, grad) in params.values.iter_mut().zip(&params.grads.grads) {
        value.add_scaled(grad, -lr);
    }
    params.zero_grad();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_set(v: f64, g: f64) -> (ParamSet, ParamId) {
        let mut ps = ParamSet::new();
        let id = ps.register("w", Mat::column(vec![v]));
        ps.grads_mut().get_mut(id).as_mut_slice()[0] = g;
        (ps, id)
    }

    #[test]
    fn sgd_examples() {
        let (mut ps, id) = scalar_set(1.0, 2.0);
        sgd_step(&mut ps, 0.5).unwrap();
        assert_eq!(ps.value(id).as_slice(), &[0.0]);
        assert_eq!(ps.grad(id).as_slice(), &[0.0]);

        let (mut ps, id) = scalar_set(1.0, 0.0);
        sgd_step(&mut ps, 0.5).unwrap();
        assert_eq!(ps.value(id).as_slice(), &[1.0]);

        let mut ps = ParamSet::new();
        let id = ps.register("p", Mat::column(vec![1.0, 1.0]));
        ps.grads_mut()
            .get_mut(id)
            .as_mut_slice()
            .copy_from_slice(&[0.1, -0.1]);
        sgd_step(&mut ps, 0.0035).unwrap();
        let v = ps.value(id).as_slice();
        assert!((v[0] - 0.99965).abs() < 1e-15);
        assert!((v[1] - 1.00035).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_is_divergence_and_leaves_values() {
        let (mut ps, id) = scalar_set(1.0, f64::NAN);
        assert!(matches!(sgd_step(&mut ps, 0.1), Err(Error::Diverged(_))));
        assert_eq!(ps.value(id).as_slice(), &[1.0]);
    }

    #[test]
    fn zero_grad_resets_exactly() {
        let mut ps = ParamSet::new();
        let a = ps.register("a", Mat::zeros(2, 3));
        let b = ps.register("b", Mat::zeros(1, 1));
        ps.grads_mut().get_mut(a).fill(3.5);
        ps.grads_mut().get_mut(b).fill(-1.0);
        ps.zero_grad();
        assert!(ps
            .grads()
            .iter()
            .all(|g| g.as_slice().iter().all(|&x| x == 0.0)));
        assert_eq!(ps.grad(a).rows(), 2);
        assert_eq!(ps.grad(a).cols(), 3);
        assert_eq!(ps.num_scalars(), 7);
    }

    #[test]
    fn sgd_descends_convex_quadratic() {
        // L(w) = 0.5 * k * |w - c|^2 with curvature k = 4; stable for lr < 2/k.
        let k = 4.0;
        let c = [1.0, -2.0, 0.5];
        let mut ps = ParamSet::new();
        let id = ps.register("w", Mat::column(vec![3.0, 3.0, 3.0]));
        let loss = |ps: &ParamSet| {
            0.5 * k
                * ps.value(id)
                    .as_slice()
                    .iter()
                    .zip(&c)
                    .map(|(w, c)| (w - c).powi(2))
                    .sum::<f64>()
        };
        let mut prev = loss(&ps);
        for _ in 0..20 {
            let g: Vec<f64> = ps
                .value(id)
                .as_slice()
                .iter()
                .zip(&c)
                .map(|(w, c)| k * (w - c))
                .collect();
            ps.grads_mut()
                .get_mut(id)
                .as_mut_slice()
                .copy_from_slice(&g);
            sgd_step(&mut ps, 0.3).unwrap();
            let now = loss(&ps);
            assert!(now < prev);
            prev = now;
        }
    }
}
