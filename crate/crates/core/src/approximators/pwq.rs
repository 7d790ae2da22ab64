use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};

/// Default margin keeping the biases strictly negative.
pub const DEFAULT_B_FLOOR: f64 = 1e-6;

/// `V(x) = sum_j w_j max(0, W_j x + b_j)^2` with `b < 0` and `w >= 0`, which
/// makes `V` nonnegative, convex and zero in a neighbourhood of the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct PwqNet {
    /// `hidden x inputs`.
    pub weights: DMatrix<f64>,
    pub biases: DVector<f64>,
    pub output: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PwqGradients {
    pub x: DVector<f64>,
    pub weights: DMatrix<f64>,
    pub biases: DVector<f64>,
    pub output: DVector<f64>,
}

impl PwqGradients {
    /// Parameter gradient in [`PwqNet::flatten`] order.
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.weights.len() + 2 * self.biases.len());
        for r in 0..self.weights.nrows() {
            v.extend(self.weights.row(r).iter());
        }
        v.extend(self.biases.iter());
        v.extend(self.output.iter());
        v
    }
}

impl PwqNet {
    pub fn new(weights: DMatrix<f64>, biases: DVector<f64>, output: DVector<f64>) -> Result<Self> {
        let m = weights.nrows();
        if biases.len() != m || output.len() != m {
            return Err(Error::invalid("PWQ bias and output sizes must match the hidden size"));
        }
        Ok(PwqNet { weights, biases, output })
    }

    /// Seeded initialization: weights uniform on [-1, 1], biases on [-1, -0.1],
    /// output weights on [0, 1].
    pub fn random<R: Rng + ?Sized>(hidden: usize, inputs: usize, rng: &mut R) -> Self {
        let weights = DMatrix::from_fn(hidden, inputs, |_, _| rng.random_range(-1.0..=1.0));
        let biases = DVector::from_fn(hidden, |_, _| rng.random_range(-1.0..=-0.1));
        let output = DVector::from_fn(hidden, |_, _| rng.random_range(0.0..=1.0));
        PwqNet { weights, biases, output }
    }

    pub fn zeros(hidden: usize, inputs: usize) -> Self {
        PwqNet {
            weights: DMatrix::zeros(hidden, inputs),
            biases: DVector::from_element(hidden, -1.0),
            output: DVector::zeros(hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.weights.nrows()
    }

    pub fn inputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn n_params(&self) -> usize {
        self.weights.len() + 2 * self.hidden()
    }

    #[inline]
    pub fn preactivation(&self, j: usize, x: &[f64]) -> f64 {
        let mut z = self.biases[j];
        for (k, xk) in x.iter().enumerate() {
            z += self.weights[(j, k)] * xk;
        }
        z
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.inputs());
        (0..self.hidden())
            .map(|j| {
                let phi = self.preactivation(j, x).max(0.0);
                self.output[j] * phi * phi
            })
            .sum()
    }

    /// Exact gradients on the current ReLU active set. A unit whose
    /// pre-activation is exactly zero contributes nothing.
    pub fn gradients(&self, x: &[f64]) -> PwqGradients {
        let (m, n) = (self.hidden(), self.inputs());
        let mut g = PwqGradients {
            x: DVector::zeros(n),
            weights: DMatrix::zeros(m, n),
            biases: DVector::zeros(m),
            output: DVector::zeros(m),
        };
        for j in 0..m {
            let z = self.preactivation(j, x);
            if z <= 0.0 {
                continue;
            }
            let coef = 2.0 * self.output[j] * z;
            g.output[j] = z * z;
            g.biases[j] = coef;
            for k in 0..n {
                g.weights[(j, k)] = coef * x[k];
                g.x[k] += coef * self.weights[(j, k)];
            }
        }
        g
    }

    /// Parameters as `(W row-major, b, w)`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        for r in 0..self.hidden() {
            v.extend(self.weights.row(r).iter());
        }
        v.extend(self.biases.iter());
        v.extend(self.output.iter());
        v
    }

    pub fn unflatten(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.n_params() {
            return Err(Error::invalid("PWQ parameter vector has the wrong length"));
        }
        let (m, n) = (self.hidden(), self.inputs());
        for r in 0..m {
            for c in 0..n {
                self.weights[(r, c)] = theta[r * n + c];
            }
        }
        let off = m * n;
        self.biases.copy_from_slice(&theta[off..off + m]);
        self.output.copy_from_slice(&theta[off + m..off + 2 * m]);
        Ok(())
    }

    pub fn is_feasible(&self, b_floor: f64) -> bool {
        self.biases.iter().all(|&b| b <= -b_floor) && self.output.iter().all(|&w| w >= 0.0)
    }
}

/// Projects onto `{b <= -b_floor, w >= 0}`; weights are left untouched.
pub fn project_pwq_params(net: &PwqNet, b_floor: f64) -> PwqNet {
    let mut out = net.clone();
    out.biases.apply(|b| *b = b.min(-b_floor));
    out.output.apply(|w| *w = w.max(0.0));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand::Rng;

    fn single_unit(w_row: [f64; 2], b: f64, w: f64) -> PwqNet {
        PwqNet::new(
            DMatrix::from_row_slice(1, 2, &w_row),
            DVector::from_element(1, b),
            DVector::from_element(1, w),
        )
        .unwrap()
    }

    #[test]
    fn value_examples() {
        let net = PwqNet::new(DMatrix::identity(2, 2), DVector::from_element(2, -1.0), DVector::from_element(2, 1.0)).unwrap();
        assert_eq!(net.value(&[0.0, 0.0]), 0.0);
        assert_eq!(single_unit([1.0, 0.0], -1.0, 2.0).value(&[3.0, 0.0]), 8.0);
    }

    #[test]
    fn inactive_units_give_zero_gradients() {
        let net = single_unit([1.0, 0.0], -1.0, 2.0);
        let g = net.gradients(&[0.5, 4.0]);
        assert!(g.flatten_params().iter().all(|&v| v == 0.0));
        assert!(g.x.iter().all(|&v| v == 0.0));
        // exactly at the kink
        let g = net.gradients(&[1.0, 0.0]);
        assert!(g.x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_active_unit_state_gradient() {
        let net = single_unit([0.6, -0.8], -0.5, 1.5);
        let x = [2.0, -1.0];
        let z = 0.6 * 2.0 + 0.8 - 0.5;
        let g = net.gradients(&x);
        assert!((g.x[0] - 2.0 * 1.5 * z * 0.6).abs() < 1e-12);
        assert!((g.x[1] - 2.0 * 1.5 * z * -0.8).abs() < 1e-12);
    }

    fn fd_params(net: &PwqNet, x: &[f64]) -> Vec<f64> {
        let theta = net.flatten();
        (0..theta.len())
            .map(|i| {
                let h = 1e-6 * theta[i].abs().max(1.0);
                let mut p = theta.clone();
                p[i] += h;
                let mut up = net.clone();
                up.unflatten(&p).unwrap();
                p[i] -= 2.0 * h;
                let mut dn = net.clone();
                dn.unflatten(&p).unwrap();
                (up.value(x) - dn.value(x)) / (2.0 * h)
            })
            .collect()
    }

    fn fd_state(net: &PwqNet, x: &[f64]) -> Vec<f64> {
        (0..x.len())
            .map(|k| {
                let h = 1e-6 * x[k].abs().max(1.0);
                let mut a = x.to_vec();
                a[k] += h;
                let mut b = x.to_vec();
                b[k] -= h;
                (net.value(&a) - net.value(&b)) / (2.0 * h)
            })
            .collect()
    }

    fn min_abs_preactivation(net: &PwqNet, x: &[f64]) -> f64 {
        (0..net.hidden()).map(|j| net.preactivation(j, x).abs()).fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut checked = 0;
        while checked < 100 {
            let net = PwqNet::random(16, 2, &mut rng);
            let x = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            if min_abs_preactivation(&net, &x) < 1e-3 {
                continue;
            }
            let g = net.gradients(&x);
            for (a, f) in g.flatten_params().iter().zip(fd_params(&net, &x)) {
                assert!((a - f).abs() <= 1e-6 * a.abs().max(1.0), "param {a} vs {f}");
            }
            for (a, f) in g.x.iter().zip(fd_state(&net, &x)) {
                assert!((a - f).abs() <= 1e-6 * a.abs().max(1.0), "state {a} vs {f}");
            }
            checked += 1;
        }
    }

    #[test]
    fn projection_examples() {
        let net = PwqNet::new(DMatrix::zeros(2, 2), DVector::from_vec(vec![-1.0, -2.0]), DVector::from_vec(vec![-1.0, 2.0])).unwrap();
        let p = project_pwq_params(&net, 1e-6);
        assert_eq!(p.output.as_slice(), &[0.0, 2.0]);
        assert_eq!(p.weights, net.weights);

        let net = PwqNet::new(DMatrix::zeros(1, 2), DVector::from_element(1, -1e-9), DVector::from_element(1, 1.0)).unwrap();
        assert_eq!(project_pwq_params(&net, 1e-6).biases[0], -1e-6);

        let feasible = PwqNet::random(4, 2, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(project_pwq_params(&feasible, 1e-6), feasible);
    }

    #[test]
    fn flatten_roundtrip() {
        let net = PwqNet::random(5, 3, &mut ChaCha8Rng::seed_from_u64(4));
        let mut other = PwqNet::zeros(5, 3);
        other.unflatten(&net.flatten()).unwrap();
        assert_eq!(other, net);
        assert!(other.unflatten(&[0.0; 3]).is_err());
    }

    #[test]
    fn convex_midpoint_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = PwqNet::random(16, 2, &mut rng);
        for _ in 0..10_000 {
            let x = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
            let y = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
            let mid = [(x[0] + y[0]) / 2.0, (x[1] + y[1]) / 2.0];
            assert!(net.value(&mid) <= 0.5 * net.value(&x) + 0.5 * net.value(&y) + 1e-9);
        }
    }

    proptest! {
        #[test]
        fn nonnegative_and_projection_idempotent(seed in 0u64..1000, x0 in -10.0..10.0f64, x1 in -10.0..10.0f64, shift in -2.0..2.0f64) {
            let mut net = PwqNet::random(8, 2, &mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert!(net.value(&[x0, x1]) >= 0.0);
            net.biases.add_scalar_mut(shift);
            net.output.add_scalar_mut(-shift);
            let once = project_pwq_params(&net, 1e-6);
            prop_assert!(once.is_feasible(1e-6));
            prop_assert_eq!(project_pwq_params(&once, 1e-6), once);
        }

        #[test]
        fn locally_quadratic_on_fixed_active_set(seed in 0u64..500, x0 in -3.0..3.0f64, x1 in -3.0..3.0f64) {
            // On a fixed activation pattern V(x + t d) is an exact quadratic in t.
            let net = PwqNet::random(16, 2, &mut ChaCha8Rng::seed_from_u64(seed));
            let x = [x0, x1];
            prop_assume!(min_abs_preactivation(&net, &x) > 1e-2);
            let d = [0.3, -0.2];
            let t = 1e-3;
            let at = |s: f64| net.value(&[x[0] + s * d[0], x[1] + s * d[1]]);
            let g = net.gradients(&x);
            let slope = g.x[0] * d[0] + g.x[1] * d[1];
            // second difference equals twice the curvature along d
            let curv: f64 = (0..16).filter(|&j| net.preactivation(j, &x) > 0.0).map(|j| {
                let wd = net.weights[(j, 0)] * d[0] + net.weights[(j, 1)] * d[1];
                net.output[j] * wd * wd
            }).sum();
            prop_assert!((at(t) - (at(0.0) + slope * t + curv * t * t)).abs() < 1e-10);
        }
    }
}
