use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};

/// One-hidden-layer perceptron with `tanh` activation and linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
}

impl Mlp {
    pub fn random<R: Rng + ?Sized>(inputs: usize, hidden: usize, outputs: usize, rng: &mut R) -> Self {
        let s1 = 1.0 / (inputs.max(1) as f64).sqrt();
        let s2 = 1.0 / (hidden.max(1) as f64).sqrt();
        Mlp {
            w1: DMatrix::from_fn(hidden, inputs, |_, _| rng.random_range(-s1..=s1)),
            b1: DVector::from_fn(hidden, |_, _| rng.random_range(-s1..=s1)),
            w2: DMatrix::from_fn(outputs, hidden, |_, _| rng.random_range(-s2..=s2)),
            b2: DVector::from_fn(outputs, |_, _| rng.random_range(-s2..=s2)),
        }
    }

    pub fn n_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    fn forward(&self, c: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let hidden = (&self.w1 * c + &self.b1).map(f64::tanh);
        let out = &self.w2 * &hidden + &self.b2;
        (hidden, out)
    }

    pub fn eval(&self, c: &DVector<f64>) -> DVector<f64> {
        self.forward(c).1
    }

    /// Parameter gradient of `g' out(c)` in [`Mlp::flatten`] order.
    fn backward(&self, c: &DVector<f64>, hidden: &DVector<f64>, g_out: &DVector<f64>) -> Vec<f64> {
        let g_hidden = self.w2.transpose() * g_out;
        let g_pre = g_hidden.zip_map(hidden, |g, h| g * (1.0 - h * h));
        let mut v = Vec::with_capacity(self.n_params());
        let gw1 = &g_pre * c.transpose();
        push_row_major(&mut v, &gw1);
        v.extend(g_pre.iter());
        let gw2 = g_out * hidden.transpose();
        push_row_major(&mut v, &gw2);
        v.extend(g_out.iter());
        v
    }

    /// Parameters as `(W1, b1, W2, b2)`, matrices row-major.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        push_row_major(&mut v, &self.w1);
        v.extend(self.b1.iter());
        push_row_major(&mut v, &self.w2);
        v.extend(self.b2.iter());
        v
    }

    fn unflatten(&mut self, theta: &[f64]) -> usize {
        let mut off = read_row_major(&mut self.w1, theta, 0);
        let n = self.b1.len();
        self.b1.copy_from_slice(&theta[off..off + n]);
        off += n;
        off = read_row_major(&mut self.w2, theta, off);
        let n = self.b2.len();
        self.b2.copy_from_slice(&theta[off..off + n]);
        off + n
    }
}

fn push_row_major(v: &mut Vec<f64>, m: &DMatrix<f64>) {
    for r in 0..m.nrows() {
        v.extend(m.row(r).iter());
    }
}

fn read_row_major(m: &mut DMatrix<f64>, theta: &[f64], off: usize) -> usize {
    let cols = m.ncols();
    for r in 0..m.nrows() {
        for c in 0..cols {
            m[(r, c)] = theta[off + r * cols + c];
        }
    }
    off + m.len()
}

/// `V(x, c) = (x - x_f(c))' L(c) L(c)' (x - x_f(c))`, where `L(c)` is lower
/// triangular with its `n(n+1)/2` free entries produced by one network and
/// the reference point `x_f(c)` by another.
#[derive(Debug, Clone, PartialEq)]
pub struct PsdNet {
    pub states: usize,
    pub factor: Mlp,
    pub reference: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsdGradients {
    pub x: DVector<f64>,
    /// In [`PsdNet::flatten`] order.
    pub params: Vec<f64>,
}

impl PsdNet {
    pub fn random<R: Rng + ?Sized>(states: usize, context: usize, hidden: usize, rng: &mut R) -> Self {
        PsdNet {
            states,
            factor: Mlp::random(context, hidden, states * (states + 1) / 2, rng),
            reference: Mlp::random(context, hidden, states, rng),
        }
    }

    pub fn n_params(&self) -> usize {
        self.factor.n_params() + self.reference.n_params()
    }

    /// Lower-triangular factor; entries filled row by row.
    pub fn factor_matrix(&self, c: &DVector<f64>) -> DMatrix<f64> {
        self.tri(&self.factor.eval(c))
    }

    fn tri(&self, entries: &DVector<f64>) -> DMatrix<f64> {
        let n = self.states;
        let mut l = DMatrix::zeros(n, n);
        let mut k = 0;
        for a in 0..n {
            for b in 0..=a {
                l[(a, b)] = entries[k];
                k += 1;
            }
        }
        l
    }

    pub fn weight_matrix(&self, c: &DVector<f64>) -> DMatrix<f64> {
        let l = self.factor_matrix(c);
        &l * l.transpose()
    }

    pub fn reference_point(&self, c: &DVector<f64>) -> DVector<f64> {
        self.reference.eval(c)
    }

    fn check(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.states {
            return Err(Error::invalid("state dimension does not match the PSD net"));
        }
        Ok(())
    }

    pub fn value(&self, x: &DVector<f64>, c: &DVector<f64>) -> Result<f64> {
        self.check(x)?;
        let d = x - self.reference_point(c);
        let y = self.factor_matrix(c).transpose() * d;
        Ok(y.norm_squared())
    }

    pub fn gradients(&self, x: &DVector<f64>, c: &DVector<f64>) -> Result<PsdGradients> {
        self.check(x)?;
        let n = self.states;
        let (h_l, l_entries) = self.factor.forward(c);
        let (h_r, xf) = self.reference.forward(c);
        let l = self.tri(&l_entries);
        let d = x - xf;
        let y = l.transpose() * &d;
        let gx = 2.0 * &l * &y;
        // dV/dL_ab = 2 d_a y_b on the lower triangle
        let mut g_entries = DVector::zeros(l_entries.len());
        let mut k = 0;
        for a in 0..n {
            for b in 0..=a {
                g_entries[k] = 2.0 * d[a] * y[b];
                k += 1;
            }
        }
        let g_xf = -&gx;
        let mut params = self.factor.backward(c, &h_l, &g_entries);
        params.extend(self.reference.backward(c, &h_r, &g_xf));
        Ok(PsdGradients { x: gx, params })
    }

    /// Parameters as `(factor net, reference net)`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.factor.flatten();
        v.extend(self.reference.flatten());
        v
    }

    pub fn unflatten(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.n_params() {
            return Err(Error::invalid("PSD parameter vector has the wrong length"));
        }
        let off = self.factor.unflatten(theta);
        self.reference.unflatten(&theta[off..]);
        Ok(())
    }
}
