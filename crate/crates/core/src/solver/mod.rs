//! Dense convex-program solver.
//!
//! Programs have the form
//!
//! ```text
//! minimize    1/2 z'Hz + c'z + k + sum_a rho_a max(0, a'z + beta_a)^2
//! subject to  G z <= g,   lower <= z <= upper
//! ```
//!
//! with `H` PSD and `rho_a >= 0`. The objective is C^1 with a piecewise
//! constant generalized Hessian, so a primal-dual interior-point method with
//! semismooth Newton steps applies directly. Converged iterates are polished
//! by an equality-constrained solve on the identified active set, which
//! yields multipliers accurate to machine precision.
//!
//! Variables whose Newton block is diagonal (no Hessian coupling, no atoms,
//! at most one such variable per row, e.g. slack variables) are eliminated
//! by a Schur complement, so the dense factorization only involves the
//! remaining "core" variables.

mod ipm;
mod newton;
mod sensitivity;

use std::io::Write;

pub use ipm::{solve, solve_warm, SolveOptions};
pub use sensitivity::{lagrangian_param_gradient, ParameterDependency};

use crate::error::{Error, Result};

/// Sparse row vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseRow {
    pub idx: Vec<usize>,
    pub val: Vec<f64>,
}

impl SparseRow {
    pub fn new() -> Self {
        SparseRow::default()
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, f64)>) -> Self {
        let mut r = SparseRow::new();
        for (i, v) in pairs {
            r.push(i, v);
        }
        r
    }

    pub fn from_dense(v: &[f64]) -> Self {
        SparseRow::from_pairs(v.iter().copied().enumerate().filter(|(_, x)| *x != 0.0))
    }

    pub fn push(&mut self, i: usize, v: f64) {
        self.idx.push(i);
        self.val.push(v);
    }

    #[inline]
    pub fn dot(&self, z: &[f64]) -> f64 {
        self.idx.iter().zip(&self.val).map(|(&i, &v)| v * z[i]).sum()
    }

    /// `out += alpha * row`.
    #[inline]
    pub fn axpy(&self, alpha: f64, out: &mut [f64]) {
        for (&i, &v) in self.idx.iter().zip(&self.val) {
            out[i] += alpha * v;
        }
    }

    pub fn to_dense(&self, n: usize) -> Vec<f64> {
        let mut d = vec![0.0; n];
        self.axpy(1.0, &mut d);
        d
    }
}

/// `weight * max(0, row'z + offset)^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct SquaredRelu {
    pub weight: f64,
    pub row: SparseRow,
    pub offset: f64,
}

impl SquaredRelu {
    #[inline]
    pub fn activation(&self, z: &[f64]) -> f64 {
        self.row.dot(z) + self.offset
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvexProgram {
    n: usize,
    /// Upper-triangle entries `(i, j, v)`, `i <= j`, of the symmetric `H`.
    hessian: Vec<(usize, usize, f64)>,
    pub linear: Vec<f64>,
    pub constant: f64,
    pub atoms: Vec<SquaredRelu>,
    pub rows: Vec<SparseRow>,
    pub rhs: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ConvexProgram {
    pub fn new(n: usize) -> Self {
        ConvexProgram {
            n,
            hessian: Vec::new(),
            linear: vec![0.0; n],
            constant: 0.0,
            atoms: Vec::new(),
            rows: Vec::new(),
            rhs: Vec::new(),
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    /// Adds `v` to `H[i][j]` and `H[j][i]` (once on the diagonal).
    pub fn add_hessian(&mut self, i: usize, j: usize, v: f64) {
        if v != 0.0 {
            self.hessian.push((i.min(j), i.max(j), v));
        }
    }

    pub fn add_linear(&mut self, i: usize, v: f64) {
        self.linear[i] += v;
    }

    pub fn add_atom(&mut self, weight: f64, row: SparseRow, offset: f64) {
        self.atoms.push(SquaredRelu { weight, row, offset });
    }

    /// Adds `row'z <= rhs` and returns its index.
    pub fn add_row(&mut self, row: SparseRow, rhs: f64) -> usize {
        self.rows.push(row);
        self.rhs.push(rhs);
        self.rows.len() - 1
    }

    pub fn set_bounds(&mut self, i: usize, lower: f64, upper: f64) {
        self.lower[i] = lower;
        self.upper[i] = upper;
    }

    /// Hessian entries with duplicates merged, sorted by `(i, j)`.
    pub fn hessian_entries(&self) -> Vec<(usize, usize, f64)> {
        let mut h = self.hessian.clone();
        h.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut out: Vec<(usize, usize, f64)> = Vec::with_capacity(h.len());
        for (i, j, v) in h {
            match out.last_mut() {
                Some(last) if last.0 == i && last.1 == j => last.2 += v,
                _ => out.push((i, j, v)),
            }
        }
        out.retain(|e| e.2 != 0.0);
        out
    }

    pub fn hessian_dense(&self) -> Vec<Vec<f64>> {
        let mut h = vec![vec![0.0; self.n]; self.n];
        for &(i, j, v) in &self.hessian {
            h[i][j] += v;
            if i != j {
                h[j][i] += v;
            }
        }
        h
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n;
        let in_range = |r: &SparseRow| r.idx.iter().all(|&i| i < n) && r.idx.len() == r.val.len();
        if self.linear.len() != n || self.lower.len() != n || self.upper.len() != n {
            return Err(Error::invalid("program vectors do not match the variable count"));
        }
        if self.rows.len() != self.rhs.len() || !self.rows.iter().all(in_range) || !self.atoms.iter().all(|a| in_range(&a.row)) {
            return Err(Error::invalid("constraint rows are malformed"));
        }
        if self.hessian.iter().any(|&(_, j, v)| j >= n || !v.is_finite()) {
            return Err(Error::invalid("Hessian entry out of range or non-finite"));
        }
        if self.atoms.iter().any(|a| !(a.weight >= 0.0) || !a.offset.is_finite()) {
            return Err(Error::invalid("squared-ReLU weights must be nonnegative"));
        }
        if (0..n).any(|i| !(self.lower[i] <= self.upper[i]) || self.lower[i] == f64::INFINITY || self.upper[i] == f64::NEG_INFINITY) {
            return Err(Error::invalid("variable bounds are inconsistent"));
        }
        if self.linear.iter().chain(&self.rhs).any(|v| !v.is_finite()) || !self.constant.is_finite() {
            return Err(Error::invalid("non-finite program data"));
        }
        Ok(())
    }

    pub fn objective(&self, z: &[f64]) -> f64 {
        let mut f = self.constant;
        for &(i, j, v) in &self.hessian {
            f += if i == j { 0.5 * v * z[i] * z[i] } else { v * z[i] * z[j] };
        }
        f += self.linear.iter().zip(z).map(|(c, x)| c * x).sum::<f64>();
        for a in &self.atoms {
            let t = a.activation(z).max(0.0);
            f += a.weight * t * t;
        }
        f
    }

    pub fn gradient(&self, z: &[f64]) -> Vec<f64> {
        let mut g = self.linear.clone();
        for &(i, j, v) in &self.hessian {
            g[i] += v * z[j];
            if i != j {
                g[j] += v * z[i];
            }
        }
        for a in &self.atoms {
            let t = a.activation(z);
            if t > 0.0 {
                a.row.axpy(2.0 * a.weight * t, &mut g);
            }
        }
        g
    }

    /// Largest violation of rows and bounds at `z`.
    pub fn max_violation(&self, z: &[f64]) -> f64 {
        let rows = self.rows.iter().zip(&self.rhs).map(|(r, g)| r.dot(z) - g);
        let bounds = (0..self.n).flat_map(|i| [self.lower[i] - z[i], z[i] - self.upper[i]]);
        rows.chain(bounds).fold(0.0, f64::max)
    }

    /// Substitutes `z_i = v` for every `(i, v)` in `fixed` and returns the
    /// reduced program together with the indices of the remaining variables.
    /// Rows left without free variables are dropped after checking them.
    pub fn fix_variables(&self, fixed: &[(usize, f64)]) -> Result<ReducedProgram> {
        let mut value = vec![None; self.n];
        for &(i, v) in fixed {
            if i >= self.n || !v.is_finite() {
                return Err(Error::invalid("fixed variable out of range or non-finite"));
            }
            value[i] = Some(v);
        }
        let free: Vec<usize> = (0..self.n).filter(|&i| value[i].is_none()).collect();
        let mut pos = vec![usize::MAX; self.n];
        for (k, &i) in free.iter().enumerate() {
            pos[i] = k;
        }
        let mut p = ConvexProgram::new(free.len());
        p.constant = self.constant;
        for (i, v) in fixed_iter(&value) {
            p.constant += self.linear[i] * v;
        }
        for &k in &free {
            p.linear[pos[k]] = self.linear[k];
            p.lower[pos[k]] = self.lower[k];
            p.upper[pos[k]] = self.upper[k];
        }
        for &(i, j, v) in &self.hessian {
            match (value[i], value[j]) {
                (None, None) => p.add_hessian(pos[i], pos[j], v),
                (Some(xi), None) => p.linear[pos[j]] += v * xi,
                (None, Some(xj)) => p.linear[pos[i]] += v * xj,
                (Some(xi), Some(xj)) => p.constant += if i == j { 0.5 * v * xi * xi } else { v * xi * xj },
            }
        }
        let split = |row: &SparseRow| {
            let mut r = SparseRow::new();
            let mut shift = 0.0;
            for (&i, &v) in row.idx.iter().zip(&row.val) {
                match value[i] {
                    Some(x) => shift += v * x,
                    None => r.push(pos[i], v),
                }
            }
            (r, shift)
        };
        for a in &self.atoms {
            let (row, shift) = split(&a.row);
            if row.idx.is_empty() {
                let t = (a.offset + shift).max(0.0);
                p.constant += a.weight * t * t;
            } else {
                p.add_atom(a.weight, row, a.offset + shift);
            }
        }
        let mut row_map = Vec::with_capacity(self.rows.len());
        for (r, &g) in self.rows.iter().zip(&self.rhs) {
            let (row, shift) = split(r);
            if row.idx.is_empty() {
                if shift > g + 1e-9 * (1.0 + g.abs()) {
                    return Err(Error::Infeasible("a row with only fixed variables is violated".into()));
                }
                row_map.push(None);
            } else {
                row_map.push(Some(p.add_row(row, g - shift)));
            }
        }
        Ok(ReducedProgram { program: p, free, fixed: fixed.to_vec(), row_map, full_n: self.n })
    }

    /// Writes the program as plain-text dense matrices for offline checking.
    ///
    /// Layout: a header line `n m atoms`, then `H` (n rows), `c`, the constant,
    /// `G` (m rows), `g`, `lower`, `upper`, and one line per atom
    /// `weight offset a_1 .. a_n`. Values are whitespace separated, row-major.
    pub fn write_dump<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let line = |w: &mut W, v: &[f64]| -> std::io::Result<()> {
            let s: Vec<String> = v.iter().map(|x| format!("{x:e}")).collect();
            writeln!(w, "{}", s.join(" "))
        };
        writeln!(w, "{} {} {}", self.n, self.rows.len(), self.atoms.len())?;
        for row in self.hessian_dense() {
            line(&mut w, &row)?;
        }
        line(&mut w, &self.linear)?;
        line(&mut w, &[self.constant])?;
        for r in &self.rows {
            line(&mut w, &r.to_dense(self.n))?;
        }
        line(&mut w, &self.rhs)?;
        line(&mut w, &self.lower)?;
        line(&mut w, &self.upper)?;
        for a in &self.atoms {
            let mut v = vec![a.weight, a.offset];
            v.extend(a.row.to_dense(self.n));
            line(&mut w, &v)?;
        }
        Ok(())
    }
}

fn fixed_iter(value: &[Option<f64>]) -> impl Iterator<Item = (usize, f64)> + '_ {
    value.iter().enumerate().filter_map(|(i, v)| v.map(|x| (i, x)))
}

/// Program with some variables substituted out.
#[derive(Debug, Clone)]
pub struct ReducedProgram {
    pub program: ConvexProgram,
    pub free: Vec<usize>,
    pub fixed: Vec<(usize, f64)>,
    /// Original row index to reduced row index.
    pub row_map: Vec<Option<usize>>,
    full_n: usize,
}

impl ReducedProgram {
    /// Maps a result of the reduced program back to the original variables
    /// and rows. Multipliers of dropped rows and of the bounds of fixed
    /// variables are zero.
    pub fn expand(&self, r: &SolveResult) -> SolveResult {
        let mut z = vec![0.0; self.full_n];
        let mut lower = vec![0.0; self.full_n];
        let mut upper = vec![0.0; self.full_n];
        for (k, &i) in self.free.iter().enumerate() {
            z[i] = r.z[k];
            lower[i] = r.lambda_lower[k];
            upper[i] = r.lambda_upper[k];
        }
        for &(i, v) in &self.fixed {
            z[i] = v;
        }
        let lambda = self.row_map.iter().map(|m| m.map_or(0.0, |k| r.lambda[k])).collect();
        let degenerate_rows = r
            .degenerate_rows
            .iter()
            .filter_map(|&k| self.row_map.iter().position(|m| *m == Some(k)))
            .collect();
        SolveResult { z, lambda, lambda_lower: lower, lambda_upper: upper, degenerate_rows, ..r.clone() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub z: Vec<f64>,
    /// Multipliers of `G z <= g`.
    pub lambda: Vec<f64>,
    pub lambda_lower: Vec<f64>,
    pub lambda_upper: Vec<f64>,
    pub objective: f64,
    /// `|grad f + G'lambda - lambda_lower + lambda_upper|_inf`.
    pub stationarity: f64,
    /// Largest `lambda_i * slack_i`.
    pub complementarity: f64,
    pub primal_residual: f64,
    pub iterations: usize,
    pub wall_time: f64,
    pub polished: bool,
    /// Rows that are active with a (near) zero multiplier.
    pub degenerate_rows: Vec<usize>,
    pub degenerate: bool,
}

impl SolveResult {
    /// Equality of everything except the wall-clock time.
    pub fn same_solution(&self, other: &SolveResult) -> bool {
        SolveResult { wall_time: 0.0, ..self.clone() } == SolveResult { wall_time: 0.0, ..other.clone() }
    }
}
