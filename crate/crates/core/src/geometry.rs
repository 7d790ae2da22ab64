//! H-polytopes, one-step controllable sets and the maximal control
//! invariant set of the nominal system.
//!
//! The invariant set ignores the disturbance: Gaussian noise has unbounded
//! support, so no nonempty robust invariant set exists.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::env::{Action, LtiSystem, State};
use crate::error::{Error, Result};
use crate::solver::{self, ConvexProgram, SolveOptions, SparseRow};

/// Row cap during Fourier-Motzkin elimination.
pub const MAX_ROWS: usize = 10_000;

/// `{x : G x <= g}` with unit-norm rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Polytope {
    dim: usize,
    rows: Vec<Vec<f64>>,
    offsets: Vec<f64>,
    pub pruned: bool,
}

impl Polytope {
    /// Normalizes rows and drops trivially true ones (`0 <= g`, `g >= 0`).
    pub fn new(dim: usize, rows: Vec<Vec<f64>>, offsets: Vec<f64>) -> Result<Self> {
        if rows.len() != offsets.len() || rows.iter().any(|r| r.len() != dim) {
            return Err(Error::invalid("polytope rows and offsets do not match"));
        }
        let mut p = Polytope { dim, rows: Vec::new(), offsets: Vec::new(), pruned: false };
        for (r, g) in rows.into_iter().zip(offsets) {
            if !g.is_finite() || r.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("polytope data must be finite"));
            }
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm <= 1e-12 {
                if g < -1e-12 {
                    return Err(Error::Infeasible("polytope has a row 0 <= negative".into()));
                }
                continue;
            }
            p.rows.push(r.iter().map(|v| v / norm).collect());
            p.offsets.push(g / norm);
        }
        Ok(p)
    }

    /// `{x : |x_i| <= bound}`.
    pub fn hypercube(dim: usize, bound: f64) -> Self {
        let mut rows = Vec::new();
        let mut offsets = Vec::new();
        for i in 0..dim {
            for sign in [1.0, -1.0] {
                let mut r = vec![0.0; dim];
                r[i] = sign;
                rows.push(r);
                offsets.push(bound);
            }
        }
        Polytope { dim, rows, offsets, pruned: true }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    /// `max_i (G_i x - g_i)`; `-inf` for the whole space.
    pub fn max_residual(&self, x: &[f64]) -> f64 {
        self.rows
            .iter()
            .zip(&self.offsets)
            .map(|(r, g)| dot(r, x) - g)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        self.max_residual(x) <= tol
    }

    pub fn intersect(&self, other: &Polytope) -> Result<Polytope> {
        if self.dim != other.dim {
            return Err(Error::invalid("dimension mismatch"));
        }
        let mut out = self.clone();
        out.rows.extend(other.rows.iter().cloned());
        out.offsets.extend(&other.offsets);
        out.pruned = false;
        Ok(out)
    }

    /// Scales the set about `center` by `factor`.
    pub fn scaled(&self, center: &[f64], factor: f64) -> Polytope {
        let offsets = self.rows.iter().zip(&self.offsets).map(|(r, g)| dot(r, center) + factor * (g - dot(r, center))).collect();
        Polytope { offsets, ..self.clone() }
    }

    /// `max d'x` over the set, `None` if the LP fails (e.g. unbounded).
    pub fn support(&self, d: &[f64]) -> Option<f64> {
        lp_max(self.dim, &self.rows, &self.offsets, d)
    }

    /// Removes rows implied by the others.
    pub fn prune(&self) -> Result<Polytope> {
        let keep = prune_rows(self.dim, &self.rows, &self.offsets)?;
        let rows = keep.iter().map(|&i| self.rows[i].clone()).collect();
        let offsets = keep.iter().map(|&i| self.offsets[i]).collect();
        Ok(Polytope { dim: self.dim, rows, offsets, pruned: true })
    }

    /// Center and radius of the largest inscribed ball.
    pub fn chebyshev_center(&self) -> Result<(Vec<f64>, f64)> {
        let n = self.dim;
        let mut p = ConvexProgram::new(n + 1);
        for (r, &g) in self.rows.iter().zip(&self.offsets) {
            let mut row = SparseRow::from_dense(r);
            row.push(n, 1.0);
            p.add_row(row, g);
        }
        p.set_bounds(n, 0.0, f64::INFINITY);
        p.add_linear(n, -1.0);
        let r = solver::solve(&p, &SolveOptions::default())?;
        let radius = r.z[n];
        if radius <= 1e-12 {
            return Err(Error::Infeasible("polytope has an empty interior".into()));
        }
        Ok((r.z[..n].to_vec(), radius))
    }

    /// `true` when every row of `other` is implied by `self`, within `tol`.
    pub fn is_subset_of(&self, other: &Polytope, tol: f64) -> bool {
        other.rows.iter().zip(&other.offsets).all(|(r, &g)| self.support(r).is_some_and(|h| h <= g + tol))
    }

    /// Vertices of a bounded, pruned planar polytope in counter-clockwise
    /// order: one per facet.
    pub fn vertices_2d(&self) -> Result<Vec<[f64; 2]>> {
        if self.dim != 2 || self.rows.len() < 3 {
            return Err(Error::invalid("vertices are only computed for bounded planar polytopes"));
        }
        let p = if self.pruned { self.clone() } else { self.prune()? };
        let mut order: Vec<usize> = (0..p.rows.len()).collect();
        order.sort_by(|&i, &j| angle(&p.rows[i]).total_cmp(&angle(&p.rows[j])));
        let k = order.len();
        (0..k)
            .map(|t| {
                let (i, j) = (order[t], order[(t + 1) % k]);
                let (a, b) = (&p.rows[i], &p.rows[j]);
                let det = a[0] * b[1] - a[1] * b[0];
                if det.abs() < 1e-14 {
                    return Err(Error::invalid("parallel adjacent facets"));
                }
                let (g, h) = (p.offsets[i], p.offsets[j]);
                Ok([(g * b[1] - h * a[1]) / det, (a[0] * h - b[0] * g) / det])
            })
            .collect()
    }

    /// One row per facet: `G_1, ..., G_n, g`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (1..=self.dim).map(|i| format!("g{i}")).collect();
        header.push("offset".into());
        out.write_record(&header)?;
        for (r, g) in self.rows.iter().zip(&self.offsets) {
            let mut rec: Vec<String> = r.iter().map(|v| v.to_string()).collect();
            rec.push(g.to_string());
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn angle(r: &[f64]) -> f64 {
    r[1].atan2(r[0])
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn lp_max(dim: usize, rows: &[Vec<f64>], offsets: &[f64], d: &[f64]) -> Option<f64> {
    let mut p = ConvexProgram::new(dim);
    for (r, &g) in rows.iter().zip(offsets) {
        p.add_row(SparseRow::from_dense(r), g);
    }
    for (i, &v) in d.iter().enumerate() {
        p.add_linear(i, -v);
    }
    solver::solve(&p, &SolveOptions::default()).ok().map(|r| -r.objective)
}

/// Indices of the rows that are not implied by the others. Row `i` is
/// redundant when `max G_i x` subject to the other kept rows (and row `i`
/// loosened, to keep the LP bounded) does not exceed `g_i`.
fn prune_rows(dim: usize, rows: &[Vec<f64>], offsets: &[f64]) -> Result<Vec<usize>> {
    // parallel duplicates first: keep the tightest offset per direction
    let mut keep: Vec<usize> = Vec::new();
    for i in 0..rows.len() {
        match keep.iter().position(|&k| rows[k].iter().zip(&rows[i]).all(|(a, b)| (a - b).abs() <= 1e-9)) {
            Some(pos) if offsets[i] < offsets[keep[pos]] => keep[pos] = i,
            Some(_) => {}
            None => keep.push(i),
        }
    }
    keep.sort_unstable();
    let mut t = 0;
    while t < keep.len() {
        let i = keep[t];
        let mut sub_rows = Vec::with_capacity(keep.len());
        let mut sub_offsets = Vec::with_capacity(keep.len());
        for &k in &keep {
            sub_rows.push(rows[k].clone());
            sub_offsets.push(if k == i { offsets[k] + 1.0 } else { offsets[k] });
        }
        match lp_max(dim, &sub_rows, &sub_offsets, &rows[i]) {
            Some(h) if h <= offsets[i] + 1e-9 * (1.0 + offsets[i].abs()) => {
                keep.remove(t);
            }
            Some(_) => t += 1,
            None => {
                // an infeasible or unbounded subproblem: keep the row
                t += 1;
            }
        }
    }
    Ok(keep)
}

/// Eliminates the last coordinate of `{y : rows y <= offsets}`.
fn fourier_motzkin(rows: &[Vec<f64>], offsets: &[f64]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let last = rows.first().map_or(0, |r| r.len() - 1);
    let (mut pos, mut neg, mut zero) = (Vec::new(), Vec::new(), Vec::new());
    for (i, r) in rows.iter().enumerate() {
        let c = r[last];
        if c > 1e-14 {
            pos.push(i);
        } else if c < -1e-14 {
            neg.push(i);
        } else {
            zero.push(i);
        }
    }
    if zero.len() + pos.len() * neg.len() > MAX_ROWS {
        return Err(Error::Resource(format!("Fourier-Motzkin elimination exceeds {MAX_ROWS} rows")));
    }
    let mut out_rows = Vec::new();
    let mut out_offsets = Vec::new();
    for &i in &zero {
        out_rows.push(rows[i][..last].to_vec());
        out_offsets.push(offsets[i]);
    }
    for &i in &pos {
        for &j in &neg {
            let (a, b) = (rows[i][last], -rows[j][last]);
            out_rows.push((0..last).map(|k| rows[i][k] / a + rows[j][k] / b).collect());
            out_offsets.push(offsets[i] / a + offsets[j] / b);
        }
    }
    Ok((out_rows, out_offsets))
}

/// `{x : exists u, |u|_inf <= action_bound, A x + B u in P}` for the
/// nominal system.
pub fn pre_set(p: &Polytope, system: &LtiSystem) -> Result<Polytope> {
    let (n, m) = (2, 2);
    if p.dim != n {
        return Err(Error::invalid("polytope dimension does not match the state"));
    }
    let mut rows = Vec::new();
    let mut offsets = Vec::new();
    for (r, &g) in p.rows.iter().zip(&p.offsets) {
        let mut row = vec![0.0; n + m];
        for k in 0..n {
            for i in 0..n {
                row[i] += r[k] * system.a[(k, i)];
            }
            for j in 0..m {
                row[n + j] += r[k] * system.b[(k, j)];
            }
        }
        rows.push(row);
        offsets.push(g);
    }
    for j in 0..m {
        for sign in [1.0, -1.0] {
            let mut row = vec![0.0; n + m];
            row[n + j] = sign;
            rows.push(row);
            offsets.push(system.action_bound);
        }
    }
    for _ in 0..m {
        let (r, o) = fourier_motzkin(&rows, &offsets)?;
        let dim = r.first().map_or(0, |x| x.len());
        let q = Polytope::new(dim, r, o)?;
        let q = if q.rows.is_empty() { q } else { q.prune()? };
        rows = q.rows;
        offsets = q.offsets;
    }
    let mut out = Polytope::new(n, rows, offsets)?;
    out.pruned = true;
    Ok(out)
}

/// Result of the backward fixed-point iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct InvariantSet {
    pub set: Polytope,
    pub iterations: usize,
    /// `false` if the iteration cap was reached; `set` is then the last iterate.
    pub converged: bool,
}

/// `Omega_0 = C`, `Omega_{k+1} = pre(Omega_k) ∩ Omega_k`, stopped when no
/// facet of `Omega_k` moves by more than `tol`.
pub fn maximal_control_invariant(system: &LtiSystem, c: &Polytope, tol: f64, max_iter: usize) -> Result<InvariantSet> {
    let mut omega = c.prune()?;
    for k in 1..=max_iter {
        let next = pre_set(&omega, system)?.intersect(&omega)?.prune()?;
        if next.rows.is_empty() {
            return Err(Error::Infeasible("invariant set iteration lost all rows".into()));
        }
        let stable = next.is_subset_of(&omega, tol) && omega.is_subset_of(&next, tol);
        omega = next;
        if stable {
            return Ok(InvariantSet { set: omega, iterations: k, converged: true });
        }
    }
    log::warn!("invariant set iteration stopped after {max_iter} iterations");
    Ok(InvariantSet { set: omega, iterations: max_iter, converged: false })
}

/// Smallest-norm admissible action keeping the nominal successor in `p`
/// (offsets loosened by `tol`), or `None`.
pub fn admissible_action(p: &Polytope, system: &LtiSystem, x: &State, tol: f64) -> Option<Action> {
    let ax = system.a * x;
    let mut prog = ConvexProgram::new(2);
    prog.add_hessian(0, 0, 2.0);
    prog.add_hessian(1, 1, 2.0);
    for (r, &g) in p.rows.iter().zip(&p.offsets) {
        let row = [r[0] * system.b[(0, 0)] + r[1] * system.b[(1, 0)], r[0] * system.b[(0, 1)] + r[1] * system.b[(1, 1)]];
        prog.add_row(SparseRow::from_dense(&row), g + tol - (r[0] * ax[0] + r[1] * ax[1]));
    }
    for j in 0..2 {
        prog.set_bounds(j, -system.action_bound, system.action_bound);
    }
    let r = solver::solve(&prog, &SolveOptions::default()).ok()?;
    let u = Action::new(r.z[0], r.z[1]);
    let next = ax + system.b * u;
    (system.action_in_box(&u, 1e-9) && p.contains(next.as_slice(), tol + 1e-9)).then_some(u)
}

/// Ray casting from the Chebyshev center in uniformly random directions.
pub fn sample_boundary<R: Rng + ?Sized>(p: &Polytope, count: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    let (center, _) = p.chebyshev_center()?;
    (0..count)
        .map(|_| {
            let d: Vec<f64> = loop {
                let d: Vec<f64> = (0..p.dim).map(|_| StandardNormal.sample(rng)).collect();
                let norm = d.iter().map(|v: &f64| v * v).sum::<f64>().sqrt();
                if norm > 1e-12 {
                    break d.iter().map(|v| v / norm).collect();
                }
            };
            Ok(ray_exit(p, &center, &d)?)
        })
        .collect()
}

/// Boundary sampler with a precomputed Chebyshev center.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundarySampler {
    pub set: Polytope,
    pub center: Vec<f64>,
}

impl BoundarySampler {
    pub fn new(set: Polytope) -> Result<Self> {
        let (center, _) = set.chebyshev_center()?;
        Ok(BoundarySampler { set, center })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> State {
        let d = loop {
            let d = State::new(StandardNormal.sample(rng), StandardNormal.sample(rng));
            if d.norm() > 1e-12 {
                break d.normalize();
            }
        };
        let x = ray_exit(&self.set, &self.center, d.as_slice()).expect("bounded set");
        State::new(x[0], x[1])
    }
}

/// Point where the ray `center + r d` leaves the polytope.
pub fn ray_exit(p: &Polytope, center: &[f64], d: &[f64]) -> Result<Vec<f64>> {
    let r = p
        .rows
        .iter()
        .zip(&p.offsets)
        .filter_map(|(row, g)| {
            let den = dot(row, d);
            (den > 0.0).then(|| (g - dot(row, center)) / den)
        })
        .fold(f64::INFINITY, f64::min);
    if !r.is_finite() {
        return Err(Error::invalid("ray does not leave the polytope"));
    }
    Ok(center.iter().zip(d).map(|(c, v)| c + r * v).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn interval(lo: f64, hi: f64) -> Polytope {
        Polytope::new(1, vec![vec![1.0], vec![-1.0]], vec![hi, -lo]).unwrap()
    }

    #[test]
    fn fourier_motzkin_of_a_triangle() {
        // {x >= 0, u >= 0, x + u <= 1} projected onto x is [0, 1]
        let (r, o) = fourier_motzkin(&[vec![-1.0, 0.0], vec![0.0, -1.0], vec![1.0, 1.0]], &[0.0, 0.0, 1.0]).unwrap();
        let p = Polytope::new(1, r, o).unwrap().prune().unwrap();
        assert_eq!(p.n_rows(), 2);
        assert!((p.support(&[1.0]).unwrap() - 1.0).abs() < 1e-8);
        assert!((p.support(&[-1.0]).unwrap()).abs() < 1e-8);
        let _ = interval(0.0, 1.0);
    }

    #[test]
    fn pre_set_without_control_authority() {
        let sys = LtiSystem { b: Matrix2::zeros(), ..LtiSystem::default() };
        let p = Polytope::hypercube(2, 3.0);
        let pre = pre_set(&p, &sys).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..2000 {
            let x = State::new(rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0));
            let ax = sys.a * x;
            assert_eq!(pre.contains(x.as_slice(), 1e-9), p.contains(ax.as_slice(), 1e-9), "{x:?}");
        }
    }

    #[test]
    fn pre_set_of_whole_space_is_whole_space() {
        let all = Polytope::new(2, vec![], vec![]).unwrap();
        let pre = pre_set(&all, &LtiSystem::default()).unwrap();
        assert_eq!(pre.n_rows(), 0);
    }

    #[test]
    fn pre_set_scalar_analogue() {
        // x+ = a x + b u with decoupled axes; each axis is the interval
        // [-(p + b ub) / a, (p + b ub) / a]
        let (a, b, ub, p) = (1.5, 0.4, 0.5, 2.0);
        let sys = LtiSystem {
            a: Matrix2::new(a, 0.0, 0.0, a),
            b: Matrix2::new(b, 0.0, 0.0, b),
            action_bound: ub,
            ..LtiSystem::default()
        };
        let pre = pre_set(&Polytope::hypercube(2, p), &sys).unwrap();
        let expected = (p + b * ub) / a;
        assert!((pre.support(&[1.0, 0.0]).unwrap() - expected).abs() < 1e-8);
        assert!((pre.support(&[0.0, -1.0]).unwrap() - expected).abs() < 1e-8);
        // gridding check on one axis
        for k in 0..=200 {
            let x = -3.0 + 6.0 * k as f64 / 200.0;
            let reachable = (0..=200).any(|j| {
                let u = -ub + 2.0 * ub * j as f64 / 200.0;
                (a * x + b * u).abs() <= p + 1e-12
            });
            if (x.abs() - expected).abs() > 0.02 {
                assert_eq!(reachable, pre.contains(&[x, 0.0], 1e-9), "x = {x}");
            }
        }
    }

    #[test]
    fn pre_set_is_sound_and_tight() {
        let sys = LtiSystem::default();
        let p = Polytope::hypercube(2, 3.0);
        let pre = pre_set(&p, &sys).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (mut inside, mut outside) = (0, 0);
        for _ in 0..3000 {
            let x = State::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            let r = pre.max_residual(x.as_slice());
            if r <= -1e-6 {
                inside += 1;
                assert!(admissible_action(&p, &sys, &x, 0.0).is_some(), "{x:?}");
            } else if r >= 1e-6 {
                outside += 1;
                assert!(admissible_action(&p, &sys, &x, 0.0).is_none(), "{x:?}");
            }
        }
        assert!(inside > 100 && outside > 100);
    }

    #[test]
    fn pruning_preserves_membership() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut rows = Vec::new();
        let mut offs = Vec::new();
        for _ in 0..30 {
            let t: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            rows.push(vec![t.cos(), t.sin()]);
            offs.push(rng.random_range(1.0..2.0));
        }
        let p = Polytope::new(2, rows, offs).unwrap();
        let q = p.prune().unwrap();
        assert!(q.n_rows() < p.n_rows());
        for _ in 0..10_000 {
            let x = [rng.random_range(-2.5..2.5), rng.random_range(-2.5..2.5)];
            assert_eq!(p.contains(&x, 0.0), q.contains(&x, 0.0));
        }
        assert_eq!(q.vertices_2d().unwrap().len(), q.n_rows());
    }

    #[test]
    fn invariant_box_is_its_own_fixed_point() {
        // strong control authority: every x in C can be kept in C
        let sys = LtiSystem { b: Matrix2::identity() * 10.0, ..LtiSystem::default() };
        let c = Polytope::hypercube(2, 3.0);
        let inv = maximal_control_invariant(&sys, &c, 1e-9, 50).unwrap();
        assert!(inv.converged);
        assert_eq!(inv.iterations, 1);
        assert!(inv.set.is_subset_of(&c, 1e-9) && c.is_subset_of(&inv.set, 1e-9));
    }

    #[test]
    fn invariant_set_iterates_shrink_and_are_invariant() {
        let sys = LtiSystem::default();
        let c = Polytope::hypercube(2, 3.0);
        let mut prev = c.clone();
        for _ in 0..5 {
            let next = pre_set(&prev, &sys).unwrap().intersect(&prev).unwrap().prune().unwrap();
            assert!(next.is_subset_of(&prev, 1e-9));
            prev = next;
        }
        let inv = maximal_control_invariant(&sys, &c, 1e-9, 200).unwrap();
        assert!(inv.converged);
        assert!(inv.set.is_subset_of(&c, 1e-9));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for x in sample_boundary(&inv.set, 1000, &mut rng).unwrap() {
            assert!(admissible_action(&inv.set, &sys, &State::new(x[0], x[1]), 1e-9).is_some());
        }
    }

    #[test]
    fn boundary_samples() {
        let sq = Polytope::hypercube(2, 1.0);
        let x = ray_exit(&sq, &[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-15 && x[1].abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts = sample_boundary(&sq, 10_000, &mut rng).unwrap();
        let mut hits = [0usize; 4];
        for p in &pts {
            assert!(sq.max_residual(p).abs() <= 1e-9);
            for (k, (r, g)) in sq.rows().iter().zip(sq.offsets()).enumerate() {
                if (dot(r, p) - g).abs() <= 1e-9 {
                    hits[k] += 1;
                }
            }
        }
        assert!(hits.iter().all(|&h| h > 1000), "{hits:?}");
    }

    #[test]
    fn chebyshev_center_of_a_box() {
        let p = Polytope::new(2, vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]], vec![3.0, 1.0, 1.0, 1.0]).unwrap();
        let (c, r) = p.chebyshev_center().unwrap();
        assert!((r - 1.0).abs() < 1e-7);
        assert!(p.contains(&c, 0.0));
    }

    #[test]
    fn csv_export() {
        let mut buf = Vec::new();
        Polytope::hypercube(2, 3.0).write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next(), Some("g1,g2,offset"));
        assert_eq!(text.lines().count(), 5);
    }
}
