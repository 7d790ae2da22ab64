use std::time::Instant;

use super::newton::{Constraints, Kind, NewtonSystem};
use super::{ConvexProgram, SolveResult};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    /// Scaled KKT residual tolerance.
    pub tol: f64,
    pub max_iter: usize,
    /// Refine the interior-point solution on its active set.
    pub polish: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { tol: 1e-8, max_iter: 200, polish: true }
    }
}

const SHIFT: f64 = 1e-10;
const STEP_FRACTION: f64 = 0.995;
const POLISH_DELTA: f64 = 1e-8;
const POLISH_START_MU: f64 = 1e-5;
const PATTERN_FLIPS: usize = 6;
const MAX_BACKTRACK: usize = 12;

struct Kkt<'a> {
    p: &'a ConvexProgram,
    cons: Constraints,
    sys: NewtonSystem,
    hessian: Vec<(usize, usize, f64)>,
    /// Scales for stationarity and primal residuals.
    dual_scale: f64,
    primal_scale: f64,
}

struct Point {
    z: Vec<f64>,
    s: Vec<f64>,
    lam: Vec<f64>,
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

impl<'a> Kkt<'a> {
    fn new(p: &'a ConvexProgram) -> Self {
        let cons = Constraints::new(p);
        let sys = NewtonSystem::new(p, &cons);
        let hessian = p.hessian_entries();
        let h_max = hessian.iter().fold(0.0, |m: f64, e| m.max(e.2.abs()));
        let dual_scale = 1.0 + inf_norm(&p.linear).max(h_max);
        let primal_scale = 1.0 + inf_norm(&cons.rhs);
        Kkt { p, cons, sys, hessian, dual_scale, primal_scale }
    }

    fn m(&self) -> usize {
        self.cons.len()
    }

    fn atom_pattern(&self, z: &[f64]) -> Vec<bool> {
        self.p.atoms.iter().map(|a| a.activation(z) > 0.0).collect()
    }

    /// `grad f(z) + F' lam`.
    fn merit_of(&self, rd: &[f64], rp: &[f64], mu: f64) -> f64 {
        inf_norm(rd) / self.dual_scale + inf_norm(rp) / self.primal_scale + mu
    }

    fn merit(&self, pt: &Point) -> f64 {
        self.merit_of(&self.dual_residual(&pt.z, &pt.lam), &self.primal_residual(&pt.z, &pt.s), mu(pt))
    }

    fn dual_residual(&self, z: &[f64], lam: &[f64]) -> Vec<f64> {
        let mut rd = self.p.gradient(z);
        for (r, &l) in self.cons.rows.iter().zip(lam) {
            if l != 0.0 {
                r.axpy(l, &mut rd);
            }
        }
        rd
    }

    /// `F z + s - f`.
    fn primal_residual(&self, z: &[f64], s: &[f64]) -> Vec<f64> {
        self.cons.rows.iter().zip(&self.cons.rhs).zip(s).map(|((r, f), s)| r.dot(z) + s - f).collect()
    }

    /// Starting point from the unit-weight normal equations
    /// `(H + F'F) z = -c + F'f`, shifted into the positive orthant.
    fn initial_point(&mut self) -> Point {
        let m = self.m();
        let n = self.p.n();
        let zero = vec![0.0; n];
        let pattern = self.atom_pattern(&zero);
        let z = if self.sys.factor(&vec![1.0; m], &pattern, 1e-8) {
            let mut rhs: Vec<f64> = self.p.gradient(&zero).iter().map(|g| -g).collect();
            for (r, f) in self.cons.rows.iter().zip(&self.cons.rhs) {
                r.axpy(*f, &mut rhs);
            }
            self.sys.solve(&rhs)
        } else {
            zero
        };
        let mut s: Vec<f64> = self.cons.rows.iter().zip(&self.cons.rhs).map(|(r, f)| f - r.dot(&z)).collect();
        let mut lam: Vec<f64> = s.iter().map(|v| -v).collect();
        if m > 0 {
            let ds = (-1.5 * s.iter().copied().fold(f64::INFINITY, f64::min)).max(0.0);
            let dl = (-1.5 * lam.iter().copied().fold(f64::INFINITY, f64::min)).max(0.0);
            s.iter_mut().for_each(|v| *v += ds);
            lam.iter_mut().for_each(|v| *v += dl);
            let sl: f64 = s.iter().zip(&lam).map(|(a, b)| a * b).sum();
            let (sum_s, sum_l): (f64, f64) = (s.iter().sum(), lam.iter().sum());
            if sl > 0.0 && sum_s > 0.0 && sum_l > 0.0 {
                let (es, el) = (0.5 * sl / sum_l, 0.5 * sl / sum_s);
                s.iter_mut().for_each(|v| *v += es);
                lam.iter_mut().for_each(|v| *v += el);
            }
            for v in s.iter_mut().chain(lam.iter_mut()) {
                if !(*v > 1e-8) {
                    *v = 1.0;
                }
            }
        }
        Point { z, s, lam }
    }

    /// Solves the linearized KKT system for the factored weights.
    fn direction(&self, pt: &Point, rd: &[f64], rp: &[f64], rc: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut rhs: Vec<f64> = rd.iter().map(|v| -v).collect();
        for i in 0..self.m() {
            let d = pt.lam[i] / pt.s[i];
            self.cons.rows[i].axpy(-(d * rp[i] - rc[i] / pt.s[i]), &mut rhs);
        }
        let dz = self.sys.solve(&rhs);
        let ds: Vec<f64> = (0..self.m()).map(|i| -rp[i] - self.cons.rows[i].dot(&dz)).collect();
        let dl = (0..self.m()).map(|i| (-rc[i] - pt.lam[i] * ds[i]) / pt.s[i]).collect();
        (dz, ds, dl)
    }

    fn max_step(pt: &Point, ds: &[f64], dl: &[f64]) -> f64 {
        let mut a: f64 = 1.0;
        for i in 0..pt.s.len() {
            if ds[i] < 0.0 {
                a = a.min(-pt.s[i] / ds[i]);
            }
            if dl[i] < 0.0 {
                a = a.min(-pt.lam[i] / dl[i]);
            }
        }
        a
    }

    /// Farkas check `F'y ~ 0, f'y < 0` on the normalized multipliers.
    fn infeasibility_certificate(&self, lam: &[f64]) -> bool {
        let norm = inf_norm(lam);
        if norm < 1e6 * self.dual_scale {
            return false;
        }
        let mut fy = vec![0.0; self.p.n()];
        let mut gy = 0.0;
        for i in 0..self.m() {
            let y = lam[i] / norm;
            self.cons.rows[i].axpy(y, &mut fy);
            gy += y * self.cons.rhs[i];
        }
        inf_norm(&fy) < 1e-6 && gy < -1e-6
    }

    /// Equality-constrained refinement on the rows flagged in `active` with
    /// the atom pattern of `z` held fixed. Returns a point satisfying the
    /// KKT conditions to `tol`, or `None`.
    fn polish(&mut self, z: &[f64], lam: &[f64], active: &[bool], tol: f64) -> Option<(Vec<f64>, Vec<f64>)> {
        let m = self.m();
        let pattern = self.atom_pattern(z);
        let d: Vec<f64> = active.iter().map(|&a| if a { 1.0 / POLISH_DELTA } else { 0.0 }).collect();
        if !self.sys.factor(&d, &pattern, POLISH_DELTA) {
            return None;
        }
        let mut z = z.to_vec();
        let mut lam: Vec<f64> = (0..m).map(|i| if active[i] { lam[i] } else { 0.0 }).collect();
        for _ in 0..12 {
            let rd = self.model_dual_residual(&z, &lam, &pattern);
            let rp: Vec<f64> =
                (0..m).map(|i| if active[i] { self.cons.rows[i].dot(&z) - self.cons.rhs[i] } else { 0.0 }).collect();
            if inf_norm(&rd) <= 1e-3 * tol * self.dual_scale && inf_norm(&rp) <= 1e-3 * tol * self.primal_scale {
                break;
            }
            let mut rhs: Vec<f64> = rd.iter().map(|v| -v).collect();
            for i in 0..m {
                if active[i] {
                    self.cons.rows[i].axpy(-rp[i] / POLISH_DELTA, &mut rhs);
                }
            }
            let dz = self.sys.solve(&rhs);
            for (zi, di) in z.iter_mut().zip(&dz) {
                *zi += di;
            }
            for i in 0..m {
                if active[i] {
                    lam[i] += (self.cons.rows[i].dot(&dz) + rp[i]) / POLISH_DELTA;
                }
            }
        }
        let lam_scale = 1.0 + inf_norm(&lam);
        if lam.iter().any(|&l| l < -tol * lam_scale) || z.iter().any(|v| !v.is_finite()) {
            return None;
        }
        for l in lam.iter_mut() {
            *l = l.max(0.0);
        }
        let stat = inf_norm(&self.dual_residual(&z, &lam));
        let viol = self.p.max_violation(&z);
        (stat <= tol * self.dual_scale.max(lam_scale) && viol <= tol * self.primal_scale).then_some((z, lam))
    }

    /// Dual residual of the quadratic model with atom pattern fixed.
    fn model_dual_residual(&self, z: &[f64], lam: &[f64], pattern: &[bool]) -> Vec<f64> {
        let mut rd = self.p.linear.clone();
        for &(i, j, v) in &self.hessian {
            rd[i] += v * z[j];
            if i != j {
                rd[j] += v * z[i];
            }
        }
        for (a, &on) in self.p.atoms.iter().zip(pattern) {
            if on {
                a.row.axpy(2.0 * a.weight * a.activation(z), &mut rd);
            }
        }
        for (r, &l) in self.cons.rows.iter().zip(lam) {
            if l != 0.0 {
                r.axpy(l, &mut rd);
            }
        }
        rd
    }

    fn result(&self, z: Vec<f64>, lam: &[f64], iterations: usize, polished: bool, t0: Instant) -> SolveResult {
        let n = self.p.n();
        let mut lambda = vec![0.0; self.p.n_rows()];
        let mut lambda_lower = vec![0.0; n];
        let mut lambda_upper = vec![0.0; n];
        let mut complementarity: f64 = 0.0;
        let mut degenerate_rows = Vec::new();
        let lam_scale = 1.0 + inf_norm(lam);
        for (i, kind) in self.cons.kind.iter().enumerate() {
            let slack = self.cons.rhs[i] - self.cons.rows[i].dot(&z);
            complementarity = complementarity.max((lam[i] * slack).abs());
            match *kind {
                Kind::Row(k) => {
                    lambda[k] = lam[i];
                    let tight = if polished { slack.abs() <= 1e-9 * self.primal_scale } else { slack.abs() <= 1e-6 * self.primal_scale };
                    if tight && lam[i] <= 1e-9 * lam_scale {
                        degenerate_rows.push(k);
                    }
                }
                Kind::Lower(k) => lambda_lower[k] = lam[i],
                Kind::Upper(k) => lambda_upper[k] = lam[i],
            }
        }
        let stationarity = inf_norm(&self.dual_residual(&z, lam));
        SolveResult {
            objective: self.p.objective(&z),
            primal_residual: self.p.max_violation(&z),
            degenerate: !degenerate_rows.is_empty(),
            z,
            lambda,
            lambda_lower,
            lambda_upper,
            stationarity,
            complementarity,
            iterations,
            wall_time: t0.elapsed().as_secs_f64(),
            polished,
            degenerate_rows,
        }
    }

    /// Internal multipliers from a result of the same program.
    fn internal_multipliers(&self, r: &SolveResult) -> Vec<f64> {
        self.cons
            .kind
            .iter()
            .map(|k| match *k {
                Kind::Row(i) => r.lambda[i],
                Kind::Lower(i) => r.lambda_lower[i],
                Kind::Upper(i) => r.lambda_upper[i],
            })
            .collect()
    }
}

fn mu(pt: &Point) -> f64 {
    if pt.s.is_empty() {
        0.0
    } else {
        pt.s.iter().zip(&pt.lam).map(|(s, l)| s * l).sum::<f64>() / pt.s.len() as f64
    }
}

fn check(p: &ConvexProgram, opts: &SolveOptions) -> Result<()> {
    p.validate()?;
    if !(opts.tol > 0.0) || opts.max_iter == 0 {
        return Err(Error::invalid("solver tolerance must be positive and max_iter nonzero"));
    }
    Ok(())
}

/// Solves a convex program with a primal-dual interior-point method.
pub fn solve(p: &ConvexProgram, opts: &SolveOptions) -> Result<SolveResult> {
    check(p, opts)?;
    let t0 = Instant::now();
    let mut kkt = Kkt::new(p);
    let pt = kkt.initial_point();
    run(&mut kkt, pt, opts, t0, 0)
}

/// Solves starting from a previous solution of a program with the same
/// structure. When the previous active set is still optimal the solve
/// finishes after a single polishing step.
pub fn solve_warm(p: &ConvexProgram, opts: &SolveOptions, warm: &SolveResult) -> Result<SolveResult> {
    check(p, opts)?;
    if warm.z.len() != p.n() || warm.lambda.len() != p.n_rows() || warm.lambda_lower.len() != p.n() || warm.lambda_upper.len() != p.n() {
        return Err(Error::invalid("warm start does not match the program dimensions"));
    }
    let t0 = Instant::now();
    let mut kkt = Kkt::new(p);
    let lam = kkt.internal_multipliers(warm);
    let tol = opts.tol.min(1e-9);
    let active: Vec<bool> = (0..kkt.m())
        .map(|i| {
            let slack = kkt.cons.rhs[i] - kkt.cons.rows[i].dot(&warm.z);
            lam[i] > 0.0 || slack.abs() <= 1e-9 * kkt.primal_scale
        })
        .collect();
    if let Some((z, l)) = kkt.polish(&warm.z, &lam, &active, tol) {
        return Ok(kkt.result(z, &l, 1, true, t0));
    }
    let mut pt = kkt.initial_point();
    // keep the warm primal point but re-center the slacks and multipliers
    for i in 0..kkt.m() {
        let slack = kkt.cons.rhs[i] - kkt.cons.rows[i].dot(&warm.z);
        pt.s[i] = slack.max(1e-2);
        pt.lam[i] = lam[i].max(1e-2);
    }
    pt.z = warm.z.clone();
    run(&mut kkt, pt, opts, t0, 1)
}

fn run(kkt: &mut Kkt<'_>, mut pt: Point, opts: &SolveOptions, t0: Instant, start_iter: usize) -> Result<SolveResult> {
    let m = kkt.m();
    let polish_tol = opts.tol.min(1e-9);
    let mut best: Option<(f64, Point)> = None;
    // Piecewise curvature can make the full Newton step cycle between
    // patterns; after repeated flips, steps backtrack on the merit.
    let mut previous: Option<Vec<bool>> = None;
    let mut flips = 0;
    for iter in start_iter..start_iter + opts.max_iter {
        let rd = kkt.dual_residual(&pt.z, &pt.lam);
        let rp = kkt.primal_residual(&pt.z, &pt.s);
        let mu_k = mu(&pt);
        let merit = kkt.merit_of(&rd, &rp, mu_k);
        if !merit.is_finite() {
            break;
        }
        if best.as_ref().is_none_or(|b| merit < b.0) {
            best = Some((merit, Point { z: pt.z.clone(), s: pt.s.clone(), lam: pt.lam.clone() }));
        }
        let converged = inf_norm(&rd) <= opts.tol * kkt.dual_scale && inf_norm(&rp) <= opts.tol * kkt.primal_scale && mu_k <= opts.tol;
        if opts.polish && (converged || mu_k < POLISH_START_MU) {
            let active: Vec<bool> = (0..m).map(|i| pt.s[i] < pt.lam[i]).collect();
            if let Some((z, l)) = kkt.polish(&pt.z, &pt.lam, &active, polish_tol) {
                return Ok(kkt.result(z, &l, iter + 1, true, t0));
            }
        }
        if converged {
            return Ok(kkt.result(pt.z, &pt.lam, iter, false, t0));
        }
        if kkt.infeasibility_certificate(&pt.lam) {
            return Err(Error::Infeasible("constraints admit no feasible point".into()));
        }
        let d: Vec<f64> = (0..m).map(|i| pt.lam[i] / pt.s[i]).collect();
        let pattern = kkt.atom_pattern(&pt.z);
        if previous.as_ref().is_some_and(|p| *p != pattern) {
            flips += 1;
        }
        if !kkt.sys.factor(&d, &pattern, SHIFT) {
            break;
        }
        // predictor
        let rc: Vec<f64> = (0..m).map(|i| pt.s[i] * pt.lam[i]).collect();
        let (_, ds, dl) = kkt.direction(&pt, &rd, &rp, &rc);
        let a_aff = Kkt::max_step(&pt, &ds, &dl);
        let sigma = if m == 0 || mu_k == 0.0 {
            0.0
        } else {
            let mu_aff = (0..m).map(|i| (pt.s[i] + a_aff * ds[i]) * (pt.lam[i] + a_aff * dl[i])).sum::<f64>() / m as f64;
            (mu_aff / mu_k).clamp(0.0, 1.0).powi(3)
        };
        // corrector
        let rc: Vec<f64> = (0..m).map(|i| pt.s[i] * pt.lam[i] + ds[i] * dl[i] - sigma * mu_k).collect();
        let (dz, ds, dl) = kkt.direction(&pt, &rd, &rp, &rc);
        let mut alpha = (STEP_FRACTION * Kkt::max_step(&pt, &ds, &dl)).min(1.0);
        let mut next = advance(&pt, alpha, &dz, &ds, &dl);
        if flips > PATTERN_FLIPS {
            for _ in 0..MAX_BACKTRACK {
                if kkt.merit(&next) < merit {
                    break;
                }
                alpha *= 0.5;
                next = advance(&pt, alpha, &dz, &ds, &dl);
            }
        }
        previous = Some(pattern);
        pt = next;
    }
    let iterations = start_iter + opts.max_iter;
    let best = best.map(|(_, b)| b).unwrap_or(pt);
    if kkt.infeasibility_certificate(&best.lam) {
        return Err(Error::Infeasible("constraints admit no feasible point".into()));
    }
    let result = kkt.result(best.z, &best.lam, iterations, false, t0);
    Err(Error::NonConvergence { iterations, best: Box::new(result) })
}

fn advance(pt: &Point, alpha: f64, dz: &[f64], ds: &[f64], dl: &[f64]) -> Point {
    let step = |x: &[f64], d: &[f64]| x.iter().zip(d).map(|(x, d)| x + alpha * d).collect();
    Point { z: step(&pt.z, dz), s: step(&pt.s, ds), lam: step(&pt.lam, dl) }
}
