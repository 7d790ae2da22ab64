//! Sample-based MPC used as the function approximator of Q-learning.
//!
//! The controller optimizes one action sequence shared by `M` disturbance
//! scenarios. Each scenario carries its own predicted states, slacked CBF
//! rows and (for the learnable scheme) a PWQ terminal cost. The optimal
//! value is `V(s)`, the value with the first action pinned is `Q(s, a)` and
//! the first optimal action is `pi(s)`.

use nalgebra::{DMatrix, Matrix2, Vector2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::approximators::{project_pwq_params, PsdNet, PwqNet, DEFAULT_B_FLOOR};
use crate::env::{sample_disturbance_sequences, Action, DisturbanceModel, LtiSystem, StageCostConfig, State};
use crate::error::{Error, Result};
use crate::safety::{BarrierSet, ClassKParams};
use crate::solver::{self, lagrangian_param_gradient, ConvexProgram, ParameterDependency, SolveOptions, SolveResult, SparseRow};

/// Learnable parameters. The flat ordering is `(W row-major, b, w, gamma)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaParams {
    pub pwq: PwqNet,
    pub classk: ClassKParams,
    /// Alternative terminal cost; not part of the flat vector.
    pub psd: Option<PsdNet>,
}

impl ThetaParams {
    pub fn new(pwq: PwqNet, classk: ClassKParams) -> Self {
        ThetaParams { pwq, classk, psd: None }
    }

    /// Random PWQ terminal cost with `hidden` units and all `gamma` equal.
    pub fn initial<R: Rng + ?Sized>(hidden: usize, n_barriers: usize, gamma: f64, rng: &mut R) -> Self {
        ThetaParams::new(PwqNet::random(hidden, 2, rng), ClassKParams::uniform(n_barriers, gamma))
    }

    pub fn n_params(&self) -> usize {
        self.pwq.n_params() + self.classk.gamma.len()
    }

    /// Offset of `gamma_1` in the flat vector.
    pub fn gamma_offset(&self) -> usize {
        self.pwq.n_params()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.pwq.flatten();
        v.extend(&self.classk.gamma);
        v
    }

    pub fn unflatten(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.n_params() {
            return Err(Error::invalid("parameter vector has the wrong length"));
        }
        let k = self.gamma_offset();
        self.pwq.unflatten(&theta[..k])?;
        self.classk.gamma.copy_from_slice(&theta[k..]);
        Ok(())
    }

    /// Projects onto the admissible parameter set.
    pub fn project(&mut self) {
        self.pwq = project_pwq_params(&self.pwq, DEFAULT_B_FLOOR);
        self.classk.project();
    }

    pub fn is_feasible(&self) -> bool {
        self.pwq.is_feasible(DEFAULT_B_FLOOR) && self.classk.validate().is_ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScmpcConfig {
    pub horizon: usize,
    pub scenarios: usize,
    pub zeta: f64,
    pub include_exploration_term: bool,
    pub exploration: [f64; 2],
}

impl Default for ScmpcConfig {
    fn default() -> Self {
        ScmpcConfig { horizon: 1, scenarios: 32, zeta: 0.0, include_exploration_term: false, exploration: [0.0; 2] }
    }
}

impl ScmpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.scenarios == 0 {
            return Err(Error::invalid("horizon and scenario count must be at least 1"));
        }
        if !(self.zeta >= 0.0) || !self.exploration.iter().all(|q| q.is_finite()) {
            return Err(Error::invalid("zeta must be nonnegative and the exploration vector finite"));
        }
        Ok(())
    }
}

/// The fixed multi-step comparison controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub horizon: usize,
    pub gamma: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig { horizon: 12, gamma: 0.7 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub action: Action,
    /// Optimal objective, i.e. `V(s)`.
    pub value: f64,
    pub solve: SolveResult,
    /// Predicted final state of each scenario.
    pub terminal_states: Vec<State>,
}

/// Affine state predictions `x_k^(i) = X_k u + y_k^(i)`.
#[derive(Debug, Clone)]
struct Prediction {
    horizon: usize,
    x_mat: Vec<DMatrix<f64>>,
    y: Vec<Vec<State>>,
}

impl Prediction {
    fn new(system: &LtiSystem, s: &State, scenarios: &[Vec<f64>], horizon: usize) -> Self {
        let nu = 2 * horizon;
        let mut x_mat = vec![DMatrix::zeros(2, nu)];
        for k in 0..horizon {
            let prev = &x_mat[k];
            let mut next = DMatrix::zeros(2, nu);
            for c in 0..nu {
                let col = system.a * Vector2::new(prev[(0, c)], prev[(1, c)]);
                next[(0, c)] = col[0];
                next[(1, c)] = col[1];
            }
            for r in 0..2 {
                for c in 0..2 {
                    next[(r, 2 * k + c)] += system.b[(r, c)];
                }
            }
            x_mat.push(next);
        }
        let y = scenarios
            .iter()
            .map(|w| {
                let mut ys = vec![*s];
                for k in 0..horizon {
                    let yk = system.a * ys[k] + system.e * w[k];
                    ys.push(yk);
                }
                ys
            })
            .collect();
        Prediction { horizon, x_mat, y }
    }

    fn state(&self, z: &[f64], i: usize, k: usize) -> State {
        let x = &self.x_mat[k];
        let mut out = self.y[i][k];
        for c in 0..2 * self.horizon {
            out[0] += x[(0, c)] * z[c];
            out[1] += x[(1, c)] * z[c];
        }
        out
    }

    /// `v' X_k` as a sparse row over the action variables.
    fn row(&self, v: &State, k: usize) -> Vec<f64> {
        let x = &self.x_mat[k];
        (0..2 * self.horizon).map(|c| v[0] * x[(0, c)] + v[1] * x[(1, c)]).collect()
    }
}

/// Parameter dependency of a scenario program, for
/// [`solver::lagrangian_param_gradient`]. Constraint row `r` belongs to
/// scenario `r / (4N)`, step `(r / 4) % N` and barrier `r % 4`.
pub struct MpcDependency {
    pwq: Option<PwqNet>,
    pwq_params: usize,
    barriers: BarrierSet,
    prediction: Prediction,
}

impl MpcDependency {
    fn decode(&self, row: usize) -> (usize, usize, usize) {
        let nb = self.barriers.len();
        let n = self.prediction.horizon;
        (row / (nb * n), (row / nb) % n, row % nb)
    }
}

impl ParameterDependency for MpcDependency {
    fn n_params(&self) -> usize {
        self.pwq_params + self.barriers.len()
    }

    fn objective_gradient(&self, z: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.n_params()];
        if let Some(pwq) = &self.pwq {
            let m = self.prediction.y.len();
            for i in 0..m {
                let x = self.prediction.state(z, i, self.prediction.horizon);
                for (gk, v) in g.iter_mut().zip(pwq.gradients(x.as_slice()).flatten_params()) {
                    *gk += v / m as f64;
                }
            }
        }
        g
    }

    fn constraint_gradient(&self, z: &[f64], row: usize) -> Vec<(usize, f64)> {
        let (i, k, j) = self.decode(row);
        let x = self.prediction.state(z, i, k);
        vec![(self.pwq_params + j, -self.barriers.barriers[j].value(&x))]
    }
}

/// Scenario MPC bound to a system, cost and safe set.
#[derive(Debug, Clone)]
pub struct Scmpc {
    pub system: LtiSystem,
    pub barriers: BarrierSet,
    pub cost: StageCostConfig,
    pub cfg: ScmpcConfig,
    /// Disturbance standard deviation assumed when drawing scenarios.
    pub sigma: f64,
    pub solver: SolveOptions,
}

struct Terms<'a> {
    horizon: usize,
    pwq: Option<&'a PwqNet>,
    gamma: &'a [f64],
    q: Option<Action>,
}

impl Scmpc {
    pub fn new(system: LtiSystem, barriers: BarrierSet, cost: StageCostConfig, cfg: ScmpcConfig, sigma: f64) -> Self {
        Scmpc { system, barriers, cost, cfg, sigma, solver: SolveOptions::default() }
    }

    /// The `M` scenario sequences of length `horizon` drawn from `seed`.
    pub fn scenarios(&self, seed: u64, horizon: usize) -> Vec<Vec<f64>> {
        sample_disturbance_sequences(&DisturbanceModel::new(self.sigma, seed), self.cfg.scenarios, horizon)
    }

    fn check(&self, s: &State, scenarios: &[Vec<f64>], horizon: usize) -> Result<()> {
        self.cfg.validate()?;
        if scenarios.len() != self.cfg.scenarios {
            return Err(Error::invalid(format!("expected {} scenarios, got {}", self.cfg.scenarios, scenarios.len())));
        }
        if scenarios.iter().any(|w| w.len() < horizon || w.iter().any(|v| !v.is_finite())) {
            return Err(Error::invalid("scenario sequences are shorter than the horizon or non-finite"));
        }
        if !s.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("state must be finite"));
        }
        Ok(())
    }

    fn build(&self, terms: &Terms<'_>, s: &State, scenarios: &[Vec<f64>]) -> Result<(ConvexProgram, MpcDependency)> {
        let n = terms.horizon;
        self.check(s, scenarios, n)?;
        let nb = self.barriers.len();
        if terms.gamma.len() != nb {
            return Err(Error::invalid("one class-K coefficient per barrier is required"));
        }
        let m = scenarios.len();
        let mf = m as f64;
        let nu = 2 * n;
        let pred = Prediction::new(&self.system, s, scenarios, n);
        let mut p = ConvexProgram::new(nu + m * n * nb);
        let (q, r) = (&self.cost.q, &self.cost.r);

        // stage costs: the first is exact, later ones are scenario averages
        p.constant += self.cost.quadratic(s, &Action::zeros()) + self.cost.violation_penalty(&self.barriers, s);
        for k in 0..n {
            add_quadratic_block(&mut p, 2 * k, r);
        }
        for k in 1..n {
            let xk = &pred.x_mat[k];
            let qx = DMatrix::from_fn(2, 2, |a, b| q[(a, b)]) * xk;
            let h = 2.0 * xk.transpose() * &qx;
            for a in 0..nu {
                for b in a..nu {
                    p.add_hessian(a, b, h[(a, b)]);
                }
            }
            let ybar = pred.y.iter().map(|ys| ys[k]).sum::<State>() / mf;
            let lin = 2.0 * qx.transpose() * Vector2::new(ybar[0], ybar[1]);
            for a in 0..nu {
                p.add_linear(a, lin[a]);
            }
            p.constant += pred.y.iter().map(|ys| ys[k].dot(&(q * ys[k]))).sum::<f64>() / mf;
        }
        if let Some(qv) = terms.q {
            p.add_linear(0, qv[0]);
            p.add_linear(1, qv[1]);
        }
        for a in 0..nu {
            p.set_bounds(a, -self.system.action_bound, self.system.action_bound);
        }

        // slacked CBF rows: e'x_{k+1} - (1-gamma) e'x_k - sigma <= gamma d - zeta
        let rows: Vec<Vec<Vec<f64>>> = (0..=n)
            .map(|k| self.barriers.barriers.iter().map(|bar| pred.row(&bar.normal, k)).collect())
            .collect();
        for i in 0..m {
            for k in 0..n {
                for (j, bar) in self.barriers.barriers.iter().enumerate() {
                    let decay = 1.0 - terms.gamma[j];
                    let var = nu + (i * n + k) * nb + j;
                    let mut row = SparseRow::new();
                    for c in 0..nu {
                        let v = rows[k + 1][j][c] - decay * rows[k][j][c];
                        if v != 0.0 {
                            row.push(c, v);
                        }
                    }
                    row.push(var, -1.0);
                    let rhs = terms.gamma[j] * bar.offset - self.cfg.zeta - bar.normal.dot(&pred.y[i][k + 1])
                        + decay * bar.normal.dot(&pred.y[i][k]);
                    p.add_row(row, rhs);
                    p.linear[var] = self.cost.c / mf;
                    p.set_bounds(var, 0.0, f64::INFINITY);
                }
            }
        }

        // terminal cost atoms
        if let Some(pwq) = terms.pwq {
            for i in 0..m {
                for unit in 0..pwq.hidden() {
                    let w = pwq.output[unit];
                    if w == 0.0 {
                        continue;
                    }
                    let wk = Vector2::new(pwq.weights[(unit, 0)], pwq.weights[(unit, 1)]);
                    let row = SparseRow::from_dense(&pred.row(&wk, n));
                    let offset = wk.dot(&pred.y[i][n]) + pwq.biases[unit];
                    if row.idx.is_empty() {
                        let t = offset.max(0.0);
                        p.constant += w / mf * t * t;
                    } else {
                        p.add_atom(w / mf, row, offset);
                    }
                }
            }
        }
        let dep = MpcDependency {
            pwq: terms.pwq.cloned(),
            pwq_params: terms.pwq.map_or(0, |w| w.n_params()),
            barriers: self.barriers.clone(),
            prediction: pred,
        };
        Ok((p, dep))
    }

    fn learnable_terms<'a>(&self, theta: &'a ThetaParams, with_q: bool) -> Terms<'a> {
        let q = (with_q && self.cfg.include_exploration_term).then(|| Action::new(self.cfg.exploration[0], self.cfg.exploration[1]));
        Terms { horizon: self.cfg.horizon, pwq: Some(&theta.pwq), gamma: &theta.classk.gamma, q }
    }

    /// The learnable program at `s` and its parameter dependency. Variables
    /// are the actions followed by one slack per (scenario, step, barrier).
    pub fn build_problem(&self, theta: &ThetaParams, s: &State, scenarios: &[Vec<f64>]) -> Result<(ConvexProgram, MpcDependency)> {
        self.build(&self.learnable_terms(theta, true), s, scenarios)
    }

    fn output(&self, p: &ConvexProgram, dep: &MpcDependency) -> Result<PolicyOutput> {
        self.finish(solver::solve(p, &self.solver)?, dep)
    }

    fn finish(&self, r: SolveResult, dep: &MpcDependency) -> Result<PolicyOutput> {
        let n = dep.prediction.horizon;
        let terminal_states = (0..dep.prediction.y.len()).map(|i| dep.prediction.state(&r.z, i, n)).collect();
        let action = self.system.clip_action(&Action::new(r.z[0], r.z[1]));
        Ok(PolicyOutput { action, value: r.objective, solve: r, terminal_states })
    }

    /// `pi(s)` and `V(s)` on the given scenarios.
    pub fn policy(&self, theta: &ThetaParams, s: &State, scenarios: &[Vec<f64>]) -> Result<PolicyOutput> {
        let (p, dep) = self.build_problem(theta, s, scenarios)?;
        self.output(&p, &dep)
    }

    /// Like [`Scmpc::policy`] with an explicit exploration vector.
    pub fn policy_with_exploration(&self, theta: &ThetaParams, s: &State, scenarios: &[Vec<f64>], q: Option<Action>) -> Result<PolicyOutput> {
        let terms = Terms { q, ..self.learnable_terms(theta, false) };
        let (p, dep) = self.build(&terms, s, scenarios)?;
        self.output(&p, &dep)
    }

    fn pinned(&self, theta: &ThetaParams, s: &State, a: &Action, scenarios: &[Vec<f64>]) -> Result<(f64, SolveResult, MpcDependency)> {
        if !self.system.action_in_box(a, 1e-9) {
            return Err(Error::invalid("action outside the action box"));
        }
        let (p, dep) = self.build(&self.learnable_terms(theta, false), s, scenarios)?;
        let reduced = p.fix_variables(&[(0, a[0]), (1, a[1])])?;
        let r = reduced.expand(&solver::solve(&reduced.program, &self.solver)?);
        Ok((r.objective, r, dep))
    }

    /// `Q(s, a)`: the program with the first action pinned to `a`. The
    /// exploration term is never included.
    pub fn action_value(&self, theta: &ThetaParams, s: &State, a: &Action, scenarios: &[Vec<f64>]) -> Result<(f64, SolveResult)> {
        self.pinned(theta, s, a, scenarios).map(|(q, r, _)| (q, r))
    }

    /// `Q(s, a)` and its gradient in the flat parameter ordering.
    pub fn action_value_gradient(&self, theta: &ThetaParams, s: &State, a: &Action, scenarios: &[Vec<f64>]) -> Result<(f64, Vec<f64>)> {
        let (q, r, dep) = self.pinned(theta, s, a, scenarios)?;
        if r.degenerate {
            return Err(Error::GradientUnavailable(format!("{} degenerate active rows", r.degenerate_rows.len())));
        }
        Ok((q, lagrangian_param_gradient(&dep, &r)))
    }

    /// `Q(s, a)` and, unless the solution has active-set ties, its gradient.
    pub fn action_value_with_gradient(&self, theta: &ThetaParams, s: &State, a: &Action, scenarios: &[Vec<f64>]) -> Result<(f64, Option<Vec<f64>>)> {
        let (q, r, dep) = self.pinned(theta, s, a, scenarios)?;
        Ok((q, (!r.degenerate).then(|| lagrangian_param_gradient(&dep, &r))))
    }

    pub fn q_param_gradient(&self, theta: &ThetaParams, s: &State, a: &Action, scenarios: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.action_value_gradient(theta, s, a, scenarios).map(|(_, g)| g)
    }

    /// Closed-form optimal slacks of `Q(s, a)` for the unit horizon, in
    /// program order.
    pub fn closed_form_slacks(&self, theta: &ThetaParams, s: &State, a: &Action, scenarios: &[Vec<f64>]) -> Vec<f64> {
        let mut out = Vec::new();
        for w in scenarios {
            let x1 = self.system.a * s + self.system.b * a + self.system.e * w[0];
            for (j, bar) in self.barriers.barriers.iter().enumerate() {
                let g = bar.value(&x1) - (1.0 - theta.classk.gamma[j]) * bar.value(s) - self.cfg.zeta;
                out.push((-g).max(0.0));
            }
        }
        out
    }

    /// Fixed multi-step scenario MPC without learnable terms.
    pub fn baseline_policy(&self, baseline: &BaselineConfig, s: &State, scenarios: &[Vec<f64>]) -> Result<PolicyOutput> {
        if baseline.horizon == 0 || !(0.0..=1.0).contains(&baseline.gamma) {
            return Err(Error::invalid("baseline horizon must be positive and gamma in [0, 1]"));
        }
        let gamma = vec![baseline.gamma; self.barriers.len()];
        let terms = Terms { horizon: baseline.horizon, pwq: None, gamma: &gamma, q: None };
        let (p, dep) = self.build(&terms, s, scenarios)?;
        self.output(&p, &dep)
    }
}

impl Scmpc {
    /// Baseline solve warm started from the previous step's solution, shifted
    /// one step forward. The result solves the same program as
    /// [`Scmpc::baseline_policy`]; only the path to it differs.
    pub fn baseline_policy_warm(&self, baseline: &BaselineConfig, s: &State, scenarios: &[Vec<f64>], previous: Option<&SolveResult>) -> Result<PolicyOutput> {
        let Some(prev) = previous else {
            return self.baseline_policy(baseline, s, scenarios);
        };
        if baseline.horizon == 0 || !(0.0..=1.0).contains(&baseline.gamma) {
            return Err(Error::invalid("baseline horizon must be positive and gamma in [0, 1]"));
        }
        let gamma = vec![baseline.gamma; self.barriers.len()];
        let terms = Terms { horizon: baseline.horizon, pwq: None, gamma: &gamma, q: None };
        let (p, dep) = self.build(&terms, s, scenarios)?;
        let n_u = 2 * baseline.horizon;
        if prev.z.len() != p.n() || prev.lambda.len() != p.n_rows() {
            return self.output(&p, &dep);
        }
        let shift = |v: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; v.len()];
            for k in 0..n_u {
                out[k] = v[(k + 2).min(n_u - 2 + k % 2)];
            }
            out
        };
        let warm = SolveResult {
            z: shift(&prev.z),
            lambda: vec![0.0; p.n_rows()],
            lambda_lower: shift(&prev.lambda_lower),
            lambda_upper: shift(&prev.lambda_upper),
            ..prev.clone()
        };
        let r = solver::solve_warm(&p, &self.solver, &warm)?;
        self.finish(r, &dep)
    }
}

fn add_quadratic_block(p: &mut ConvexProgram, off: usize, r: &Matrix2<f64>) {
    p.add_hessian(off, off, 2.0 * r[(0, 0)]);
    p.add_hessian(off + 1, off + 1, 2.0 * r[(1, 1)]);
    p.add_hessian(off, off + 1, r[(0, 1)] + r[(1, 0)]);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mpc(m: usize) -> Scmpc {
        let cfg = ScmpcConfig { scenarios: m, ..ScmpcConfig::default() };
        Scmpc::new(LtiSystem::default(), BarrierSet::box_set(3.0), StageCostConfig::default(), cfg, 1.0)
    }

    fn theta(seed: u64) -> ThetaParams {
        ThetaParams::initial(16, 4, 0.7, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn random_state(rng: &mut ChaCha8Rng) -> State {
        State::new(rng.random_range(-2.9..2.9), rng.random_range(-2.9..2.9))
    }

    #[test]
    fn problem_size() {
        let c = mpc(32);
        let (p, _) = c.build_problem(&theta(0), &State::zeros(), &c.scenarios(1, 1)).unwrap();
        assert_eq!(p.n(), 2 + 128);
        assert_eq!(p.n_rows(), 128);
    }

    #[test]
    fn origin_without_noise_needs_no_slack() {
        let c = mpc(1);
        let th = ThetaParams::new(PwqNet::zeros(16, 2), ClassKParams::uniform(4, 1.0));
        let out = c.policy(&th, &State::zeros(), &[vec![0.0]]).unwrap();
        assert!(out.solve.z[2..].iter().all(|s| s.abs() < 1e-9));
        assert!(out.action.norm() < 1e-9);
        assert!(out.value.abs() < 1e-9);
    }

    #[test]
    fn large_exploration_hits_box() {
        let mut c = mpc(4);
        c.cfg.include_exploration_term = true;
        c.cfg.exploration = [0.0, -100.0];
        let out = c.policy(&theta(1), &State::zeros(), &c.scenarios(3, 1)).unwrap();
        assert!((out.action[1] - 0.5).abs() < 1e-8);
    }

    #[test]
    fn bellman_consistency() {
        let c = mpc(32);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for k in 0..20 {
            let th = theta(k);
            let s = random_state(&mut rng);
            let sc = c.scenarios(k, 1);
            let v = c.policy(&th, &s, &sc).unwrap();
            let (q, _) = c.action_value(&th, &s, &v.action, &sc).unwrap();
            assert!((q - v.value).abs() <= 1e-8, "{q} vs {}", v.value);
        }
    }

    #[test]
    fn slacks_match_closed_form() {
        let c = mpc(32);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in 0..20 {
            let th = theta(k);
            let s = random_state(&mut rng);
            let a = Action::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
            let sc = c.scenarios(100 + k, 1);
            let (_, r) = c.action_value(&th, &s, &a, &sc).unwrap();
            for (got, want) in r.z[2..].iter().zip(c.closed_form_slacks(&th, &s, &a, &sc)) {
                assert!((got - want).abs() <= 1e-8, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn single_inactive_scenario_q_is_stage_plus_terminal() {
        let c = mpc(1);
        let th = theta(4);
        let s = State::new(0.3, -0.2);
        let a = Action::new(0.1, 0.2);
        let (q, _) = c.action_value(&th, &s, &a, &[vec![0.1]]).unwrap();
        let x1 = c.system.a * s + c.system.b * a + c.system.e * 0.1;
        let want = crate::env::stage_cost(&c.cost, &c.barriers, &s, &a) + th.pwq.value(x1.as_slice());
        assert!((q - want).abs() < 1e-10);
    }

    #[test]
    fn value_below_feasible_probes_and_q_convex() {
        let c = mpc(8);
        let th = theta(5);
        let s = State::new(2.0, -1.0);
        let sc = c.scenarios(9, 1);
        let v = c.policy(&th, &s, &sc).unwrap().value;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = |a: &Action| c.action_value(&th, &s, a, &sc).unwrap().0;
        for _ in 0..50 {
            let a = Action::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
            let b = Action::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
            let (qa, qb, qm) = (q(&a), q(&b), q(&((a + b) / 2.0)));
            assert!(v <= qa + 1e-9);
            assert!(qm <= 0.5 * (qa + qb) + 1e-9);
        }
    }

    #[test]
    fn inactive_rows_give_zero_gamma_gradient() {
        let c = mpc(4);
        let th = theta(7);
        let s = State::zeros();
        let g = c.q_param_gradient(&th, &s, &Action::zeros(), &vec![vec![0.0]; 4]).unwrap();
        assert!(g[th.gamma_offset()..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let c = mpc(8);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut checked = 0;
        for k in 0..15 {
            let mut th = theta(10 + k);
            th.classk.gamma = (0..4).map(|_| rng.random_range(0.2..0.8)).collect();
            let s = State::new(rng.random_range(2.0..2.95), rng.random_range(-2.9..2.9));
            let a = Action::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
            let sc = c.scenarios(k, 1);
            let Ok(g) = c.q_param_gradient(&th, &s, &a, &sc) else { continue };
            let base = th.flatten();
            for idx in 0..base.len() {
                let h = 1e-6;
                let eval = |d: f64| {
                    let mut t = th.clone();
                    let mut v = base.clone();
                    v[idx] += d;
                    t.unflatten(&v).unwrap();
                    c.action_value(&t, &s, &a, &sc).unwrap().0
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                assert!((g[idx] - fd).abs() <= 1e-4 * fd.abs().max(1.0), "param {idx}: {} vs {fd}", g[idx]);
            }
            checked += 1;
        }
        assert!(checked >= 10);
    }

    #[test]
    fn baseline_unit_horizon_matches_zeroed_policy() {
        let c = mpc(8);
        let th = ThetaParams::new(PwqNet::zeros(16, 2), ClassKParams::uniform(4, 0.7));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for k in 0..10 {
            let s = random_state(&mut rng);
            let sc = c.scenarios(k, 1);
            let a = c.policy(&th, &s, &sc).unwrap();
            let b = c.baseline_policy(&BaselineConfig { horizon: 1, gamma: 0.7 }, &s, &sc).unwrap();
            assert!((a.value - b.value).abs() < 1e-9);
            assert!((a.action - b.action).norm() < 1e-7);
        }
    }

    #[test]
    fn baseline_variable_count() {
        let c = mpc(32);
        let sc = c.scenarios(0, 12);
        let (p, _) = c
            .build(&Terms { horizon: 12, pwq: None, gamma: &[0.7; 4], q: None }, &State::zeros(), &sc)
            .unwrap();
        assert_eq!(p.n(), 12 * 2 + 4 * 32 * 12);
    }

    #[test]
    fn baseline_regulates_without_noise() {
        let mut c = mpc(4);
        c.sigma = 0.0;
        let mut s = State::new(1.0, -1.0);
        let mut prev = s.norm();
        for t in 0..15 {
            let out = c.baseline_policy(&BaselineConfig::default(), &s, &c.scenarios(t, 12)).unwrap();
            s = c.system.a * s + c.system.b * out.action;
            assert!(s.norm() <= prev + 1e-9, "step {t}: {} > {prev}", s.norm());
            prev = s.norm();
        }
        assert!(prev < 0.05);
    }

    #[test]
    fn larger_gamma_never_increases_value() {
        let c = mpc(16);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for k in 0..20 {
            let mut th = theta(k);
            let s = random_state(&mut rng);
            let sc = c.scenarios(k, 1);
            th.classk.gamma = vec![0.3; 4];
            let lo = c.policy(&th, &s, &sc).unwrap().value;
            th.classk.gamma = vec![0.9; 4];
            let hi = c.policy(&th, &s, &sc).unwrap().value;
            assert!(hi <= lo + 1e-9);
        }
    }

    #[test]
    fn scenario_determinism() {
        let c = mpc(32);
        let a = c.policy(&theta(3), &State::new(1.0, 2.0), &c.scenarios(5, 1)).unwrap();
        let b = c.policy(&theta(3), &State::new(1.0, 2.0), &c.scenarios(5, 1)).unwrap();
        assert_eq!(a.action, b.action);
    }

    #[test]
    fn rejects_bad_inputs() {
        let c = mpc(4);
        assert!(c.policy(&theta(0), &State::zeros(), &c.scenarios(0, 1)[..3]).is_err());
        assert!(c.action_value(&theta(0), &State::zeros(), &Action::new(0.7, 0.0), &c.scenarios(0, 1)).is_err());
    }

    #[test]
    fn reduced_newton_system_matches_dense_on_mpc_program() {
        let c = mpc(4);
        let (p, _) = c.build_problem(&theta(1), &State::zeros(), &c.scenarios(3, 1)).unwrap();
        crate::solver::tests::check_newton(&p);
    }

    #[test]
    fn warm_baseline_matches_cold() {
        let c = mpc(32);
        let base = BaselineConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut tw, mut tc, mut polished, mut total) = (0.0, 0.0, 0, 0);
        for ep in 0..4 {
            let mut s = random_state(&mut rng);
            let mut prev: Option<SolveResult> = None;
            for t in 0..30 {
                let sc = c.scenarios(100 * ep + t, 12);
                let cold = c.baseline_policy(&base, &s, &sc).unwrap();
                let warm = c.baseline_policy_warm(&base, &s, &sc, prev.as_ref()).unwrap();
                assert!((cold.action - warm.action).norm() < 1e-6, "{} {}", cold.action, warm.action);
                assert!((cold.value - warm.value).abs() < 1e-6 * (1.0 + cold.value.abs()));
                tw += warm.solve.wall_time;
                tc += cold.solve.wall_time;
                total += 1;
                polished += (warm.solve.iterations <= 1) as usize;
                s = c.system.a * s + c.system.b * warm.action + c.system.e * sc[0][0];
                prev = Some(warm.solve);
            }
        }
        println!("warm {:.3e} cold {:.3e} one-step {polished}/{total}", tw / total as f64, tc / total as f64);
    }
}
