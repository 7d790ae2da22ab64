//! Barrier functions, linear class-K functions, the probabilistic CBF
//! residual, Monte-Carlo invariance estimation and scenario sample bounds.

use rayon::prelude::*;

use crate::env::{self, Action, DisturbanceModel, LtiSystem, State};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, Stream};

/// `h(s) = offset - normal' s`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineBarrier {
    pub offset: f64,
    pub normal: State,
    /// Lipschitz constant of `h`, i.e. `|normal|`.
    pub lipschitz: f64,
}

impl AffineBarrier {
    pub fn new(offset: f64, normal: State) -> Self {
        AffineBarrier { offset, normal, lipschitz: normal.norm() }
    }

    #[inline]
    pub fn value(&self, s: &State) -> f64 {
        self.offset - self.normal.dot(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BarrierSet {
    pub barriers: Vec<AffineBarrier>,
}

impl BarrierSet {
    /// The four barriers of the box `[I; -I] s <= bound`, ordered
    /// `bound - s1, bound - s2, bound + s1, bound + s2`, so that barriers 1
    /// and 3 bound the first state.
    pub fn box_set(bound: f64) -> Self {
        let barriers = [1.0, -1.0]
            .into_iter()
            .flat_map(|sign| {
                (0..2).map(move |i| {
                    let mut e = State::zeros();
                    e[i] = sign;
                    AffineBarrier::new(bound, e)
                })
            })
            .collect();
        BarrierSet { barriers }
    }

    pub fn len(&self) -> usize {
        self.barriers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.barriers.is_empty()
    }

    pub fn values(&self, s: &State) -> Vec<f64> {
        self.barriers.iter().map(|b| b.value(s)).collect()
    }

    pub fn contains(&self, s: &State) -> bool {
        self.barriers.iter().all(|b| b.value(s) >= 0.0)
    }

    /// Largest Lipschitz constant over the barriers.
    pub fn lipschitz(&self) -> f64 {
        self.barriers.iter().map(|b| b.lipschitz).fold(0.0, f64::max)
    }
}

/// Per-barrier linear class-K coefficients, `alpha_j(y) = gamma_j * y`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassKParams {
    pub gamma: Vec<f64>,
}

impl ClassKParams {
    pub fn new(gamma: Vec<f64>) -> Result<Self> {
        let p = ClassKParams { gamma };
        p.validate()?;
        Ok(p)
    }

    pub fn uniform(n: usize, gamma: f64) -> Self {
        ClassKParams { gamma: vec![gamma; n] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma.iter().all(|g| (0.0..=1.0).contains(g)) {
            Ok(())
        } else {
            Err(Error::invalid("class-K coefficients must lie in [0, 1]"))
        }
    }

    pub fn alpha(&self, j: usize, y: f64) -> f64 {
        self.gamma[j] * y
    }

    pub fn project(&mut self) {
        for g in &mut self.gamma {
            *g = g.clamp(0.0, 1.0);
        }
    }
}

/// Risk allocation for N-step invariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskBudget {
    pub epsilon: f64,
    pub n_steps: usize,
    /// Per-step risk.
    pub xi: f64,
    pub beta: f64,
    pub zeta: f64,
}

impl RiskBudget {
    /// Uniform allocation `xi = epsilon / n_steps`.
    pub fn new(epsilon: f64, n_steps: usize, beta: f64, zeta: f64) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::invalid("risk horizon must be at least 1"));
        }
        let b = RiskBudget { epsilon, n_steps, xi: epsilon / n_steps as f64, beta, zeta };
        b.validate()?;
        Ok(b)
    }

    /// A budget stated directly in terms of the per-step risk.
    pub fn per_step(xi: f64, beta: f64, zeta: f64) -> Self {
        RiskBudget { epsilon: xi, n_steps: 1, xi, beta, zeta }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::invalid("epsilon must lie in (0, 1)"));
        }
        if !(self.xi > 0.0 && self.xi < 1.0) {
            return Err(Error::invalid("xi must lie in (0, 1)"));
        }
        if self.xi * self.n_steps as f64 > self.epsilon * (1.0 + 1e-12) {
            return Err(Error::invalid("xi * N must not exceed epsilon"));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::invalid("beta must lie in (0, 1)"));
        }
        if !(self.zeta >= 0.0) {
            return Err(Error::invalid("zeta must be nonnegative"));
        }
        Ok(())
    }
}

/// `r_j = h_j(s_next) - h_j(s) + gamma_j h_j(s) - zeta`; the discrete CBF
/// condition holds for barrier `j` iff `r_j >= 0`.
pub fn cbf_residual(barriers: &BarrierSet, classk: &ClassKParams, s: &State, s_next: &State, zeta: f64) -> Vec<f64> {
    barriers
        .barriers
        .iter()
        .enumerate()
        .map(|(j, b)| {
            let h = b.value(s);
            b.value(s_next) - h + classk.alpha(j, h) - zeta
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InvarianceEstimate {
    /// Fraction of trials that stayed safe for all N steps.
    pub probability: f64,
    pub lower: f64,
    pub upper: f64,
    pub trials: usize,
    pub safe_trials: usize,
}

impl InvarianceEstimate {
    /// Standard error of the joint-violation frequency.
    pub fn standard_error(&self) -> f64 {
        let p = self.probability;
        (p * (1.0 - p) / self.trials as f64).sqrt()
    }
}

/// Wilson score interval for `successes / trials` at normal quantile `z`.
pub fn wilson_interval(successes: usize, trials: usize, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

pub const Z_95: f64 = 1.959_963_984_540_054;

/// Monte-Carlo estimate of `P(s_{t+tau} in C, tau = 1..n_steps)` from `s0`
/// under `policy`, with a 95% Wilson interval. Trials use independent
/// streams derived from `seed`; actions are clipped to the box.
#[allow(clippy::too_many_arguments)]
pub fn estimate_invariance<P>(
    system: &LtiSystem,
    barriers: &BarrierSet,
    noise: &DisturbanceModel,
    policy: P,
    s0: &State,
    n_steps: usize,
    trials: usize,
    seed: u64,
) -> Result<InvarianceEstimate>
where
    P: Fn(&State) -> Result<Action> + Sync,
{
    if trials < 100 {
        return Err(Error::invalid("at least 100 trials are required"));
    }
    if n_steps == 0 {
        return Ok(InvarianceEstimate { probability: 1.0, lower: 1.0, upper: 1.0, trials, safe_trials: trials });
    }
    let outcomes: Vec<bool> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let model = noise.with_seed(derive_seed(seed, Stream::Invariance, &[trial as u64]));
            let w = &env::sample_disturbance_sequences(&model, 1, n_steps)[0];
            let mut s = *s0;
            let mut safe = true;
            for &wt in w {
                let a = system.clip_action(&policy(&s)?);
                s = env::step(system, &s, &a, wt)?;
                safe &= barriers.contains(&s);
            }
            Ok(safe)
        })
        .collect::<Result<_>>()?;
    let safe_trials = outcomes.iter().filter(|&&b| b).count();
    let (lower, upper) = wilson_interval(safe_trials, trials, Z_95);
    Ok(InvarianceEstimate {
        probability: safe_trials as f64 / trials as f64,
        lower,
        upper,
        trials,
        safe_trials,
    })
}

/// Ceiling that ignores floating-point noise just above an integer.
fn ceil_exact(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() <= 1e-12 * x.abs().max(1.0) {
        r
    } else {
        x.ceil()
    }
}

fn check_bound_domain(budget: &RiskBudget, horizon: usize, n_actions: usize) -> Result<()> {
    if !(budget.xi > 0.0 && budget.xi < 1.0) {
        return Err(Error::invalid("xi must lie in (0, 1)"));
    }
    if !(budget.beta > 0.0 && budget.beta < 1.0) {
        return Err(Error::invalid("beta must lie in (0, 1)"));
    }
    if horizon == 0 || n_actions == 0 {
        return Err(Error::invalid("horizon and action dimension must be positive"));
    }
    Ok(())
}

/// Scenario count for the convex case:
/// `M = ceil((2 / xi) (ln(1 / beta) + horizon * n_actions))`.
pub fn sample_bound_convex(budget: &RiskBudget, horizon: usize, n_actions: usize) -> Result<u64> {
    check_bound_domain(budget, horizon, n_actions)?;
    let d = (horizon * n_actions) as f64;
    let m = 2.0 / budget.xi * ((1.0 / budget.beta).ln() + d);
    Ok(m.ceil() as u64)
}

/// Scenario count for the nonconvex case:
/// `M = ceil((2 / xi^2) (ln(1 / beta) + horizon n_a ln ceil(2 d_A L / zeta) + ln ceil(2 / xi)))`.
pub fn sample_bound_nonconvex(
    budget: &RiskBudget,
    horizon: usize,
    n_actions: usize,
    action_diameter: f64,
    lipschitz_cbf: f64,
) -> Result<u64> {
    check_bound_domain(budget, horizon, n_actions)?;
    if !(budget.zeta > 0.0) {
        return Err(Error::invalid(
            "the nonconvex bound requires zeta > 0; use the convex bound when zeta = 0",
        ));
    }
    if !(action_diameter > 0.0 && lipschitz_cbf > 0.0) {
        return Err(Error::invalid("action diameter and CBF Lipschitz constant must be positive"));
    }
    let covering = ceil_exact(2.0 * action_diameter * lipschitz_cbf / budget.zeta).max(1.0);
    let d = (horizon * n_actions) as f64;
    let m = 2.0 / (budget.xi * budget.xi)
        * ((1.0 / budget.beta).ln() + d * covering.ln() + ceil_exact(2.0 / budget.xi).ln());
    Ok(m.ceil() as u64)
}

/// Lipschitz constant of the CBF constraint: `L_h L_f + 2 L_h`.
pub fn lipschitz_cbf_constant(lf: f64, lh: f64) -> f64 {
    lh * lf + lh + lh
}
