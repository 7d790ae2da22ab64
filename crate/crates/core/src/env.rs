//! Stochastic linear environment: dynamics, disturbances, stage cost and
//! closed-loop episode rollout.

use nalgebra::{Matrix2, Vector2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::safety::BarrierSet;

pub type State = Vector2<f64>;
pub type Action = Vector2<f64>;

/// `s+ = A s + B a + E w` with a scalar disturbance `w`.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiSystem {
    pub a: Matrix2<f64>,
    pub b: Matrix2<f64>,
    pub e: Vector2<f64>,
    /// Half-width of the action box.
    pub action_bound: f64,
    /// Half-width of the safe box.
    pub state_bound: f64,
}

impl Default for LtiSystem {
    fn default() -> Self {
        LtiSystem {
            a: Matrix2::new(1.0, 0.4, -0.1, 1.0),
            b: Matrix2::new(1.0, 0.05, 0.5, 1.0),
            e: Vector2::new(0.03, 0.01),
            action_bound: 0.5,
            state_bound: 3.0,
        }
    }
}

impl LtiSystem {
    pub fn validate(&self) -> Result<()> {
        let finite = self.a.iter().chain(self.b.iter()).chain(self.e.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("system matrices must be finite"));
        }
        if !(self.action_bound > 0.0) || !(self.state_bound > 0.0) {
            return Err(Error::invalid("action and state bounds must be positive"));
        }
        Ok(())
    }

    pub fn clip_action(&self, a: &Action) -> Action {
        a.map(|v| v.clamp(-self.action_bound, self.action_bound))
    }

    pub fn action_in_box(&self, a: &Action, tol: f64) -> bool {
        a.iter().all(|v| v.abs() <= self.action_bound + tol)
    }

    /// Infinity-norm diameter of the action box.
    pub fn action_diameter(&self) -> f64 {
        2.0 * self.action_bound
    }
}

/// One transition of the dynamics. Does not clip `a`.
pub fn step(system: &LtiSystem, s: &State, a: &Action, w: f64) -> Result<State> {
    if !(s.iter().all(|v| v.is_finite()) && a.iter().all(|v| v.is_finite()) && w.is_finite()) {
        return Err(Error::invalid("non-finite state, action or disturbance"));
    }
    Ok(system.a * s + system.b * a + system.e * w)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageCostConfig {
    pub q: Matrix2<f64>,
    pub r: Matrix2<f64>,
    /// Weight of the constraint-violation penalty.
    pub c: f64,
}

impl Default for StageCostConfig {
    fn default() -> Self {
        StageCostConfig {
            q: Matrix2::identity(),
            r: Matrix2::identity() * 0.1,
            c: 1e3,
        }
    }
}

impl StageCostConfig {
    pub fn validate(&self) -> Result<()> {
        for m in [&self.q, &self.r] {
            if (m - m.transpose()).abs().max() > 1e-12 {
                return Err(Error::invalid("cost matrices must be symmetric"));
            }
            let eig = m.symmetric_eigenvalues();
            if eig.min() < -1e-12 {
                return Err(Error::invalid("cost matrices must be positive semidefinite"));
            }
        }
        if !(self.c > 0.0) {
            return Err(Error::invalid("violation penalty must be positive"));
        }
        Ok(())
    }

    /// `s'Qs + a'Ra`, without the violation penalty.
    pub fn quadratic(&self, s: &State, a: &Action) -> f64 {
        s.dot(&(self.q * s)) + a.dot(&(self.r * a))
    }

    /// `-c * sum_j min(0, h_j(s))`.
    pub fn violation_penalty(&self, barriers: &BarrierSet, s: &State) -> f64 {
        -self.c * barriers.values(s).iter().map(|h| h.min(0.0)).sum::<f64>()
    }
}

pub fn stage_cost(cfg: &StageCostConfig, barriers: &BarrierSet, s: &State, a: &Action) -> f64 {
    cfg.quadratic(s, a) + cfg.violation_penalty(barriers, s)
}

/// I.i.d. zero-mean Gaussian scalar disturbance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DisturbanceModel {
    pub sigma: f64,
    pub rng_seed: u64,
}

impl DisturbanceModel {
    pub fn new(sigma: f64, rng_seed: u64) -> Self {
        DisturbanceModel { sigma, rng_seed }
    }

    pub fn with_seed(&self, rng_seed: u64) -> Self {
        DisturbanceModel { rng_seed, ..*self }
    }

    fn normal(&self) -> Normal<f64> {
        // sigma == 0 is accepted as the deterministic limit.
        Normal::new(0.0, self.sigma.max(0.0)).expect("finite sigma")
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.normal().sample(rng)
    }
}

/// `count` independent disturbance sequences of length `horizon`, drawn from
/// the stream determined by the model's seed.
pub fn sample_disturbance_sequences(model: &DisturbanceModel, count: usize, horizon: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(model.rng_seed);
    let normal = model.normal();
    (0..count)
        .map(|_| (0..horizon).map(|_| normal.sample(&mut rng)).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeConfig {
    pub length: usize,
    pub initial_state: State,
}

impl EpisodeConfig {
    pub fn new(length: usize, initial_state: State) -> Self {
        EpisodeConfig { length, initial_state }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord<D> {
    pub state: State,
    /// The action applied to the system, after clipping to the box.
    pub action: Action,
    pub disturbance: f64,
    pub cost: f64,
    /// Whether the successor state leaves the safe set.
    pub violation: bool,
    pub diagnostics: D,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog<D> {
    pub steps: Vec<StepRecord<D>>,
    pub final_state: State,
}

impl<D> EpisodeLog<D> {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Empirical cumulative cost of the episode.
    pub fn total_cost(&self) -> f64 {
        self.steps.iter().map(|s| s.cost).sum()
    }

    pub fn violations(&self) -> usize {
        self.steps.iter().filter(|s| s.violation).count()
    }

    /// States `s_0 .. s_T`.
    pub fn states(&self) -> Vec<State> {
        let mut v: Vec<State> = self.steps.iter().map(|s| s.state).collect();
        v.push(self.final_state);
        v
    }

    pub fn costs(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.cost).collect()
    }
}

/// Runs one closed-loop episode. `policy(t, s)` returns the action and
/// per-step diagnostics; its action is clipped to the box before stepping.
pub fn rollout<D, P>(
    system: &LtiSystem,
    cost: &StageCostConfig,
    barriers: &BarrierSet,
    noise: &DisturbanceModel,
    episode: &EpisodeConfig,
    mut policy: P,
) -> Result<EpisodeLog<D>>
where
    P: FnMut(usize, &State) -> Result<(Action, D)>,
{
    if episode.length == 0 {
        return Err(Error::invalid("episode length must be at least 1"));
    }
    let disturbances = &sample_disturbance_sequences(noise, 1, episode.length)[0];
    let mut s = episode.initial_state;
    let mut steps = Vec::with_capacity(episode.length);
    for (t, &w) in disturbances.iter().enumerate() {
        let (a, diagnostics) = policy(t, &s).map_err(|e| Error::Policy { step: t, source: Box::new(e) })?;
        let a = system.clip_action(&a);
        let next = step(system, &s, &a, w)?;
        steps.push(StepRecord {
            state: s,
            action: a,
            disturbance: w,
            cost: stage_cost(cost, barriers, &s, &a),
            violation: !barriers.contains(&next),
            diagnostics,
        });
        s = next;
    }
    Ok(EpisodeLog { steps, final_state: s })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn barriers() -> BarrierSet {
        BarrierSet::box_set(3.0)
    }

    #[test]
    fn step_examples() {
        let sys = LtiSystem::default();
        let z = State::zeros();
        assert_eq!(step(&sys, &z, &Action::zeros(), 0.0).unwrap(), z);
        let s = step(&sys, &State::new(1.0, 0.0), &Action::zeros(), 0.0).unwrap();
        assert_relative_eq!(s, State::new(1.0, -0.1));
        // B (1,0)' = (1, 0.5), E * 1 = (0.03, 0.01)
        let s = step(&sys, &z, &Action::new(1.0, 0.0), 1.0).unwrap();
        let expected = State::new(1.0 + 0.03, 0.5 + 0.01);
        assert_relative_eq!(s, expected, epsilon = 1e-15);
    }

    #[test]
    fn step_rejects_non_finite() {
        let sys = LtiSystem::default();
        assert!(step(&sys, &State::new(f64::NAN, 0.0), &Action::zeros(), 0.0).is_err());
        assert!(step(&sys, &State::zeros(), &Action::zeros(), f64::INFINITY).is_err());
    }

    #[test]
    fn stage_cost_examples() {
        let cfg = StageCostConfig::default();
        let b = barriers();
        assert_eq!(stage_cost(&cfg, &b, &State::zeros(), &Action::zeros()), 0.0);
        assert_relative_eq!(stage_cost(&cfg, &b, &State::new(4.0, 0.0), &Action::zeros()), 1016.0);
        assert_relative_eq!(stage_cost(&cfg, &b, &State::new(1.0, 1.0), &Action::new(1.0, 1.0)), 2.2, epsilon = 1e-12);
    }

    #[test]
    fn disturbance_sequences_reproducible() {
        let m = DisturbanceModel::new(1.0, 42);
        let a = sample_disturbance_sequences(&m, 3, 1);
        let b = sample_disturbance_sequences(&m, 3, 1);
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        assert_ne!(a, sample_disturbance_sequences(&m.with_seed(43), 3, 1));
    }

    #[test]
    fn disturbance_mean_and_whiteness() {
        let sigma = 1.0;
        let m = DisturbanceModel::new(sigma, 7);
        let n = 100_000;
        let seqs = sample_disturbance_sequences(&m, n, 2);
        let mean = seqs.iter().map(|s| s[0]).sum::<f64>() / n as f64;
        assert!(mean.abs() < 4.0 * sigma / (n as f64).sqrt());
        let mean1 = seqs.iter().map(|s| s[1]).sum::<f64>() / n as f64;
        let cov = seqs.iter().map(|s| (s[0] - mean) * (s[1] - mean1)).sum::<f64>() / n as f64;
        let var0 = seqs.iter().map(|s| (s[0] - mean).powi(2)).sum::<f64>() / n as f64;
        let var1 = seqs.iter().map(|s| (s[1] - mean1).powi(2)).sum::<f64>() / n as f64;
        assert!((cov / (var0 * var1).sqrt()).abs() < 0.02);
    }

    #[test]
    fn rollout_zero_policy_at_origin_without_noise() {
        let sys = LtiSystem::default();
        let log = rollout(
            &sys,
            &StageCostConfig::default(),
            &barriers(),
            &DisturbanceModel::new(0.0, 1),
            &EpisodeConfig::new(1, State::zeros()),
            |_, _| Ok((Action::zeros(), ())),
        )
        .unwrap();
        assert_eq!(log.total_cost(), 0.0);
        assert_eq!(log.violations(), 0);
    }

    #[test]
    fn rollout_lengths() {
        let sys = LtiSystem::default();
        let log = rollout(
            &sys,
            &StageCostConfig::default(),
            &barriers(),
            &DisturbanceModel::new(1.0, 1),
            &EpisodeConfig::new(30, State::new(0.5, -0.5)),
            |_, s| Ok((-0.3 * s, ())),
        )
        .unwrap();
        assert_eq!(log.costs().len(), 30);
        assert_eq!(log.states().len(), 31);
    }

    #[test]
    fn rollout_propagates_policy_failure_with_step() {
        let sys = LtiSystem::default();
        let err = rollout::<(), _>(
            &sys,
            &StageCostConfig::default(),
            &barriers(),
            &DisturbanceModel::new(1.0, 1),
            &EpisodeConfig::new(5, State::zeros()),
            |t, _| if t == 3 { Err(Error::invalid("boom")) } else { Ok((Action::zeros(), ())) },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Policy { step: 3, .. }));
    }

    #[test]
    fn uncontrolled_drift_from_corner_violates() {
        let sys = LtiSystem::default();
        let mut violating = 0;
        for seed in 0..1000 {
            let log = rollout(
                &sys,
                &StageCostConfig::default(),
                &barriers(),
                &DisturbanceModel::new(1.0, seed),
                &EpisodeConfig::new(30, State::new(3.0, 3.0)),
                |_, _| Ok((Action::zeros(), ())),
            )
            .unwrap();
            violating += log.violations();
        }
        assert!(violating > 0);
    }

    #[test]
    fn fixed_seed_rollouts_identical() {
        let sys = LtiSystem::default();
        let run = || {
            rollout(
                &sys,
                &StageCostConfig::default(),
                &barriers(),
                &DisturbanceModel::new(1.0, 99),
                &EpisodeConfig::new(30, State::new(1.0, 2.0)),
                |_, s| Ok((-0.2 * s, ())),
            )
            .unwrap()
        };
        assert_eq!(run(), run());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn step_is_affine(s1 in -5.0..5.0f64, s2 in -5.0..5.0f64, a1 in -1.0..1.0f64, a2 in -1.0..1.0f64, w in -3.0..3.0f64) {
                let sys = LtiSystem::default();
                let s = State::new(s1, s2);
                let a = Action::new(a1, a2);
                let lhs = step(&sys, &s, &a, w).unwrap() - step(&sys, &State::zeros(), &Action::zeros(), 0.0).unwrap();
                let rhs = sys.a * s + sys.b * a + sys.e * w;
                prop_assert!((lhs - rhs).norm() < 1e-12);
            }

            #[test]
            fn stage_cost_nonnegative(s1 in -6.0..6.0f64, s2 in -6.0..6.0f64, a1 in -1.0..1.0f64, a2 in -1.0..1.0f64) {
                let cfg = StageCostConfig::default();
                let b = BarrierSet::box_set(3.0);
                let s = State::new(s1, s2);
                let a = Action::new(a1, a2);
                let c = stage_cost(&cfg, &b, &s, &a);
                prop_assert!(c >= 0.0);
                if b.contains(&s) {
                    prop_assert!((c - cfg.quadratic(&s, &a)).abs() < 1e-12);
                } else {
                    prop_assert!(c > cfg.quadratic(&s, &a));
                }
            }
        }
    }
}
