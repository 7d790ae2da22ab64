//! Q-learning of the MPC parameters.
//!
//! Each episode is rolled out with epsilon-greedy exploration, then one
//! rmsprop step is taken on the mean of `delta * grad Q` over the episode's
//! transitions, followed by a projection onto the admissible parameters.

mod checkpoint;
mod rmsprop;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::Checkpoint;
pub use rmsprop::RmsProp;

use crate::env::{self, Action, DisturbanceModel, EpisodeConfig, State};
use crate::error::{Error, Result};
use crate::geometry::BoundarySampler;
use crate::harness::{fit_metrics, OracleGrid};
use crate::rng::{derive_seed, stream, Stream};
use crate::scmpc::{PolicyOutput, Scmpc, ThetaParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub episodes: usize,
    pub episode_length: usize,
    pub learning_rate: f64,
    pub rmsprop_decay: f64,
    pub rmsprop_epsilon: f64,
    /// Exploration probability at episode 0.
    pub exploration_probability: f64,
    /// Standard deviation of the exploration vector at episode 0.
    pub exploration_scale: f64,
    /// Per-episode factor applied to both of the above.
    pub exploration_decay: f64,
    pub hidden: usize,
    pub initial_gamma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            episodes: 1000,
            episode_length: 30,
            learning_rate: 0.005,
            rmsprop_decay: 0.9,
            rmsprop_epsilon: 1e-8,
            exploration_probability: 1.0,
            exploration_scale: 1.0,
            exploration_decay: 0.997,
            hidden: 16,
            initial_gamma: 0.7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episode_length == 0 || self.hidden == 0 {
            return Err(Error::invalid("episode length and hidden size must be positive"));
        }
        if !(self.learning_rate >= 0.0) || !(self.rmsprop_epsilon > 0.0) || !(0.0..1.0).contains(&self.rmsprop_decay) {
            return Err(Error::invalid("learning rate must be nonnegative, rmsprop decay in [0, 1) and epsilon positive"));
        }
        if !(0.0..=1.0).contains(&self.exploration_probability) || !(self.exploration_scale >= 0.0) {
            return Err(Error::invalid("exploration probability must lie in [0, 1] and its scale be nonnegative"));
        }
        if !(self.exploration_decay > 0.0 && self.exploration_decay <= 1.0) || !(0.0..=1.0).contains(&self.initial_gamma) {
            return Err(Error::invalid("exploration decay must lie in (0, 1] and the initial gamma in [0, 1]"));
        }
        Ok(())
    }

    /// Exploration probability in `episode`.
    pub fn exploration_probability_at(&self, episode: usize) -> f64 {
        self.exploration_probability * self.exploration_decay.powi(episode as i32)
    }

    /// Exploration standard deviation in `episode`.
    pub fn exploration_scale_at(&self, episode: usize) -> f64 {
        self.exploration_scale * self.exploration_decay.powi(episode as i32)
    }
}

/// One environment step. The seeds make `Q(s, a)` and `V(s_next)`
/// replayable.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: State,
    pub action: Action,
    pub cost: f64,
    pub next_state: State,
    /// Scenarios the behavior policy used at `state`; `Q` is re-evaluated on them.
    pub scenario_seed: u64,
    /// Scenarios for `V(next_state)`.
    pub value_seed: u64,
    pub explored: bool,
}

/// `delta = l(s, a) + V(s_next) - Q(s, a)`. The exploration vector is not
/// part of `Q`.
pub fn td_error(mpc: &Scmpc, theta: &ThetaParams, tr: &Transition) -> Result<f64> {
    let h = mpc.cfg.horizon;
    let v = mpc.policy(theta, &tr.next_state, &mpc.scenarios(tr.value_seed, h))?.value;
    let (q, _) = mpc.action_value(theta, &tr.state, &tr.action, &mpc.scenarios(tr.scenario_seed, h))?;
    Ok(tr.cost + v - q)
}

/// `delta` and, when the `Q` solution is nondegenerate, `grad Q`.
pub fn td_error_with_gradient(mpc: &Scmpc, theta: &ThetaParams, tr: &Transition) -> Result<(f64, Option<Vec<f64>>)> {
    let h = mpc.cfg.horizon;
    let v = mpc.policy(theta, &tr.next_state, &mpc.scenarios(tr.value_seed, h))?.value;
    let (q, g) = mpc.action_value_with_gradient(theta, &tr.state, &tr.action, &mpc.scenarios(tr.scenario_seed, h))?;
    Ok((tr.cost + v - q, g))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateReport {
    /// Transitions contributing to the step.
    pub used: usize,
    pub applied: bool,
    pub nonfinite: bool,
}

/// One projected rmsprop step along the batch mean of `delta * grad Q`.
/// Does nothing for an empty batch or a non-finite mean gradient.
pub fn apply_update(theta: &mut ThetaParams, opt: &mut RmsProp, batch: &[(f64, Vec<f64>)]) -> UpdateReport {
    if batch.is_empty() {
        return UpdateReport { used: 0, applied: false, nonfinite: false };
    }
    let n = theta.n_params();
    let mut g = vec![0.0; n];
    for (delta, grad) in batch {
        for (gk, dk) in g.iter_mut().zip(grad) {
            *gk += delta * dk;
        }
    }
    let scale = 1.0 / batch.len() as f64;
    g.iter_mut().for_each(|v| *v *= scale);
    if g.iter().any(|v| !v.is_finite()) {
        return UpdateReport { used: batch.len(), applied: false, nonfinite: true };
    }
    let step = opt.step(&g);
    let mut flat = theta.flatten();
    flat.iter_mut().zip(&step).for_each(|(t, d)| *t += d);
    theta.unflatten(&flat).expect("length preserved");
    theta.project();
    UpdateReport { used: batch.len(), applied: true, nonfinite: false }
}

/// Epsilon-greedy action: with probability `p(episode)` the MPC is solved
/// with an added `q'u0`, `q ~ N(0, scale(episode)^2 I)`.
pub fn explore_action<R: Rng + ?Sized>(
    mpc: &Scmpc,
    theta: &ThetaParams,
    cfg: &TrainConfig,
    s: &State,
    episode: usize,
    scenarios: &[Vec<f64>],
    rng: &mut R,
) -> Result<(PolicyOutput, bool, Action)> {
    let explore = rng.random::<f64>() < cfg.exploration_probability_at(episode);
    let q = if explore {
        let scale = cfg.exploration_scale_at(episode);
        let z0: f64 = StandardNormal.sample(rng);
        let z1: f64 = StandardNormal.sample(rng);
        Action::new(scale * z0, scale * z1)
    } else {
        Action::zeros()
    };
    let out = mpc.policy_with_exploration(theta, s, scenarios, explore.then_some(q))?;
    Ok((out, explore, q))
}

/// Per-episode training record.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeStats {
    pub episode: usize,
    /// Sum of stage costs; NaN if the episode failed.
    pub total_cost: f64,
    pub violations: usize,
    pub steps: usize,
    pub mean_abs_td: f64,
    pub gamma: Vec<f64>,
    pub nrmse: Option<f64>,
    pub r2: Option<f64>,
    pub update: UpdateReport,
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpisodeStats>,
}

#[derive(Debug, Clone, Copy)]
struct StepInfo {
    scenario_seed: u64,
    explored: bool,
}

/// Runs one episode and the transitions it produced.
fn run_episode(
    mpc: &Scmpc,
    theta: &ThetaParams,
    cfg: &TrainConfig,
    start: &BoundarySampler,
    seed: u64,
    episode: usize,
) -> Result<(env::EpisodeLog<StepInfo>, Vec<Transition>)> {
    let e = episode as u64;
    let s0 = start.sample(&mut stream(seed, Stream::InitialState, &[e]));
    let noise = DisturbanceModel::new(mpc.sigma, derive_seed(seed, Stream::EnvNoise, &[e]));
    let log = env::rollout(&mpc.system, &mpc.cost, &mpc.barriers, &noise, &EpisodeConfig::new(cfg.episode_length, s0), |t, s| {
        let scenario_seed = derive_seed(seed, Stream::Scenarios, &[e, t as u64]);
        let scenarios = mpc.scenarios(scenario_seed, mpc.cfg.horizon);
        let mut rng = stream(seed, Stream::Exploration, &[e, t as u64]);
        let (out, explored, _) = explore_action(mpc, theta, cfg, s, episode, &scenarios, &mut rng)?;
        Ok((out.action, StepInfo { scenario_seed, explored }))
    })?;
    let states = log.states();
    let transitions = log
        .steps
        .iter()
        .enumerate()
        .map(|(t, step)| Transition {
            state: step.state,
            action: step.action,
            cost: step.cost,
            next_state: states[t + 1],
            scenario_seed: step.diagnostics.scenario_seed,
            value_seed: derive_seed(seed, Stream::ValueScenarios, &[e, t as u64]),
            explored: step.diagnostics.explored,
        })
        .collect();
    Ok((log, transitions))
}

/// Trains one agent. Every episode starts on the boundary of `start`'s set.
pub fn train_seed(mpc: &Scmpc, cfg: &TrainConfig, start: &BoundarySampler, oracle: Option<&OracleGrid>, seed: u64) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut theta = ThetaParams::initial(cfg.hidden, mpc.barriers.len(), cfg.initial_gamma, &mut stream(seed, Stream::Init, &[]));
    let mut opt = RmsProp::new(theta.n_params(), cfg.learning_rate, cfg.rmsprop_decay, cfg.rmsprop_epsilon);
    let mut log = Vec::with_capacity(cfg.episodes);
    for episode in 0..cfg.episodes {
        let mut stats = EpisodeStats {
            episode,
            total_cost: f64::NAN,
            violations: 0,
            steps: 0,
            mean_abs_td: f64::NAN,
            gamma: Vec::new(),
            nrmse: None,
            r2: None,
            update: UpdateReport { used: 0, applied: false, nonfinite: false },
            failed: false,
        };
        match run_episode(mpc, &theta, cfg, start, seed, episode) {
            Ok((ep, transitions)) => {
                stats.total_cost = ep.total_cost();
                stats.violations = ep.violations();
                stats.steps = ep.len();
                let terms: Vec<Result<(f64, Option<Vec<f64>>)>> = transitions.par_iter().map(|tr| td_error_with_gradient(mpc, &theta, tr)).collect();
                let mut deltas = Vec::new();
                let mut batch = Vec::new();
                for (t, term) in terms.into_iter().enumerate() {
                    match term {
                        Ok((delta, grad)) => {
                            deltas.push(delta.abs());
                            if let Some(g) = grad {
                                batch.push((delta, g));
                            }
                        }
                        Err(err) => log::warn!("seed {seed} episode {episode} step {t}: transition dropped: {err}"),
                    }
                }
                if !deltas.is_empty() {
                    stats.mean_abs_td = deltas.iter().sum::<f64>() / deltas.len() as f64;
                }
                stats.update = apply_update(&mut theta, &mut opt, &batch);
            }
            Err(err) => {
                log::warn!("seed {seed} episode {episode} aborted: {err}");
                stats.failed = true;
            }
        }
        stats.gamma = theta.classk.gamma.clone();
        if let Some(grid) = oracle {
            if let Ok((nrmse, r2)) = fit_metrics(&theta.pwq, grid) {
                stats.nrmse = Some(nrmse);
                stats.r2 = Some(r2);
            }
        }
        log.push(stats);
    }
    Ok(TrainOutcome { checkpoint: Checkpoint { seed, episodes: cfg.episodes, theta, optimizer: opt }, log })
}

/// Trains independent agents, one per seed, in parallel.
pub fn train(mpc: &Scmpc, cfg: &TrainConfig, start: &BoundarySampler, oracle: Option<&OracleGrid>, seeds: &[u64]) -> Result<Vec<TrainOutcome>> {
    seeds.par_iter().map(|&seed| train_seed(mpc, cfg, start, oracle, seed)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approximators::PwqNet;
    use crate::env::{LtiSystem, StageCostConfig};
    use crate::geometry::Polytope;
    use crate::safety::{BarrierSet, ClassKParams};
    use crate::scmpc::ScmpcConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mpc(m: usize, sigma: f64) -> Scmpc {
        let cfg = ScmpcConfig { scenarios: m, ..ScmpcConfig::default() };
        Scmpc::new(LtiSystem::default(), BarrierSet::box_set(3.0), StageCostConfig::default(), cfg, sigma)
    }

    fn sampler() -> BoundarySampler {
        BoundarySampler::new(Polytope::hypercube(2, 2.0)).unwrap()
    }

    fn theta(seed: u64) -> ThetaParams {
        ThetaParams::initial(16, 4, 0.7, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn transition(c: &Scmpc, th: &ThetaParams, s: State) -> Transition {
        let out = c.policy(th, &s, &c.scenarios(1, 1)).unwrap();
        let next = c.system.a * s + c.system.b * out.action;
        Transition {
            state: s,
            action: out.action,
            cost: env::stage_cost(&c.cost, &c.barriers, &s, &out.action),
            next_state: next,
            scenario_seed: 1,
            value_seed: 2,
            explored: false,
        }
    }

    #[test]
    fn td_error_vanishes_at_the_noise_free_fixed_point() {
        let c = mpc(1, 0.0);
        let th = theta(0);
        let tr = transition(&c, &th, State::zeros());
        assert!(tr.action.norm() < 1e-9);
        assert!(td_error(&c, &th, &tr).unwrap().abs() < 1e-9);
    }

    #[test]
    fn td_error_shifts_with_the_target() {
        let c = mpc(4, 1.0);
        let th = theta(1);
        let tr = transition(&c, &th, State::new(1.0, -0.5));
        let d = td_error(&c, &th, &tr).unwrap();
        let shifted = Transition { cost: tr.cost + 0.25, ..tr.clone() };
        assert!((td_error(&c, &th, &shifted).unwrap() - d - 0.25).abs() < 1e-9);
        // replay reproduces delta
        assert_eq!(td_error(&c, &th, &tr).unwrap(), d);
    }

    #[test]
    fn zero_delta_batch_keeps_parameters() {
        let mut th = theta(2);
        let before = th.clone();
        let mut opt = RmsProp::new(th.n_params(), 0.005, 0.9, 1e-8);
        let rep = apply_update(&mut th, &mut opt, &[(0.0, vec![1.0; before.n_params()])]);
        assert!(rep.applied);
        assert_eq!(th, before);
        assert_eq!(opt.steps, 1);
    }

    #[test]
    fn projection_lands_on_the_bounds() {
        let mut th = ThetaParams::new(PwqNet::zeros(2, 2), ClassKParams::uniform(4, 0.999));
        th.pwq.biases.fill(-1e-6);
        let n = th.n_params();
        let k = th.gamma_offset();
        let mut opt = RmsProp::new(n, 0.5, 0.9, 1e-8);
        let mut g = vec![0.0; n];
        g[k] = 1.0; // pushes gamma_1 above 1
        g[k + 1] = -1.0; // pushes gamma_2 down by 1.58
        g[4] = 1.0; // pushes b_1 up
        g[6] = -1.0; // pushes w_1 negative
        apply_update(&mut th, &mut opt, &[(1.0, g)]);
        assert_eq!(th.classk.gamma[0], 1.0);
        assert_eq!(th.classk.gamma[1], 0.0);
        assert_eq!(th.pwq.biases[0], -1e-6);
        assert_eq!(th.pwq.output[0], 0.0);
        assert!(th.is_feasible());
    }

    #[test]
    fn first_step_direction_is_sign_of_gradient() {
        let mut th = theta(3);
        let before = th.flatten();
        let mut opt = RmsProp::new(th.n_params(), 1e-4, 0.9, 1e-8);
        let g: Vec<f64> = (0..th.n_params()).map(|k| ((k as f64) * 0.7).sin()).collect();
        apply_update(&mut th, &mut opt, &[(-2.0, g.clone())]);
        let after = th.flatten();
        for k in 0..g.len() {
            let expected = -2.0 * g[k];
            let moved = after[k] - before[k];
            if expected.abs() > 1e-3 && moved != 0.0 {
                assert_eq!(moved.signum(), expected.signum(), "entry {k}");
                let grad = expected.abs();
                let step = 1e-4 * grad / (0.1 * grad * grad + 1e-8).sqrt();
                assert!((moved.abs() - step).abs() < 1e-12, "entry {k}");
            }
        }
    }

    #[test]
    fn nonfinite_gradients_are_skipped() {
        let mut th = theta(4);
        let before = th.clone();
        let mut opt = RmsProp::new(th.n_params(), 0.005, 0.9, 1e-8);
        let mut g = vec![0.0; th.n_params()];
        g[0] = f64::NAN;
        let rep = apply_update(&mut th, &mut opt, &[(1.0, g)]);
        assert!(rep.nonfinite && !rep.applied);
        assert_eq!(th, before);
        assert_eq!(opt.steps, 0);
    }

    #[test]
    fn exploration_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.exploration_probability_at(0), 1.0);
        assert!((cfg.exploration_scale_at(230) - 0.501).abs() < 1e-3);
        assert!(cfg.exploration_probability_at(20_000) < 1e-20);
        let c = mpc(4, 1.0);
        let th = theta(5);
        let sc = c.scenarios(0, 1);
        for k in 0..20 {
            let (_, explored, q) = explore_action(&c, &th, &cfg, &State::new(0.5, 0.5), 0, &sc, &mut ChaCha8Rng::seed_from_u64(k)).unwrap();
            assert!(explored && q.norm() > 0.0);
        }
        let (out, explored, q) = explore_action(&c, &th, &cfg, &State::new(0.5, 0.5), 1_000_000, &sc, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(!explored && q == Action::zeros());
        assert_eq!(out.action, c.policy_with_exploration(&th, &State::new(0.5, 0.5), &sc, None).unwrap().action);
    }

    #[test]
    fn single_episode_applies_one_update() {
        let c = mpc(8, 1.0);
        let cfg = TrainConfig { episodes: 1, episode_length: 5, ..TrainConfig::default() };
        let out = train_seed(&c, &cfg, &sampler(), None, 7).unwrap();
        assert_eq!(out.log.len(), 1);
        assert!(out.log[0].update.applied);
        assert_eq!(out.checkpoint.optimizer.steps, 1);
        assert_eq!(out.log[0].steps, 5);
    }

    #[test]
    fn training_is_deterministic_and_feasible() {
        let c = mpc(8, 1.0);
        let cfg = TrainConfig { episodes: 3, episode_length: 6, ..TrainConfig::default() };
        let a = train(&c, &cfg, &sampler(), None, &[1, 2]).unwrap();
        let b = train(&c, &cfg, &sampler(), None, &[1, 2]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.checkpoint.to_text(), y.checkpoint.to_text());
            assert!(x.checkpoint.theta.is_feasible());
        }
        assert_ne!(a[0].checkpoint.theta, a[1].checkpoint.theta);
    }

    #[test]
    fn zero_learning_rate_is_pure_evaluation() {
        let c = mpc(8, 1.0);
        let cfg = TrainConfig { episodes: 3, episode_length: 5, learning_rate: 0.0, ..TrainConfig::default() };
        let out = train_seed(&c, &cfg, &sampler(), None, 3).unwrap();
        let init = ThetaParams::initial(16, 4, 0.7, &mut stream(3, Stream::Init, &[]));
        assert_eq!(out.checkpoint.theta, init);
    }
}
