//! Closed-loop comparison of the learned unit-horizon controller and the
//! fixed multi-step baseline on common random numbers.

use rayon::prelude::*;

use crate::env::{self, DisturbanceModel, EpisodeConfig, EpisodeLog, State};
use crate::error::{Error, Result};
use crate::geometry::BoundarySampler;
use crate::rng::{derive_seed, hash_f64s, stream, Stream};
use crate::safety::{wilson_interval, Z_95};
use crate::scmpc::{BaselineConfig, PolicyOutput, Scmpc, ThetaParams};

pub const LEARNED: &str = "learned";
pub const BASELINE: &str = "baseline";

/// One evaluated episode of one policy.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalEpisode {
    pub policy: &'static str,
    pub episode: usize,
    pub total_cost: f64,
    pub violating_steps: usize,
    pub total_steps: usize,
    pub solve_times: Vec<f64>,
    pub states: Vec<State>,
    /// Hash of the environment noise sequence.
    pub noise_hash: u64,
}

impl EvalEpisode {
    pub fn mean_solve_time(&self) -> f64 {
        if self.solve_times.is_empty() {
            return f64::NAN;
        }
        self.solve_times.iter().sum::<f64>() / self.solve_times.len() as f64
    }

    pub fn median_solve_time(&self) -> f64 {
        quantile(&self.solve_times, 0.5)
    }
}

/// Linear-interpolation quantile (type 7); NaN for an empty sample.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// Aggregate over the episodes of one policy.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySummary {
    pub policy: String,
    pub episodes: usize,
    pub return_min: f64,
    pub return_q1: f64,
    pub return_median: f64,
    pub return_q3: f64,
    pub return_max: f64,
    pub return_mean: f64,
    pub violating_steps: usize,
    pub total_steps: usize,
    /// Violating steps over total steps, in percent, with a 95% Wilson interval.
    pub violation_percent: f64,
    pub violation_ci_low: f64,
    pub violation_ci_high: f64,
    pub mean_solve_time_s: f64,
    pub p50_solve_time_s: f64,
}

pub fn summarize(policy: &str, episodes: &[&EvalEpisode]) -> PolicySummary {
    let returns: Vec<f64> = episodes.iter().map(|e| e.total_cost).collect();
    let times: Vec<f64> = episodes.iter().flat_map(|e| e.solve_times.iter().copied()).collect();
    let violating: usize = episodes.iter().map(|e| e.violating_steps).sum();
    let total: usize = episodes.iter().map(|e| e.total_steps).sum();
    let (lo, hi) = wilson_interval(violating, total, Z_95);
    PolicySummary {
        policy: policy.to_string(),
        episodes: episodes.len(),
        return_min: quantile(&returns, 0.0),
        return_q1: quantile(&returns, 0.25),
        return_median: quantile(&returns, 0.5),
        return_q3: quantile(&returns, 0.75),
        return_max: quantile(&returns, 1.0),
        return_mean: if returns.is_empty() { f64::NAN } else { returns.iter().sum::<f64>() / returns.len() as f64 },
        violating_steps: violating,
        total_steps: total,
        violation_percent: if total == 0 { f64::NAN } else { 100.0 * violating as f64 / total as f64 },
        violation_ci_low: 100.0 * lo,
        violation_ci_high: 100.0 * hi,
        mean_solve_time_s: if times.is_empty() { f64::NAN } else { times.iter().sum::<f64>() / times.len() as f64 },
        p50_solve_time_s: quantile(&times, 0.5),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Learned and baseline episodes interleaved: `2e` and `2e + 1`.
    pub episodes: Vec<EvalEpisode>,
}

impl Evaluation {
    pub fn of(&self, policy: &str) -> Vec<&EvalEpisode> {
        self.episodes.iter().filter(|e| e.policy == policy).collect()
    }

    pub fn summaries(&self) -> Vec<PolicySummary> {
        [LEARNED, BASELINE].iter().map(|p| summarize(p, &self.of(p))).collect()
    }
}

/// Runs a policy, retrying once with fresh scenarios on solver failure.
fn with_retry(seed: u64, episode: u64, t: u64, run: impl Fn(u64) -> Result<PolicyOutput>) -> Result<PolicyOutput> {
    let first = derive_seed(seed, Stream::Scenarios, &[episode, t]);
    run(first).or_else(|err| {
        log::warn!("episode {episode} step {t}: {err}; retrying with fresh scenarios");
        run(derive_seed(seed, Stream::Scenarios, &[episode, t, 1]))
    })
}

fn episode_record(policy: &'static str, episode: usize, log: EpisodeLog<f64>) -> EvalEpisode {
    EvalEpisode {
        policy,
        episode,
        total_cost: log.total_cost(),
        violating_steps: log.violations(),
        total_steps: log.len(),
        solve_times: log.steps.iter().map(|s| s.diagnostics).collect(),
        noise_hash: hash_f64s(log.steps.iter().map(|s| s.disturbance)),
        states: log.states(),
    }
}

/// Runs both controllers for `episodes` episodes from boundary-sampled
/// initial states. Per episode, the initial state, the environment noise and
/// the scenario seeds are shared by the two controllers.
pub fn evaluate(
    mpc: &Scmpc,
    theta: &ThetaParams,
    baseline: &BaselineConfig,
    start: &BoundarySampler,
    episodes: usize,
    length: usize,
    seed: u64,
) -> Result<Evaluation> {
    let per_episode: Vec<[EvalEpisode; 2]> = (0..episodes)
        .into_par_iter()
        .map(|k| {
            let e = k as u64;
            let s0 = start.sample(&mut stream(seed, Stream::InitialState, &[e]));
            let noise = DisturbanceModel::new(mpc.sigma, derive_seed(seed, Stream::EnvNoise, &[e]));
            let cfg = EpisodeConfig::new(length, s0);
            let learned = env::rollout(&mpc.system, &mpc.cost, &mpc.barriers, &noise, &cfg, |t, s| {
                let out = with_retry(seed, e, t as u64, |sc| mpc.policy_with_exploration(theta, s, &mpc.scenarios(sc, mpc.cfg.horizon), None))?;
                Ok((out.action, out.solve.wall_time))
            })?;
            let base = env::rollout(&mpc.system, &mpc.cost, &mpc.barriers, &noise, &cfg, |t, s| {
                let out = with_retry(seed, e, t as u64, |sc| mpc.baseline_policy(baseline, s, &mpc.scenarios(sc, baseline.horizon)))?;
                Ok((out.action, out.solve.wall_time))
            })?;
            let pair = [episode_record(LEARNED, k, learned), episode_record(BASELINE, k, base)];
            if pair[0].noise_hash != pair[1].noise_hash {
                return Err(Error::invalid("noise streams of the compared policies differ"));
            }
            Ok(pair)
        })
        .collect::<Result<_>>()?;
    Ok(Evaluation { episodes: per_episode.into_iter().flatten().collect() })
}
