//! Monte-Carlo cost-to-go of the horizon-12 baseline, used as the reference
//! for the learned terminal cost.

use rayon::prelude::*;

use crate::approximators::PwqNet;
use crate::env::{self, DisturbanceModel, EpisodeConfig, State};
use crate::error::{Error, Result};
use crate::geometry::Polytope;
use crate::rng::{derive_seed, Stream};
use crate::scmpc::{BaselineConfig, Scmpc};
use crate::solver::SolveResult;

/// Reference values on a set of states.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleGrid {
    pub states: Vec<State>,
    pub values: Vec<f64>,
    pub std_errors: Vec<f64>,
    /// Rollouts that completed, per state.
    pub rollouts: Vec<usize>,
}

/// `n x n` uniform grid over the bounding box of `set`, keeping members.
pub fn grid_states(set: &Polytope, n: usize) -> Result<Vec<State>> {
    if n < 2 {
        return Err(Error::invalid("grid needs at least two points per axis"));
    }
    let bound = |d: [f64; 2]| set.support(&d).ok_or_else(|| Error::invalid("set must be bounded"));
    let (x_hi, x_lo) = (bound([1.0, 0.0])?, -bound([-1.0, 0.0])?);
    let (y_hi, y_lo) = (bound([0.0, 1.0])?, -bound([0.0, -1.0])?);
    let mut out = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let s = State::new(
                x_lo + (x_hi - x_lo) * i as f64 / (n - 1) as f64,
                y_lo + (y_hi - y_lo) * j as f64 / (n - 1) as f64,
            );
            if set.contains(s.as_slice(), 1e-9) {
                out.push(s);
            }
        }
    }
    Ok(out)
}

/// Return of one closed-loop episode of `length` steps under the baseline.
/// Consecutive solves are warm started from the shifted previous solution.
pub fn baseline_return(mpc: &Scmpc, baseline: &BaselineConfig, s0: &State, length: usize, noise_seed: u64, scenario_seed: impl Fn(usize) -> u64) -> Result<f64> {
    let noise = DisturbanceModel::new(mpc.sigma, noise_seed);
    let mut previous: Option<SolveResult> = None;
    let log = env::rollout(&mpc.system, &mpc.cost, &mpc.barriers, &noise, &EpisodeConfig::new(length, *s0), |t, s| {
        let scenarios = mpc.scenarios(scenario_seed(t), baseline.horizon);
        let out = mpc.baseline_policy_warm(baseline, s, &scenarios, previous.as_ref())?;
        previous = Some(out.solve);
        Ok((out.action, ()))
    })?;
    Ok(log.total_cost())
}

/// Mean closed-loop return of `rollouts` episodes of `length` steps from
/// each state, with its standard error. Failed rollouts are dropped with a
/// warning.
pub fn oracle_cost_to_go(mpc: &Scmpc, baseline: &BaselineConfig, states: &[State], length: usize, rollouts: usize, seed: u64) -> Result<OracleGrid> {
    if states.is_empty() || rollouts < 2 {
        return Err(Error::invalid("oracle needs a nonempty grid and at least two rollouts"));
    }
    let per_state: Vec<(f64, f64, usize)> = states
        .par_iter()
        .enumerate()
        .map(|(k, s)| {
            let returns: Vec<f64> = (0..rollouts)
                .filter_map(|r| {
                    let (k, r) = (k as u64, r as u64);
                    let noise_seed = derive_seed(seed, Stream::Oracle, &[k, r]);
                    match baseline_return(mpc, baseline, s, length, noise_seed, |t| derive_seed(seed, Stream::Oracle, &[k, r, t as u64])) {
                        Ok(v) => Some(v),
                        Err(err) => {
                            log::warn!("oracle rollout {r} from state {k} failed: {err}");
                            None
                        }
                    }
                })
                .collect();
            let n = returns.len();
            if n < 2 {
                return (f64::NAN, f64::NAN, n);
            }
            let mean = returns.iter().sum::<f64>() / n as f64;
            let var = returns.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (mean, (var / n as f64).sqrt(), n)
        })
        .collect();
    if per_state.iter().any(|p| p.2 < 2) {
        return Err(Error::Resource("too many oracle rollouts failed".into()));
    }
    Ok(OracleGrid {
        states: states.to_vec(),
        values: per_state.iter().map(|p| p.0).collect(),
        std_errors: per_state.iter().map(|p| p.1).collect(),
        rollouts: per_state.iter().map(|p| p.2).collect(),
    })
}

/// NRMSE (RMSE over the value range) and R^2 of the PWQ terminal cost
/// against the oracle values.
pub fn fit_metrics(pwq: &PwqNet, grid: &OracleGrid) -> Result<(f64, f64)> {
    let predictions: Vec<f64> = grid.states.iter().map(|s| pwq.value(s.as_slice())).collect();
    fit_values(&predictions, &grid.values)
}

/// NRMSE and R^2 of `predictions` against `targets`.
pub fn fit_values(predictions: &[f64], targets: &[f64]) -> Result<(f64, f64)> {
    if predictions.len() != targets.len() || targets.is_empty() {
        return Err(Error::invalid("predictions and targets must be nonempty and of equal length"));
    }
    if targets.iter().chain(predictions).any(|v| !v.is_finite()) {
        return Err(Error::invalid("values must be finite"));
    }
    let n = targets.len() as f64;
    let mean = targets.iter().sum::<f64>() / n;
    let ss_tot: f64 = targets.iter().map(|v| (v - mean).powi(2)).sum();
    let (lo, hi) = targets.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if ss_tot == 0.0 || hi == lo {
        return Err(Error::Undefined("R^2 is undefined for constant targets".into()));
    }
    let ss_res: f64 = predictions.iter().zip(targets).map(|(p, v)| (p - v).powi(2)).sum();
    Ok(((ss_res / n).sqrt() / (hi - lo), 1.0 - ss_res / ss_tot))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{LtiSystem, StageCostConfig};
    use crate::safety::BarrierSet;
    use crate::scmpc::ScmpcConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn perfect_and_constant_fits() {
        let v = [1.0, 4.0, 2.0, 8.0];
        assert_eq!(fit_values(&v, &v).unwrap(), (0.0, 1.0));
        let mean = [3.75; 4];
        let (_, r2) = fit_values(&mean, &v).unwrap();
        assert!(r2.abs() < 1e-12);
        assert!(matches!(fit_values(&v, &[2.0; 4]), Err(Error::Undefined(_))));
    }

    #[test]
    fn r2_under_known_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let targets: Vec<f64> = (0..20_000).map(|_| rng.random_range(0.0..10.0)).collect();
        let noise = Normal::new(0.0, 1.0).unwrap();
        let preds: Vec<f64> = targets.iter().map(|v| v + noise.sample(&mut rng)).collect();
        // var of U(0, 10) is 100 / 12
        let expected = 1.0 - 1.0 / (100.0 / 12.0);
        let (_, r2) = fit_values(&preds, &targets).unwrap();
        assert!((r2 - expected).abs() < 0.05 * expected, "{r2} vs {expected}");
    }

    #[test]
    fn grid_filters_to_members() {
        let set = Polytope::new(2, vec![vec![1.0, 1.0], vec![-1.0, 0.0], vec![0.0, -1.0]], vec![1.0, 0.0, 0.0]).unwrap();
        let pts = grid_states(&set, 11).unwrap();
        // triangle x, y >= 0, x + y <= 1 on an 11 x 11 grid has 66 points
        assert_eq!(pts.len(), 66);
    }

    fn mpc(sigma: f64) -> Scmpc {
        let cfg = ScmpcConfig { scenarios: 8, ..ScmpcConfig::default() };
        Scmpc::new(LtiSystem::default(), BarrierSet::box_set(3.0), StageCostConfig::default(), cfg, sigma)
    }

    #[test]
    fn origin_is_free_without_noise() {
        let base = BaselineConfig { horizon: 4, ..BaselineConfig::default() };
        let g = oracle_cost_to_go(&mpc(0.0), &base, &[State::zeros()], 10, 2, 0).unwrap();
        assert!(g.values[0].abs() < 1e-12);
    }

    #[test]
    fn oracle_is_symmetric_and_standard_error_scales() {
        let c = mpc(1.0);
        let base = BaselineConfig { horizon: 4, ..BaselineConfig::default() };
        let s = State::new(1.5, -1.0);
        let g = oracle_cost_to_go(&c, &base, &[s, -s], 10, 64, 1).unwrap();
        let se = (g.std_errors[0].powi(2) + g.std_errors[1].powi(2)).sqrt();
        assert!((g.values[0] - g.values[1]).abs() <= 3.0 * se, "{:?}", g);
        let g2 = oracle_cost_to_go(&c, &base, &[s], 10, 256, 2).unwrap();
        let ratio = g.std_errors[0] / g2.std_errors[0];
        assert!((ratio - 2.0).abs() <= 0.4, "ratio {ratio}");
    }
}
