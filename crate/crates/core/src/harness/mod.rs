//! Experiment orchestration: configuration, the oracle, evaluation, CSV and
//! SVG outputs, and run manifests.

pub mod evaluate;
pub mod oracle;
pub mod plots;
pub mod records;

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use evaluate::{evaluate, quantile, summarize, EvalEpisode, Evaluation, PolicySummary, BASELINE, LEARNED};
pub use oracle::{fit_metrics, fit_values, grid_states, oracle_cost_to_go, OracleGrid};
pub use plots::emit_plots;

use crate::env::{LtiSystem, StageCostConfig};
use crate::error::{Error, Result};
use crate::geometry::{maximal_control_invariant, BoundarySampler, InvariantSet, Polytope};
use crate::learning::{self, Checkpoint, TrainConfig, TrainOutcome};
use crate::safety::BarrierSet;
use crate::scmpc::{BaselineConfig, Scmpc, ScmpcConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    /// Standard deviation of the scalar disturbance.
    pub sigma: f64,
    pub action_bound: f64,
    pub state_bound: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig { sigma: 1.0, action_bound: 0.5, state_bound: 3.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub enabled: bool,
    /// Points per axis of the grid over the invariant set's bounding box.
    pub grid: usize,
    pub rollouts: usize,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig { enabled: true, grid: 21, rollouts: 256, seed: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub episodes: usize,
    pub seed: u64,
    /// Episodes per policy whose state trajectories are written.
    pub trajectories: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig { episodes: 1000, seed: 2000, trajectories: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InvariantConfig {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for InvariantConfig {
    fn default() -> Self {
        InvariantConfig { tol: 1e-9, max_iter: 200 }
    }
}

/// Everything an experiment depends on; see `docs/config.md`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub env: EnvConfig,
    pub cost: StageCostConfig,
    pub scmpc: ScmpcConfig,
    pub baseline: BaselineConfig,
    pub train: TrainConfig,
    pub oracle: OracleConfig,
    pub evaluation: EvaluationConfig,
    pub invariant: InvariantConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: vec![0, 1, 2],
            env: EnvConfig::default(),
            cost: StageCostConfig::default(),
            scmpc: ScmpcConfig::default(),
            baseline: BaselineConfig::default(),
            train: TrainConfig::default(),
            oracle: OracleConfig::default(),
            evaluation: EvaluationConfig::default(),
            invariant: InvariantConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if !(self.env.sigma >= 0.0) {
            return Err(Error::Config("env.sigma must be nonnegative".into()));
        }
        self.system().validate()?;
        self.cost.validate()?;
        self.scmpc.validate()?;
        self.train.validate()?;
        if self.baseline.horizon == 0 || !(0.0..=1.0).contains(&self.baseline.gamma) {
            return Err(Error::Config("baseline horizon must be positive and gamma in [0, 1]".into()));
        }
        if self.oracle.enabled && (self.oracle.grid < 2 || self.oracle.rollouts < 2) {
            return Err(Error::Config("oracle grid and rollouts must be at least 2".into()));
        }
        Ok(())
    }

    pub fn system(&self) -> LtiSystem {
        LtiSystem { action_bound: self.env.action_bound, state_bound: self.env.state_bound, ..LtiSystem::default() }
    }

    pub fn mpc(&self) -> Scmpc {
        Scmpc::new(self.system(), BarrierSet::box_set(self.env.state_bound), self.cost.clone(), self.scmpc.clone(), self.env.sigma)
    }

    pub fn invariant_set(&self) -> Result<InvariantSet> {
        let sys = self.system();
        maximal_control_invariant(&sys, &Polytope::hypercube(2, sys.state_bound), self.invariant.tol, self.invariant.max_iter)
    }
}

/// Operation recorded in a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Train,
    Evaluate,
    InvariantSet,
}

/// Written next to the outputs of every run; re-running it reproduces the
/// CSV outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub mode: Mode,
    pub commit: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    pub config: ExperimentConfig,
}

impl Manifest {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join("manifest.toml"), toml::to_string(self).expect("manifest serializes"))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))
    }
}

fn create(path: PathBuf) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

pub fn write_invariant_set(cfg: &ExperimentConfig, out: &Path) -> Result<InvariantSet> {
    std::fs::create_dir_all(out)?;
    let inv = cfg.invariant_set()?;
    inv.set.write_csv(create(out.join("invariant_set.csv"))?)?;
    Ok(inv)
}

/// Invariant set, optional oracle, training of every seed; writes
/// `invariant_set.csv`, `oracle.csv`, `training_seed{K}.csv` and
/// `checkpoint_seed{K}.txt`.
pub fn run_train(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<TrainOutcome>> {
    cfg.validate()?;
    let inv = write_invariant_set(cfg, out)?;
    let mpc = cfg.mpc();
    let oracle = if cfg.oracle.enabled {
        let states = grid_states(&inv.set, cfg.oracle.grid)?;
        let grid = oracle_cost_to_go(&mpc, &cfg.baseline, &states, cfg.train.episode_length, cfg.oracle.rollouts, cfg.oracle.seed)?;
        records::write_oracle(create(out.join("oracle.csv"))?, &grid)?;
        Some(grid)
    } else {
        None
    };
    let start = BoundarySampler::new(inv.set)?;
    let outcomes = learning::train(&mpc, &cfg.train, &start, oracle.as_ref(), &cfg.seeds)?;
    for o in &outcomes {
        let seed = o.checkpoint.seed;
        records::write_training(create(out.join(format!("training_seed{seed}.csv")))?, o.checkpoint.theta.classk.gamma.len(), &o.log)?;
        o.checkpoint.save(&out.join(format!("checkpoint_seed{seed}.txt")))?;
    }
    Ok(outcomes)
}

/// Learned-versus-baseline evaluation; writes `evaluation.csv`,
/// `summary.csv`, `trajectories.csv`, `noise_streams.csv` and
/// `invariant_set.csv`.
pub fn run_evaluate(cfg: &ExperimentConfig, checkpoint: &Checkpoint, out: &Path) -> Result<Evaluation> {
    cfg.validate()?;
    let inv = write_invariant_set(cfg, out)?;
    let mpc = cfg.mpc();
    let start = BoundarySampler::new(inv.set)?;
    let ev = evaluate(&mpc, &checkpoint.theta, &cfg.baseline, &start, cfg.evaluation.episodes, cfg.train.episode_length, cfg.evaluation.seed)?;
    records::write_evaluation(create(out.join("evaluation.csv"))?, &ev.episodes)?;
    records::write_summary(create(out.join("summary.csv"))?, &ev.summaries())?;
    records::write_trajectories(create(out.join("trajectories.csv"))?, &ev.episodes, cfg.evaluation.trajectories)?;
    let mut w = csv::Writer::from_writer(create(out.join("noise_streams.csv"))?);
    w.write_record(["policy", "episode", "noise_hash"])?;
    for e in &ev.episodes {
        w.write_record([e.policy.to_string(), e.episode.to_string(), format!("{:016x}", e.noise_hash)])?;
    }
    w.flush()?;
    Ok(ev)
}

/// Headline comparison of an evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    /// Baseline mean solve time over learned mean solve time.
    pub solve_time_ratio: f64,
    /// `|median_learned - median_baseline| / median_baseline`.
    pub median_return_gap: f64,
    /// Larger over smaller violation percentage (1 when both are zero).
    pub violation_ratio: f64,
    pub learned: PolicySummary,
    pub baseline: PolicySummary,
}

pub fn compare(summaries: &[PolicySummary]) -> Result<Comparison> {
    let find = |p: &str| summaries.iter().find(|s| s.policy == p).cloned().ok_or_else(|| Error::invalid(format!("no `{p}` episodes")));
    let (learned, baseline) = (find(LEARNED)?, find(BASELINE)?);
    let (vl, vb) = (learned.violation_percent, baseline.violation_percent);
    let violation_ratio = if vl == 0.0 && vb == 0.0 { 1.0 } else { vl.max(vb) / vl.min(vb) };
    Ok(Comparison {
        solve_time_ratio: baseline.mean_solve_time_s / learned.mean_solve_time_s,
        median_return_gap: (learned.return_median - baseline.return_median).abs() / baseline.return_median.abs(),
        violation_ratio,
        learned,
        baseline,
    })
}

/// Reads `evaluation.csv` from `dir`, writes `comparison.csv` and returns
/// the comparison.
pub fn run_compare(dir: &Path) -> Result<Comparison> {
    let t = records::Table::read(File::open(dir.join("evaluation.csv"))?)?;
    let mut episodes = Vec::new();
    for row in 0..t.len() {
        let policy = match t.str(row, "policy")? {
            LEARNED => LEARNED,
            BASELINE => BASELINE,
            other => return Err(Error::Parse { row: row + 2, message: format!("unknown policy `{other}`") }),
        };
        let total_steps = t.f64(row, "total_steps")? as usize;
        episodes.push(EvalEpisode {
            policy,
            episode: t.f64(row, "episode")? as usize,
            total_cost: t.f64(row, "return")?,
            violating_steps: t.f64(row, "violating_steps")? as usize,
            total_steps,
            // per-step times are not stored; the episode mean stands in for each step
            solve_times: vec![t.f64(row, "mean_solve_time_s")?; total_steps],
            states: Vec::new(),
            noise_hash: 0,
        });
    }
    let ev = Evaluation { episodes };
    let c = compare(&ev.summaries())?;
    let mut w = csv::Writer::from_writer(create(dir.join("comparison.csv"))?);
    w.write_record(["solve_time_ratio", "median_return_gap", "violation_ratio"])?;
    w.write_record([c.solve_time_ratio.to_string(), c.median_return_gap.to_string(), c.violation_ratio.to_string()])?;
    w.flush()?;
    Ok(c)
}

/// Re-executes a manifest into `out`.
pub fn rerun(manifest: &Manifest, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    match manifest.mode {
        Mode::Train => {
            run_train(&manifest.config, out)?;
        }
        Mode::Evaluate => {
            let path = manifest.checkpoint.as_ref().ok_or_else(|| Error::Config("evaluate manifest without checkpoint".into()))?;
            run_evaluate(&manifest.config, &Checkpoint::load(Path::new(path))?, out)?;
        }
        Mode::InvariantSet => {
            write_invariant_set(&manifest.config, out)?;
        }
    }
    manifest.save(out)
}

/// CSV (and checkpoint) files of `a` that are missing from `b` or differ
/// from it, ignoring wall-clock columns.
pub fn differing_outputs(a: &Path, b: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = std::fs::read_dir(a)?
        .filter_map(|e| e.ok().and_then(|e| e.file_name().into_string().ok()))
        .filter(|n| n.ends_with(".csv") || (n.starts_with("checkpoint") && n.ends_with(".txt")))
        .collect();
    names.sort();
    let mut differ = Vec::new();
    for name in names {
        let (pa, pb) = (a.join(&name), b.join(&name));
        if !pb.exists() {
            differ.push(name);
            continue;
        }
        let same = if name.ends_with(".csv") {
            let ta = records::Table::read(File::open(&pa)?)?.without(&records::TIMING_COLUMNS);
            let tb = records::Table::read(File::open(&pb)?)?.without(&records::TIMING_COLUMNS);
            ta == tb
        } else {
            std::fs::read(&pa)? == std::fs::read(&pb)?
        };
        if !same {
            differ.push(name);
        }
    }
    Ok(differ)
}
