use std::path::{Path, PathBuf};
use std::process::Command;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use mpcrl::harness::{self, ExperimentConfig, Manifest, Mode};
use mpcrl::learning::Checkpoint;
use mpcrl::safety::{lipschitz_cbf_constant, sample_bound_convex, sample_bound_nonconvex, RiskBudget};

#[derive(Parser)]
#[command(name = "mpcrl", version, about = "Stochastic MPC with learnable probabilistic CBF constraints")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the unit-horizon controller for every seed.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// `a..b` (inclusive) or a comma-separated list; overrides the config.
        #[arg(long)]
        seeds: Option<String>,
        /// Overrides `train.episodes`.
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a checkpoint against the multi-step baseline.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `evaluation.episodes`.
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scenario counts for a risk level and confidence.
    Bounds {
        #[arg(long)]
        epsilon: f64,
        #[arg(long)]
        beta: f64,
        /// Steps the episode risk is spread over.
        #[arg(long, default_value_t = 1)]
        steps: usize,
        /// Prediction horizon of the controller.
        #[arg(long, default_value_t = 1)]
        horizon: usize,
        /// Decision variables per step.
        #[arg(long)]
        n_actions: usize,
        #[arg(long)]
        zeta: Option<f64>,
        /// Lipschitz constant of the dynamics.
        #[arg(long, default_value_t = 1.0)]
        lf: f64,
        /// Lipschitz constant of the barrier.
        #[arg(long, default_value_t = 1.0)]
        lh: f64,
        /// Action-set diameter.
        #[arg(long, default_value_t = 1.0)]
        da: f64,
    },
    /// Maximal control invariant set of the nominal system.
    InvariantSet {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Headline ratios of an evaluation directory.
    Compare {
        #[arg(long = "in")]
        dir: PathBuf,
    },
    /// SVG figures from the CSV files of a directory.
    Plot {
        #[arg(long = "in")]
        dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-executes a manifest and reports CSV files that differ.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    if let Some((a, b)) = text.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse()?, b.trim().trim_start_matches('=').parse()?);
        if b < a {
            bail!("empty seed range `{text}`");
        }
        return Ok((a..=b).collect());
    }
    text.split(',').map(|s| s.trim().parse().with_context(|| format!("bad seed `{s}`"))).collect()
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => Ok(ExperimentConfig::load(p)?),
        None => Ok(ExperimentConfig::default()),
    }
}

fn commit() -> String {
    Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

fn manifest(mode: Mode, checkpoint: Option<&Path>, config: ExperimentConfig) -> Result<Manifest> {
    let checkpoint = match checkpoint {
        Some(p) => Some(std::fs::canonicalize(p)?.display().to_string()),
        None => None,
    };
    Ok(Manifest { mode, commit: commit(), checkpoint, config })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::Train { config, seeds, episodes, out } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seeds {
                cfg.seeds = parse_seeds(&s)?;
            }
            if let Some(e) = episodes {
                cfg.train.episodes = e;
            }
            cfg.validate()?;
            std::fs::create_dir_all(&out)?;
            let outcomes = harness::run_train(&cfg, &out)?;
            manifest(Mode::Train, None, cfg)?.save(&out)?;
            for o in outcomes {
                let last = o.log.last();
                println!(
                    "seed {}: gamma {:?}, r2 {}",
                    o.checkpoint.seed,
                    o.checkpoint.theta.classk.gamma,
                    last.and_then(|s| s.r2).map_or("n/a".into(), |r| format!("{r:.4}"))
                );
            }
        }
        Cmd::Evaluate { checkpoint, config, episodes, out } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(e) = episodes {
                cfg.evaluation.episodes = e;
            }
            let ck = Checkpoint::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            std::fs::create_dir_all(&out)?;
            let ev = harness::run_evaluate(&cfg, &ck, &out)?;
            manifest(Mode::Evaluate, Some(&checkpoint), cfg)?.save(&out)?;
            for s in ev.summaries() {
                println!(
                    "{}: median return {:.3}, violations {:.4}%, mean solve {:.3e} s",
                    s.policy, s.return_median, s.violation_percent, s.mean_solve_time_s
                );
            }
        }
        Cmd::Bounds { epsilon, beta, steps, horizon, n_actions, zeta, lf, lh, da } => {
            let budget = RiskBudget::new(epsilon, steps, beta, zeta.unwrap_or(0.0))?;
            println!("xi = {}", budget.xi);
            println!("convex: M = {}", sample_bound_convex(&budget, horizon, n_actions)?);
            match zeta {
                Some(_) => {
                    let l = lipschitz_cbf_constant(lf, lh);
                    println!("nonconvex: M = {} (L = {l})", sample_bound_nonconvex(&budget, horizon, n_actions, da, l)?);
                }
                None => println!("nonconvex: needs --zeta"),
            }
        }
        Cmd::InvariantSet { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let inv = harness::write_invariant_set(&cfg, &out)?;
            manifest(Mode::InvariantSet, None, cfg)?.save(&out)?;
            println!("{} facets after {} iterations (converged: {})", inv.set.n_rows(), inv.iterations, inv.converged);
        }
        Cmd::Compare { dir } => {
            let c = harness::run_compare(&dir)?;
            println!("solve time ratio (baseline / learned): {:.2}", c.solve_time_ratio);
            println!("median return gap: {:.2}%", 100.0 * c.median_return_gap);
            println!("violation ratio: {:.2}", c.violation_ratio);
        }
        Cmd::Plot { dir, out } => {
            for p in harness::emit_plots(&dir, out.as_deref().unwrap_or(&dir))? {
                println!("{}", p.display());
            }
        }
        Cmd::Rerun { manifest, out } => {
            let m = Manifest::load(&manifest)?;
            harness::rerun(&m, &out)?;
            let original = manifest.parent().unwrap_or(Path::new("."));
            let differ = harness::differing_outputs(original, &out)?;
            if differ.is_empty() {
                println!("all outputs reproduced");
            } else {
                bail!("outputs differ: {}", differ.join(", "));
            }
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    run(Cli::parse())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("0..9").unwrap(), (0..10).collect::<Vec<_>>());
        assert_eq!(parse_seeds("3..=4").unwrap(), vec![3, 4]);
        assert_eq!(parse_seeds("5, 1").unwrap(), vec![5, 1]);
        assert!(parse_seeds("4..2").is_err());
        assert!(parse_seeds("x").is_err());
    }
}
