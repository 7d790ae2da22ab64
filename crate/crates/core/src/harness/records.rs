//! CSV schemas of the experiment outputs.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::harness::evaluate::{EvalEpisode, PolicySummary};
use crate::harness::oracle::OracleGrid;
use crate::learning::EpisodeStats;

pub const EVALUATION_HEADER: [&str; 7] = ["policy", "episode", "return", "violating_steps", "total_steps", "mean_solve_time_s", "p50_solve_time_s"];
pub const TRAJECTORY_HEADER: [&str; 5] = ["policy", "episode", "t", "s1", "s2"];
pub const ORACLE_HEADER: [&str; 5] = ["s1", "s2", "value", "std_error", "rollouts"];
pub const SUMMARY_HEADER: [&str; 15] = [
    "policy",
    "episodes",
    "return_min",
    "return_q1",
    "return_median",
    "return_q3",
    "return_max",
    "return_mean",
    "violating_steps",
    "total_steps",
    "violation_percent",
    "violation_ci_low",
    "violation_ci_high",
    "mean_solve_time_s",
    "p50_solve_time_s",
];

/// Columns that hold wall-clock measurements; they are excluded when runs
/// are compared for reproducibility.
pub const TIMING_COLUMNS: [&str; 2] = ["mean_solve_time_s", "p50_solve_time_s"];

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn training_header(n_gamma: usize) -> Vec<String> {
    let mut h: Vec<String> = ["episode", "return", "violations", "mean_abs_td"].iter().map(|s| s.to_string()).collect();
    h.extend((1..=n_gamma).map(|j| format!("gamma_{j}")));
    h.push("nrmse".into());
    h.push("r2".into());
    h
}

pub fn write_training<W: Write>(w: W, n_gamma: usize, log: &[EpisodeStats]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(training_header(n_gamma))?;
    for s in log {
        let mut rec = vec![s.episode.to_string(), s.total_cost.to_string(), s.violations.to_string(), s.mean_abs_td.to_string()];
        rec.extend(s.gamma.iter().map(|g| g.to_string()));
        rec.push(opt(s.nrmse));
        rec.push(opt(s.r2));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_evaluation<W: Write>(w: W, episodes: &[EvalEpisode]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(EVALUATION_HEADER)?;
    for e in episodes {
        out.write_record([
            e.policy.to_string(),
            e.episode.to_string(),
            e.total_cost.to_string(),
            e.violating_steps.to_string(),
            e.total_steps.to_string(),
            e.mean_solve_time().to_string(),
            e.median_solve_time().to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// State trajectories of the first `max_episodes` episodes of each policy.
pub fn write_trajectories<W: Write>(w: W, episodes: &[EvalEpisode], max_episodes: usize) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(TRAJECTORY_HEADER)?;
    for e in episodes.iter().filter(|e| e.episode < max_episodes) {
        for (t, s) in e.states.iter().enumerate() {
            out.write_record([e.policy.to_string(), e.episode.to_string(), t.to_string(), s[0].to_string(), s[1].to_string()])?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_summary<W: Write>(w: W, summaries: &[PolicySummary]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(SUMMARY_HEADER)?;
    for s in summaries {
        out.write_record([
            s.policy.clone(),
            s.episodes.to_string(),
            s.return_min.to_string(),
            s.return_q1.to_string(),
            s.return_median.to_string(),
            s.return_q3.to_string(),
            s.return_max.to_string(),
            s.return_mean.to_string(),
            s.violating_steps.to_string(),
            s.total_steps.to_string(),
            s.violation_percent.to_string(),
            s.violation_ci_low.to_string(),
            s.violation_ci_high.to_string(),
            s.mean_solve_time_s.to_string(),
            s.p50_solve_time_s.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_oracle<W: Write>(w: W, grid: &OracleGrid) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(ORACLE_HEADER)?;
    for k in 0..grid.states.len() {
        let s = grid.states[k];
        out.write_record([s[0].to_string(), s[1].to_string(), grid.values[k].to_string(), grid.std_errors[k].to_string(), grid.rollouts[k].to_string()])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_oracle<R: Read>(r: R) -> Result<OracleGrid> {
    let t = Table::read(r)?;
    let mut g = OracleGrid { states: Vec::new(), values: Vec::new(), std_errors: Vec::new(), rollouts: Vec::new() };
    for row in 0..t.len() {
        g.states.push(crate::env::State::new(t.f64(row, "s1")?, t.f64(row, "s2")?));
        g.values.push(t.f64(row, "value")?);
        g.std_errors.push(t.f64(row, "std_error")?);
        g.rollouts.push(t.f64(row, "rollouts")? as usize);
    }
    Ok(g)
}

/// A parsed CSV file with named columns. Row numbers in errors count the
/// header as row 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn read<R: Read>(r: R) -> Result<Table> {
        let mut reader = csv::ReaderBuilder::new().flexible(false).from_reader(r);
        let header: Vec<String> = reader
            .headers()
            .map_err(|e| Error::Parse { row: 1, message: e.to_string() })?
            .iter()
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::Parse { row: i + 2, message: e.to_string() })?;
            rows.push(rec.iter().map(str::to_string).collect());
        }
        Ok(Table { header, rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Parse { row: 1, message: format!("missing column `{name}`") })
    }

    pub fn str(&self, row: usize, name: &str) -> Result<&str> {
        Ok(&self.rows[row][self.column(name)?])
    }

    pub fn f64(&self, row: usize, name: &str) -> Result<f64> {
        let v = self.str(row, name)?;
        v.parse().map_err(|_| Error::Parse { row: row + 2, message: format!("`{v}` in column `{name}` is not a number") })
    }

    /// Empty cells read as `None`.
    pub fn opt_f64(&self, row: usize, name: &str) -> Result<Option<f64>> {
        if self.str(row, name)?.is_empty() {
            Ok(None)
        } else {
            self.f64(row, name).map(Some)
        }
    }

    /// The table with the named columns removed.
    pub fn without(&self, names: &[&str]) -> Table {
        let keep: Vec<usize> = (0..self.header.len()).filter(|&i| !names.contains(&self.header[i].as_str())).collect();
        Table {
            header: keep.iter().map(|&i| self.header[i].clone()).collect(),
            rows: self.rows.iter().map(|r| keep.iter().map(|&i| r[i].clone()).collect()).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learning::UpdateReport;

    #[test]
    fn training_round_trip_with_missing_metrics() {
        let stats = EpisodeStats {
            episode: 0,
            total_cost: 12.5,
            violations: 1,
            steps: 30,
            mean_abs_td: 0.25,
            gamma: vec![0.7; 4],
            nrmse: None,
            r2: Some(0.5),
            update: UpdateReport { used: 30, applied: true, nonfinite: false },
            failed: false,
        };
        let mut buf = Vec::new();
        write_training(&mut buf, 4, &[stats]).unwrap();
        let t = Table::read(buf.as_slice()).unwrap();
        assert_eq!(t.header, training_header(4));
        assert_eq!(t.opt_f64(0, "nrmse").unwrap(), None);
        assert_eq!(t.opt_f64(0, "r2").unwrap(), Some(0.5));
        assert_eq!(t.f64(0, "return").unwrap(), 12.5);
    }

    #[test]
    fn parse_errors_carry_the_row() {
        let t = Table::read("a,b\n1,2\n3,x\n".as_bytes()).unwrap();
        assert!(matches!(t.f64(1, "b"), Err(Error::Parse { row: 3, .. })));
        assert!(matches!(Table::read("a,b\n1,2\n3\n".as_bytes()), Err(Error::Parse { row: 3, .. })));
    }

    #[test]
    fn empty_evaluation_has_only_the_header() {
        let mut buf = Vec::new();
        write_evaluation(&mut buf, &[]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), format!("{}\n", EVALUATION_HEADER.join(",")));
    }
}
