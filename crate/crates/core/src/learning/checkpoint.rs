//! Plain-text checkpoints: one `key = value` per line, parameters in the
//! flat order `(W row-major, b, w, gamma)` followed by the optimizer state.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::RmsProp;
use crate::approximators::PwqNet;
use crate::error::{Error, Result};
use crate::safety::ClassKParams;
use crate::scmpc::ThetaParams;

const FORMAT: &str = "mpcrl-checkpoint-1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub episodes: usize,
    pub theta: ThetaParams,
    pub optimizer: RmsProp,
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let pwq = &self.theta.pwq;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("format", FORMAT.into());
        kv("seed", self.seed.to_string());
        kv("episodes", self.episodes.to_string());
        kv("hidden", pwq.hidden().to_string());
        kv("inputs", pwq.inputs().to_string());
        kv("barriers", self.theta.classk.gamma.len().to_string());
        for r in 0..pwq.hidden() {
            for c in 0..pwq.inputs() {
                kv(&format!("pwq.weights.{r}.{c}"), pwq.weights[(r, c)].to_string());
            }
        }
        for (j, b) in pwq.biases.iter().enumerate() {
            kv(&format!("pwq.biases.{j}"), b.to_string());
        }
        for (j, w) in pwq.output.iter().enumerate() {
            kv(&format!("pwq.output.{j}"), w.to_string());
        }
        for (j, g) in self.theta.classk.gamma.iter().enumerate() {
            kv(&format!("gamma.{j}"), g.to_string());
        }
        let opt = &self.optimizer;
        kv("rmsprop.learning_rate", opt.learning_rate.to_string());
        kv("rmsprop.decay", opt.decay.to_string());
        kv("rmsprop.epsilon", opt.epsilon.to_string());
        kv("rmsprop.steps", opt.steps.to_string());
        for (k, v) in opt.second_moment.iter().enumerate() {
            kv(&format!("rmsprop.second_moment.{k}"), v.to_string());
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse { row: i + 1, message: "expected `key = value`".into() })?;
            if map.insert(k.trim().to_string(), (i + 1, v.trim().to_string())).is_some() {
                return Err(Error::Parse { row: i + 1, message: format!("duplicate key {}", k.trim()) });
            }
        }
        let mut take = |k: &str| -> Result<(usize, String)> { map.remove(k).ok_or_else(|| Error::Config(format!("checkpoint is missing `{k}`"))) };
        fn num<T: std::str::FromStr>((row, v): (usize, String)) -> Result<T> {
            v.parse().map_err(|_| Error::Parse { row, message: format!("cannot parse `{v}`") })
        }
        let (_, format) = take("format")?;
        if format != FORMAT {
            return Err(Error::Config(format!("unsupported checkpoint format `{format}`")));
        }
        let seed: u64 = num(take("seed")?)?;
        let episodes: usize = num(take("episodes")?)?;
        let hidden: usize = num(take("hidden")?)?;
        let inputs: usize = num(take("inputs")?)?;
        let barriers: usize = num(take("barriers")?)?;
        let mut weights = DMatrix::zeros(hidden, inputs);
        for r in 0..hidden {
            for c in 0..inputs {
                weights[(r, c)] = num(take(&format!("pwq.weights.{r}.{c}"))?)?;
            }
        }
        let biases = (0..hidden).map(|j| num(take(&format!("pwq.biases.{j}"))?)).collect::<Result<Vec<f64>>>()?;
        let output = (0..hidden).map(|j| num(take(&format!("pwq.output.{j}"))?)).collect::<Result<Vec<f64>>>()?;
        let gamma = (0..barriers).map(|j| num(take(&format!("gamma.{j}"))?)).collect::<Result<Vec<f64>>>()?;
        let theta = ThetaParams::new(PwqNet::new(weights, DVector::from_vec(biases), DVector::from_vec(output))?, ClassKParams::new(gamma)?);
        let mut optimizer = RmsProp::new(theta.n_params(), num(take("rmsprop.learning_rate")?)?, num(take("rmsprop.decay")?)?, num(take("rmsprop.epsilon")?)?);
        optimizer.steps = num(take("rmsprop.steps")?)?;
        for k in 0..theta.n_params() {
            optimizer.second_moment[k] = num(take(&format!("rmsprop.second_moment.{k}"))?)?;
        }
        if let Some((k, (row, _))) = map.into_iter().next() {
            return Err(Error::Parse { row, message: format!("unknown key `{k}`") });
        }
        Ok(Checkpoint { seed, episodes, theta, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}
