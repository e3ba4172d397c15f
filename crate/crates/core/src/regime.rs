//! Random search for charge paths that deviate most from their running mean.
//!
//! Candidates are bang-bang controls `u_j = +-L` with independent fair signs,
//! integrated with clamping to `[0, C]`, and scored by
//! `sum_j (v_j - vbar_j)^2` with the inclusive running mean
//! `vbar_j = (v_0 + ... + v_j) / (j + 1)`.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::path_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub horizon: f64,
    pub capacity: f64,
    pub max_rate: f64,
    pub steps: usize,
    pub n_paths: usize,
    pub seed: u64,
    /// Initial charge; `None` means `C / 2`.
    pub v0: Option<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            capacity: 1.0,
            max_rate: 100.0,
            steps: 1000,
            n_paths: 2000,
            seed: 0,
            v0: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |x: f64| x.is_finite() && x > 0.0;
        if !(pos(self.horizon) && pos(self.capacity) && pos(self.max_rate)) {
            return Err(Error::InvalidParameter("T, C and L must be positive".into()));
        }
        if self.steps == 0 || self.n_paths == 0 {
            return Err(Error::InvalidParameter("steps and n_paths must be >= 1".into()));
        }
        let v0 = self.initial();
        if !(0.0..=self.capacity).contains(&v0) {
            return Err(Error::InvalidParameter(format!("v0 = {v0} outside [0, C]")));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn initial(&self) -> f64 {
        self.v0.unwrap_or(0.5 * self.capacity)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePath {
    pub index: usize,
    pub u: Vec<f64>,
    /// `steps + 1` charge levels starting at `v0`.
    pub v: Vec<f64>,
    pub score: f64,
}

/// Candidate `index`, drawn from its own substream.
pub fn binary_control(cfg: &ExperimentConfig, index: usize) -> Vec<f64> {
    let mut rng = path_rng(cfg.seed, index as u64);
    (0..cfg.steps)
        .map(|_| if rng.random::<bool>() { cfg.max_rate } else { -cfg.max_rate })
        .collect()
}

pub fn random_binary_controls(cfg: &ExperimentConfig) -> Vec<Vec<f64>> {
    (0..cfg.n_paths)
        .into_par_iter()
        .map(|i| binary_control(cfg, i))
        .collect()
}

/// `v_0 = v0`, `v_{j+1} = clamp(v_j + u_j dt, 0, C)`.
pub fn integrate_candidate(u: &[f64], cfg: &ExperimentConfig) -> Vec<f64> {
    let dt = cfg.dt();
    let mut v = Vec::with_capacity(u.len() + 1);
    let mut x = cfg.initial();
    v.push(x);
    for &r in u {
        x = (x + r * dt).clamp(0.0, cfg.capacity);
        v.push(x);
    }
    v
}

/// Inclusive running mean.
pub fn running_mean(v: &[f64]) -> Vec<f64> {
    let mut s = 0.0;
    v.iter()
        .enumerate()
        .map(|(j, x)| {
            s += x;
            s / (j + 1) as f64
        })
        .collect()
}

pub fn criterion(v: &[f64]) -> f64 {
    running_mean(v)
        .iter()
        .zip(v)
        .map(|(m, x)| (x - m) * (x - m))
        .sum()
}

pub fn sign_changes(u: &[f64]) -> usize {
    let signs: Vec<f64> = u.iter().filter(|x| **x != 0.0).map(|x| x.signum()).collect();
    signs.windows(2).filter(|w| w[0] != w[1]).count()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub best: CandidatePath,
    pub sign_changes: usize,
    /// Scores of every candidate in index order.
    pub scores: Vec<f64>,
}

impl ExperimentResult {
    /// Best path as `t,u,v,vbar`; the terminal row carries `u = 0`.
    pub fn write_csv<W: Write>(&self, mut w: W, cfg: &ExperimentConfig) -> std::io::Result<()> {
        writeln!(w, "t,u,v,vbar")?;
        let bar = running_mean(&self.best.v);
        for (j, (v, m)) in self.best.v.iter().zip(&bar).enumerate() {
            let u = self.best.u.get(j).copied().unwrap_or(0.0);
            writeln!(w, "{},{u},{v},{m}", j as f64 * cfg.dt())?;
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        format!(
            "best candidate {} score {} sign changes {}",
            self.best.index, self.best.score, self.sign_changes
        )
    }
}

/// Scores all candidates and returns the highest-scoring one (lowest index on ties).
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let scores: Vec<f64> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|i| criterion(&integrate_candidate(&binary_control(cfg, i), cfg)))
        .collect();
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    let u = binary_control(cfg, best);
    let v = integrate_candidate(&u, cfg);
    let sign_changes = sign_changes(&u);
    Ok(ExperimentResult {
        best: CandidatePath {
            index: best,
            score: scores[best],
            u,
            v,
        },
        sign_changes,
        scores,
    })
}
