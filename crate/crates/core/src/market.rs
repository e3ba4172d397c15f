//! Latent-factor diffusion `dx = g(x,t) dt + beta(x,t) dw` and the map to
//! production `p = exp(x_1)` and price `S = exp(x_2)`.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MarketPath, TimeGrid};

pub type DriftFn = Arc<dyn Fn(&[f64], f64) -> Vec<f64> + Send + Sync>;
pub type DiffusionFn = Arc<dyn Fn(&[f64], f64) -> Vec<Vec<f64>> + Send + Sync>;

#[derive(Clone)]
pub enum Drift {
    Constant(Vec<f64>),
    /// `offset + matrix * x`.
    Affine {
        offset: Vec<f64>,
        matrix: Vec<Vec<f64>>,
    },
    Custom(DriftFn),
}

#[derive(Clone)]
pub enum Diffusion {
    /// Constant `n x n` matrix.
    Constant(Vec<Vec<f64>>),
    Custom(DiffusionFn),
}

impl fmt::Debug for Drift {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Drift::Constant(v) => f.debug_tuple("Constant").field(v).finish(),
            Drift::Affine { offset, matrix } => f
                .debug_struct("Affine")
                .field("offset", offset)
                .field("matrix", matrix)
                .finish(),
            Drift::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

impl fmt::Debug for Diffusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diffusion::Constant(m) => f.debug_tuple("Constant").field(m).finish(),
            Diffusion::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DiffusionSpec {
    pub drift: Drift,
    pub diffusion: Diffusion,
    pub x0: Vec<f64>,
}

impl DiffusionSpec {
    pub fn new(drift: Drift, diffusion: Diffusion, x0: Vec<f64>) -> Result<Self> {
        let spec = Self { drift, diffusion, x0 };
        spec.check_shapes()?;
        Ok(spec)
    }

    /// Zero drift and diffusion: `p` and `S` stay at `exp(x0)`.
    pub fn frozen(x0: Vec<f64>) -> Result<Self> {
        let n = x0.len();
        Self::new(
            Drift::Constant(vec![0.0; n]),
            Diffusion::Constant(vec![vec![0.0; n]; n]),
            x0,
        )
    }

    /// Constant log-drift and diagonal volatility: each factor is a Brownian
    /// motion with drift, so `exp(x_k)` is geometric Brownian.
    pub fn log_gbm(x0: Vec<f64>, log_drift: Vec<f64>, vol: Vec<f64>) -> Result<Self> {
        let n = x0.len();
        let mut beta = vec![vec![0.0; n]; n];
        for (k, s) in vol.iter().enumerate().take(n) {
            beta[k][k] = *s;
        }
        if vol.len() != n {
            return Err(Error::Dimension {
                what: "volatility",
                expected: n,
                got: vol.len(),
            });
        }
        Self::new(Drift::Constant(log_drift), Diffusion::Constant(beta), x0)
    }

    pub fn dim(&self) -> usize {
        self.x0.len()
    }

    fn check_shapes(&self) -> Result<()> {
        let n = self.dim();
        if n < 2 {
            return Err(Error::InvalidParameter(format!(
                "factor dimension must be >= 2 (production and price), got {n}"
            )));
        }
        let dim_err = |what, got| Error::Dimension { what, expected: n, got };
        match &self.drift {
            Drift::Constant(v) if v.len() != n => return Err(dim_err("drift", v.len())),
            Drift::Affine { offset, matrix } => {
                if offset.len() != n {
                    return Err(dim_err("drift offset", offset.len()));
                }
                if matrix.len() != n || matrix.iter().any(|r| r.len() != n) {
                    return Err(dim_err("drift matrix", matrix.len()));
                }
            }
            _ => {}
        }
        if let Diffusion::Constant(m) = &self.diffusion {
            if m.len() != n || m.iter().any(|r| r.len() != n) {
                return Err(dim_err("diffusion matrix", m.len()));
            }
        }
        if self.x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "initial factors", node: 0 });
        }
        Ok(())
    }

    pub fn drift_at(&self, x: &[f64], t: f64) -> Vec<f64> {
        match &self.drift {
            Drift::Constant(v) => v.clone(),
            Drift::Affine { offset, matrix } => offset
                .iter()
                .zip(matrix)
                .map(|(a, row)| a + row.iter().zip(x).map(|(b, xi)| b * xi).sum::<f64>())
                .collect(),
            Drift::Custom(f) => f(x, t),
        }
    }

    pub fn diffusion_at(&self, x: &[f64], t: f64) -> Vec<Vec<f64>> {
        match &self.diffusion {
            Diffusion::Constant(m) => m.clone(),
            Diffusion::Custom(f) => f(x, t),
        }
    }

    /// `beta beta^T` at `(x, t)`.
    pub fn covariance_at(&self, x: &[f64], t: f64) -> Vec<Vec<f64>> {
        let b = self.diffusion_at(x, t);
        let n = b.len();
        let mut out = vec![vec![0.0; n]; n];
        for a in 0..n {
            for c in 0..n {
                out[a][c] = (0..b[a].len()).map(|l| b[a][l] * b[c][l]).sum();
            }
        }
        out
    }

    /// True for an identically zero constant diffusion matrix.
    pub fn is_deterministic(&self) -> bool {
        matches!(&self.diffusion, Diffusion::Constant(m) if m.iter().flatten().all(|v| *v == 0.0))
    }

    /// Spot-checks finiteness and the linear-growth bound
    /// `|g(x,t)| + |beta(x,t)| <= c (|x| + 1)` on points around `x0`; returns
    /// the largest observed ratio.
    pub fn growth_constant(&self, grid: &TimeGrid) -> Result<f64> {
        let n = self.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let mut worst: f64 = 0.0;
        for (s, radius) in [0.0, 1.0, 10.0, 100.0].into_iter().enumerate() {
            for probe in 0..8 {
                let mut x = self.x0.clone();
                for xi in x.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *xi += radius * z / (n as f64).sqrt();
                }
                let t = grid.time((probe * grid.steps()) / 7);
                let g = self.drift_at(&x, t);
                let b = self.diffusion_at(&x, t);
                let gn = norm(&g);
                let bn = b.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
                if !(gn.is_finite() && bn.is_finite()) || g.len() != n || b.len() != n {
                    return Err(Error::NonFiniteCoefficient { path: s, node: probe });
                }
                worst = worst.max((gn + bn) / (norm(&x) + 1.0));
            }
        }
        Ok(worst)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Named coefficient presets loadable from configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DiffusionPreset {
    /// Constant drift vector and constant `n x n` diffusion matrix.
    Constant {
        x0: Vec<f64>,
        drift: Vec<f64>,
        diffusion: Vec<Vec<f64>>,
    },
    /// Drift `offset + matrix x`, constant diagonal volatility.
    Affine {
        x0: Vec<f64>,
        offset: Vec<f64>,
        matrix: Vec<Vec<f64>>,
        vol: Vec<f64>,
    },
    /// Constant log-drift, constant diagonal volatility.
    LogGbm {
        x0: Vec<f64>,
        log_drift: Vec<f64>,
        vol: Vec<f64>,
    },
}

impl DiffusionPreset {
    pub fn x0(&self) -> &[f64] {
        match self {
            DiffusionPreset::Constant { x0, .. }
            | DiffusionPreset::Affine { x0, .. }
            | DiffusionPreset::LogGbm { x0, .. } => x0,
        }
    }

    pub fn build(&self) -> Result<DiffusionSpec> {
        match self.clone() {
            DiffusionPreset::Constant { x0, drift, diffusion } => {
                DiffusionSpec::new(Drift::Constant(drift), Diffusion::Constant(diffusion), x0)
            }
            DiffusionPreset::Affine {
                x0,
                offset,
                matrix,
                vol,
            } => {
                let n = x0.len();
                if vol.len() != n {
                    return Err(Error::Dimension {
                        what: "volatility",
                        expected: n,
                        got: vol.len(),
                    });
                }
                let mut beta = vec![vec![0.0; n]; n];
                for k in 0..n {
                    beta[k][k] = vol[k];
                }
                DiffusionSpec::new(Drift::Affine { offset, matrix }, Diffusion::Constant(beta), x0)
            }
            DiffusionPreset::LogGbm { x0, log_drift, vol } => DiffusionSpec::log_gbm(x0, log_drift, vol),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheme {
    EulerMaruyama,
}

/// Simulated market paths together with the Wiener increments that drove them.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    pub grid: TimeGrid,
    pub paths: Vec<MarketPath>,
    /// `increments[path][step][component]`, each `~ N(0, dt)`.
    pub increments: Vec<Vec<Vec<f64>>>,
    pub seed: u64,
    pub scheme: Scheme,
}

impl PathEnsemble {
    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    /// Ensemble of identical copies of a deterministic path with zero noise.
    pub fn deterministic(path: MarketPath, copies: usize) -> Self {
        let n = path.factors.first().map_or(2, Vec::len);
        let grid = path.grid;
        Self {
            grid,
            increments: vec![vec![vec![0.0; n]; grid.steps()]; copies],
            paths: vec![path; copies],
            seed: 0,
            scheme: Scheme::EulerMaruyama,
        }
    }

    /// Long-format CSV: `path,t,p,S,x_1..x_n`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let n = self.paths.first().map_or(0, |p| p.factors[0].len());
        write!(w, "path,t,p,S")?;
        for k in 1..=n {
            write!(w, ",x_{k}")?;
        }
        writeln!(w)?;
        for (i, path) in self.paths.iter().enumerate() {
            for j in 0..self.grid.nodes() {
                write!(
                    w,
                    "{i},{},{},{}",
                    self.grid.time(j),
                    path.production[j],
                    path.price[j]
                )?;
                for x in &path.factors[j] {
                    write!(w, ",{x}")?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }
}

/// Independent substream for path `index`, identical for any ensemble size.
pub fn path_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Euler-Maruyama simulation of `n_paths` factor paths.
pub fn simulate(spec: &DiffusionSpec, grid: &TimeGrid, n_paths: usize, seed: u64) -> Result<PathEnsemble> {
    if n_paths == 0 {
        return Err(Error::InvalidParameter("n_paths must be >= 1".into()));
    }
    spec.growth_constant(grid)?;
    let results: Vec<Result<(MarketPath, Vec<Vec<f64>>)>> = (0..n_paths)
        .into_par_iter()
        .map(|i| simulate_path(spec, grid, i, seed))
        .collect();
    let mut paths = Vec::with_capacity(n_paths);
    let mut increments = Vec::with_capacity(n_paths);
    for r in results {
        let (p, dw) = r?;
        paths.push(p);
        increments.push(dw);
    }
    Ok(PathEnsemble {
        grid: *grid,
        paths,
        increments,
        seed,
        scheme: Scheme::EulerMaruyama,
    })
}

fn simulate_path(
    spec: &DiffusionSpec,
    grid: &TimeGrid,
    index: usize,
    seed: u64,
) -> Result<(MarketPath, Vec<Vec<f64>>)> {
    let n = spec.dim();
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let noisy = !spec.is_deterministic();
    let mut rng = path_rng(seed, index as u64);
    let mut factors = Vec::with_capacity(grid.nodes());
    let mut increments = Vec::with_capacity(grid.steps());
    let mut x = spec.x0.clone();
    factors.push(x.clone());
    for j in 0..grid.steps() {
        let t = grid.time(j);
        let dw: Vec<f64> = if noisy {
            (0..n).map(|_| sqrt_dt * rng.sample::<f64, _>(StandardNormal)).collect()
        } else {
            vec![0.0; n]
        };
        let g = spec.drift_at(&x, t);
        let b = spec.diffusion_at(&x, t);
        if g.len() != n || b.len() != n {
            return Err(Error::NonFiniteCoefficient { path: index, node: j });
        }
        let mut next = Vec::with_capacity(n);
        for k in 0..n {
            let shock: f64 = b[k].iter().zip(&dw).map(|(a, w)| a * w).sum();
            next.push(x[k] + g[k] * dt + shock);
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteCoefficient { path: index, node: j });
        }
        x = next;
        factors.push(x.clone());
        increments.push(dw);
    }
    let path = MarketPath::from_factors(*grid, factors)?;
    Ok((path, increments))
}

/// Elementwise `p = exp(x_1)`, `S = exp(x_2)` over a factor series.
pub fn to_market(factors: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut p = Vec::with_capacity(factors.len());
    let mut s = Vec::with_capacity(factors.len());
    for (j, x) in factors.iter().enumerate() {
        if x.len() < 2 {
            return Err(Error::Dimension {
                what: "factor vector",
                expected: 2,
                got: x.len(),
            });
        }
        for (factor, out) in [(0, &mut p), (1, &mut s)] {
            if x[factor].is_nan() {
                return Err(Error::NonFinite { what: "factor", node: j });
            }
            let v = x[factor].exp();
            if !v.is_finite() {
                return Err(Error::Overflow { factor: factor + 1, node: j });
            }
            out.push(v);
        }
    }
    Ok((p, s))
}
