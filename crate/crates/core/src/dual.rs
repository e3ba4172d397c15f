//! Information-relaxation upper bounds.
//!
//! A martingale `M(t) = int_0^t v dW` with `v` adapted is turned into the
//! penalty processes
//!
//! ```text
//! mu0(t) = M(T) - M(t),     mu_k(t) = -int_t^T mu_{k-1}(s) ds,
//! ```
//!
//! whose inner product with any adapted control has zero mean. Maximising
//! `G(u) + int mu_k . u dt` pathwise over anticipating controls and averaging
//! gives an upper bound on the adapted optimum for every `v`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::PathEnsemble;
use crate::model::{regime_penalty, ControlPath, MarketPath, ModelParams, RegimeCriterion, TimeGrid};
use crate::stats::Estimate;

/// Bounded state feature multiplying a block of `theta`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Basis {
    Constant,
    /// `tanh(x_1 - x_1(0))`.
    LogProduction,
    /// `tanh(x_2 - x_2(0))`.
    LogPrice,
}

impl Basis {
    fn eval(self, x: &[f64], x0: &[f64]) -> f64 {
        match self {
            Basis::Constant => 1.0,
            Basis::LogProduction => (x[0] - x0[0]).tanh(),
            Basis::LogPrice => (x[1] - x0[1]).tanh(),
        }
    }
}

/// Shape of the integrand family: `v_j[i][c] = sum_b theta[piece(j)][i][c][b] basis_b(x_j)`
/// for battery `i` and noise component `c` (from `components`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleFamily {
    pub k: usize,
    /// Piecewise-constant time pieces.
    pub pieces: usize,
    pub basis: Vec<Basis>,
    /// Indices of the Wiener components the integrand loads on.
    pub components: Vec<usize>,
    pub batteries: usize,
}

impl MartingaleFamily {
    /// `v` constant in time and state on the given noise components.
    pub fn constant(k: usize, batteries: usize, components: Vec<usize>) -> Self {
        Self {
            k,
            pieces: 1,
            basis: vec![Basis::Constant],
            components,
            batteries,
        }
    }

    pub fn dim(&self) -> usize {
        self.pieces * self.batteries * self.components.len() * self.basis.len()
    }

    pub fn spec(&self, theta: Vec<f64>) -> Result<MartingaleSpec> {
        MartingaleSpec::new(self.clone(), theta)
    }

    pub fn zero(&self) -> MartingaleSpec {
        MartingaleSpec {
            theta: vec![0.0; self.dim()],
            family: self.clone(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.pieces == 0 || self.basis.is_empty() || self.batteries == 0 {
            return Err(Error::InvalidParameter(
                "martingale family needs >= 1 piece, basis function and battery".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleSpec {
    pub family: MartingaleFamily,
    pub theta: Vec<f64>,
}

impl MartingaleSpec {
    pub fn new(family: MartingaleFamily, theta: Vec<f64>) -> Result<Self> {
        family.validate()?;
        if theta.len() != family.dim() {
            return Err(Error::Dimension {
                what: "theta",
                expected: family.dim(),
                got: theta.len(),
            });
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidParameter("theta must be finite".into()));
        }
        Ok(Self { family, theta })
    }

    pub fn k(&self) -> usize {
        self.family.k
    }

    /// Integrand `v_j` as a `batteries x components` matrix.
    fn integrand(&self, j: usize, steps: usize, x: &[f64], x0: &[f64]) -> Vec<Vec<f64>> {
        let f = &self.family;
        let piece = (j * f.pieces / steps).min(f.pieces - 1);
        let nc = f.components.len();
        let nb = f.basis.len();
        let feats: Vec<f64> = f.basis.iter().map(|b| b.eval(x, x0)).collect();
        (0..f.batteries)
            .map(|i| {
                (0..nc)
                    .map(|c| {
                        let base = ((piece * f.batteries + i) * nc + c) * nb;
                        (0..nb).map(|b| self.theta[base + b] * feats[b]).sum()
                    })
                    .collect()
            })
            .collect()
    }
}

/// `levels[l][node][battery]` for `l = 0..=k`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualProcessPath {
    pub grid: TimeGrid,
    pub levels: Vec<Vec<Vec<f64>>>,
}

impl DualProcessPath {
    /// The level used as the penalty.
    pub fn top(&self) -> &[Vec<f64>] {
        self.levels.last().expect("at least level 0")
    }

    /// `sum_{j<N} mu_k(t_j) . u_j dt`.
    pub fn penalty(&self, control: &ControlPath) -> f64 {
        let dt = self.grid.dt();
        control
            .rates
            .iter()
            .zip(self.top())
            .map(|(u, m)| u.iter().zip(m).map(|(a, b)| a * b).sum::<f64>() * dt)
            .sum()
    }
}

/// Builds `mu_0..mu_k` on one path from its factors and Wiener increments.
pub fn dual_process(spec: &MartingaleSpec, path: &MarketPath, increments: &[Vec<f64>]) -> Result<DualProcessPath> {
    let grid = path.grid;
    let n = grid.steps();
    if increments.len() != n {
        return Err(Error::Dimension {
            what: "increment steps",
            expected: n,
            got: increments.len(),
        });
    }
    let comps = &spec.family.components;
    for dw in increments {
        if let Some(&c) = comps.iter().find(|&&c| c >= dw.len()) {
            return Err(Error::GridMismatch(format!(
                "noise component {c} out of range for {} Wiener components",
                dw.len()
            )));
        }
    }
    let m = spec.family.batteries;
    let x0 = &path.factors[0];
    // Forward accumulation of M.
    let mut big_m = vec![vec![0.0; m]; n + 1];
    for j in 0..n {
        let v = spec.integrand(j, n, &path.factors[j], x0);
        for i in 0..m {
            let dm: f64 = comps.iter().enumerate().map(|(c, &w)| v[i][c] * increments[j][w]).sum();
            big_m[j + 1][i] = big_m[j][i] + dm;
        }
    }
    let mut levels = Vec::with_capacity(spec.k() + 1);
    let terminal = big_m[n].clone();
    levels.push(
        big_m
            .iter()
            .map(|mj| terminal.iter().zip(mj).map(|(a, b)| a - b).collect())
            .collect::<Vec<Vec<f64>>>(),
    );
    let dt = grid.dt();
    for l in 1..=spec.k() {
        let prev: &Vec<Vec<f64>> = &levels[l - 1];
        let mut next = vec![vec![0.0; m]; n + 1];
        for j in (0..n).rev() {
            for i in 0..m {
                next[j][i] = next[j + 1][i] - prev[j][i] * dt;
            }
        }
        levels.push(next);
    }
    Ok(DualProcessPath { grid, levels })
}

/// Mean and SE of the penalty of `controls[p]` against `duals[p]`.
pub fn orthogonality_stat(controls: &[ControlPath], duals: &[DualProcessPath]) -> Result<Estimate> {
    if controls.len() != duals.len() {
        return Err(Error::Dimension {
            what: "paths",
            expected: duals.len(),
            got: controls.len(),
        });
    }
    let xs: Vec<f64> = controls.iter().zip(duals).map(|(u, d)| d.penalty(u)).collect();
    Ok(Estimate::from_samples(&xs))
}

/// Solver settings for the anticipating problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathwiseSettings {
    pub max_iter: usize,
    pub tol: f64,
    /// Dykstra sweeps per projection.
    pub projection_sweeps: usize,
}

impl Default for PathwiseSettings {
    fn default() -> Self {
        Self {
            max_iter: 500,
            tol: 1e-8,
            projection_sweeps: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathwiseResult {
    pub value: f64,
    pub control: ControlPath,
    /// False when the iterative solver hit its iteration cap.
    pub converged: bool,
    pub iterations: usize,
}

/// `G(u) + int mu . u dt` for a control that keeps the charge in `[0, C]`.
pub fn lagrangian(
    path: &MarketPath,
    mu: &[Vec<f64>],
    rates: &[Vec<f64>],
    y0: &[f64],
    crit: &RegimeCriterion,
) -> f64 {
    let grid = path.grid;
    let dt = grid.dt();
    let n = grid.steps();
    let m = y0.len();
    let mut y = y0.to_vec();
    let mut integral = vec![0.0; m];
    let mut total = 0.0;
    for j in 0..n {
        let u = &rates[j];
        total += (path.production[j] - u.iter().sum::<f64>()) * path.price[j] * dt;
        total += u.iter().zip(&mu[j]).map(|(a, b)| a * b).sum::<f64>() * dt;
        if !crit.is_zero() {
            let ybar: Vec<f64> = if j == 0 {
                y.clone()
            } else {
                integral.iter().map(|s| s / (j as f64 * dt)).collect()
            };
            total += regime_penalty(&y, &ybar, u, crit) * dt;
        }
        for i in 0..m {
            integral[i] += y[i] * dt;
            y[i] += u[i] * dt;
        }
    }
    total + path.price[n] * y.iter().sum::<f64>()
}

/// Pathwise supremum of the Lagrangian over anticipating controls with
/// `u_j in [-L, min(p_j, L)]` and every charge in `[0, C]`.
///
/// Without a regime term the objective is linear and the batteries decouple;
/// each is solved exactly by dynamic programming over concave piecewise-linear
/// value functions. Otherwise projected-gradient ascent is used.
pub fn pathwise_max(
    path: &MarketPath,
    dual: &DualProcessPath,
    y0: &[f64],
    crit: &RegimeCriterion,
    params: &ModelParams,
    settings: &PathwiseSettings,
) -> Result<PathwiseResult> {
    params.check_len(y0, "initial charge")?;
    dual.grid.check_same(&path.grid, "dual vs market")?;
    if let Some(i) = y0.iter().position(|&y| !(0.0..=params.capacity).contains(&y)) {
        return Err(Error::InvalidParameter(format!("y0[{i}] outside [0, C]")));
    }
    let mu = dual.top();
    if mu.first().map_or(0, Vec::len) != params.batteries {
        return Err(Error::Dimension {
            what: "dual batteries",
            expected: params.batteries,
            got: mu.first().map_or(0, Vec::len),
        });
    }
    if crit.is_zero() {
        let control = linear_dp(path, mu, y0, params)?;
        let value = lagrangian(path, mu, &control.rates, y0, crit);
        return Ok(PathwiseResult {
            value,
            control,
            converged: true,
            iterations: 0,
        });
    }
    projected_gradient(path, mu, y0, crit, params, settings)
}

/// Concave piecewise-linear function on `[0, C]`.
#[derive(Debug, Clone)]
struct Pwl {
    xs: Vec<f64>,
    vs: Vec<f64>,
}

impl Pwl {
    fn eval(&self, x: f64) -> f64 {
        let k = self.xs.partition_point(|&a| a < x);
        if k == 0 {
            return self.vs[0];
        }
        if k >= self.xs.len() {
            return *self.vs.last().unwrap();
        }
        let (x0, x1) = (self.xs[k - 1], self.xs[k]);
        let w = (x - x0) / (x1 - x0);
        self.vs[k - 1] + w * (self.vs[k] - self.vs[k - 1])
    }

    fn argmax(&self) -> f64 {
        let mut best = 0;
        for k in 1..self.xs.len() {
            if self.vs[k] > self.vs[best] {
                best = k;
            }
        }
        self.xs[best]
    }
}

fn linear_dp(path: &MarketPath, mu: &[Vec<f64>], y0: &[f64], params: &ModelParams) -> Result<ControlPath> {
    let grid = path.grid;
    let n = grid.steps();
    let dt = grid.dt();
    let c = params.capacity;
    let s_n = path.price[n];
    let mut rates = vec![vec![0.0; params.batteries]; n];
    for (i, &start) in y0.iter().enumerate() {
        // w = W_{j+1}; targets[j] = argmax_z of slope * z + W_{j+1}(z).
        let mut w = Pwl {
            xs: vec![0.0, c],
            vs: vec![0.0, 0.0],
        };
        let mut targets = vec![0.0; n];
        for j in (0..n).rev() {
            let q = s_n - path.price[j] + mu[j][i];
            let lo = -params.max_rate * dt;
            let hi = params.rate_upper(path.production[j]) * dt;
            let g = Pwl {
                xs: w.xs.clone(),
                vs: w.xs.iter().zip(&w.vs).map(|(x, v)| q * x + v).collect(),
            };
            let z = g.argmax();
            targets[j] = z;
            let mut cand = vec![0.0, c, z - hi, z - lo];
            for &x in &g.xs {
                if x <= z {
                    cand.push(x - hi);
                }
                if x >= z {
                    cand.push(x - lo);
                }
            }
            cand.retain(|x| (0.0..=c).contains(x));
            cand.sort_by(f64::total_cmp);
            cand.dedup_by(|a, b| (*a - *b).abs() <= 1e-13 * c);
            let vs: Vec<f64> = cand
                .iter()
                .map(|&y| {
                    let zz = z.clamp((y + lo).max(0.0), (y + hi).min(c));
                    -q * y + g.eval(zz)
                })
                .collect();
            if vs.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: "pathwise value",
                    node: j,
                });
            }
            w = Pwl { xs: cand, vs };
        }
        let mut y = start;
        for j in 0..n {
            let upper = params.rate_upper(path.production[j]);
            let lo = (y - params.max_rate * dt).max(0.0);
            let hi = (y + upper * dt).min(c);
            let z = targets[j].clamp(lo, hi);
            // Snap to the rate bounds so that bang-bang rates are exact.
            let u = if z == y + upper * dt {
                upper
            } else if z == y - params.max_rate * dt {
                -params.max_rate
            } else {
                ((z - y) / dt).clamp(-params.max_rate, upper)
            };
            rates[j][i] = u;
            y += u * dt;
        }
    }
    ControlPath::new(grid, rates)
}

/// Gradient of the Lagrangian in `u` (`rates[j][i]`).
fn gradient(
    path: &MarketPath,
    mu: &[Vec<f64>],
    rates: &[Vec<f64>],
    y0: &[f64],
    crit: &RegimeCriterion,
) -> Vec<Vec<f64>> {
    let grid = path.grid;
    let n = grid.steps();
    let dt = grid.dt();
    let m = y0.len();
    // Forward pass: charges and averages.
    let mut ys = vec![y0.to_vec()];
    for j in 0..n {
        let next: Vec<f64> = (0..m).map(|i| ys[j][i] + rates[j][i] * dt).collect();
        ys.push(next);
    }
    let mut bars = vec![y0.to_vec()];
    let mut integral = vec![0.0; m];
    for j in 1..n {
        for i in 0..m {
            integral[i] += ys[j - 1][i];
        }
        bars.push(integral.iter().map(|s| s / j as f64).collect());
    }
    // Local partials of the running penalty.
    let mut gy = vec![vec![0.0; m]; n + 1];
    let mut gbar = vec![vec![0.0; m]; n];
    let mut grad = vec![vec![0.0; m]; n];
    for j in 0..n {
        for i in 0..m {
            grad[j][i] = (-path.price[j] + mu[j][i]) * dt;
        }
        if crit.gamma != 0.0 {
            for i in 0..m {
                for l in 0..m {
                    let d = ys[j][i] - bars[j][l];
                    gy[j][i] += 2.0 * crit.gamma * d * dt;
                    gbar[j][l] -= 2.0 * crit.gamma * d * dt;
                }
            }
        }
        if !crit.phi_hat.is_off() {
            let h = 1e-6;
            let mut y = ys[j].clone();
            let mut u = rates[j].clone();
            for i in 0..m {
                let y_i = y[i];
                y[i] = y_i + h;
                let up = crit.phi_hat.eval(&y, &u);
                y[i] = y_i - h;
                let dn = crit.phi_hat.eval(&y, &u);
                y[i] = y_i;
                gy[j][i] += (up - dn) / (2.0 * h) * dt;
                let u_i = u[i];
                u[i] = u_i + h;
                let up = crit.phi_hat.eval(&y, &u);
                u[i] = u_i - h;
                let dn = crit.phi_hat.eval(&y, &u);
                u[i] = u_i;
                grad[j][i] += (up - dn) / (2.0 * h) * dt;
            }
        }
    }
    for i in 0..m {
        gy[n][i] += path.price[n];
    }
    // ybar_j = (1/j) sum_{d<j} y_d for j >= 1, so y_d feeds every later average.
    let mut total_y = vec![vec![0.0; m]; n + 1];
    for i in 0..m {
        let mut tail = 0.0;
        for d in (0..=n).rev() {
            total_y[d][i] = gy[d][i] + tail;
            if d >= 1 && d < n {
                tail += gbar[d][i] / d as f64;
            }
        }
    }
    // y_j = y0 + dt sum_{d<j} u_d.
    for i in 0..m {
        let mut acc = 0.0;
        for d in (0..n).rev() {
            acc += total_y[d + 1][i];
            grad[d][i] += dt * acc;
        }
    }
    grad
}

/// Euclidean projection onto `{a <= u <= b} ∩ {0 <= y0 + dt cumsum(u) <= C}`
/// for one battery, by Dykstra's alternating projections.
fn project(u: &mut [f64], a: &[f64], b: &[f64], y0: f64, dt: f64, c: f64, sweeps: usize) {
    let n = u.len();
    let mut p_box = vec![0.0; n];
    // Slab corrections are constant on the prefix they act on.
    let mut p_slab = vec![0.0; n + 1];
    let mut prev = u.to_vec();
    for _ in 0..sweeps {
        for d in 0..n {
            let x = u[d] + p_box[d];
            let px = x.clamp(a[d], b[d]);
            p_box[d] = x - px;
            u[d] = px;
        }
        for j in 1..=n {
            let shift = p_slab[j];
            let mut s = 0.0;
            for v in u.iter_mut().take(j) {
                *v += shift;
                s += *v;
            }
            let y = y0 + dt * s;
            let target = y.clamp(0.0, c);
            let delta = (target - y) / (dt * j as f64);
            for v in u.iter_mut().take(j) {
                *v += delta;
            }
            p_slab[j] = -delta;
        }
        let change = u.iter().zip(&prev).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        if change < 1e-13 {
            break;
        }
        prev.copy_from_slice(u);
    }
    // Final safety clamp: tiny residual infeasibility after the sweep cap.
    for d in 0..n {
        u[d] = u[d].clamp(a[d], b[d]);
    }
}

fn project_all(rates: &mut [Vec<f64>], path: &MarketPath, y0: &[f64], params: &ModelParams, sweeps: usize) {
    let n = rates.len();
    let dt = path.grid.dt();
    let a = vec![-params.max_rate; n];
    let b: Vec<f64> = (0..n).map(|j| params.rate_upper(path.production[j])).collect();
    for (i, &start) in y0.iter().enumerate() {
        let mut col: Vec<f64> = rates.iter().map(|r| r[i]).collect();
        project(&mut col, &a, &b, start, dt, params.capacity, sweeps);
        for (r, v) in rates.iter_mut().zip(col) {
            r[i] = v;
        }
    }
}

fn projected_gradient(
    path: &MarketPath,
    mu: &[Vec<f64>],
    y0: &[f64],
    crit: &RegimeCriterion,
    params: &ModelParams,
    settings: &PathwiseSettings,
) -> Result<PathwiseResult> {
    let n = path.grid.steps();
    let m = y0.len();
    let f = |r: &[Vec<f64>]| lagrangian(path, mu, r, y0, crit);
    let mut u = vec![vec![0.0; m]; n];
    project_all(&mut u, path, y0, params, settings.projection_sweeps);
    let mut value = f(&u);
    let mut step = f64::NAN;
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..settings.max_iter {
        iterations = it + 1;
        let g = gradient(path, mu, &u, y0, crit);
        let gmax = g.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
        if gmax == 0.0 {
            converged = true;
            break;
        }
        if !step.is_finite() {
            step = params.max_rate / gmax;
        }
        let mut accepted = false;
        for _ in 0..60 {
            let mut cand: Vec<Vec<f64>> = u
                .iter()
                .zip(&g)
                .map(|(ur, gr)| ur.iter().zip(gr).map(|(a, b)| a + step * b).collect())
                .collect();
            project_all(&mut cand, path, y0, params, settings.projection_sweeps);
            let moved: f64 = cand
                .iter()
                .flatten()
                .zip(u.iter().flatten())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let v = f(&cand);
            if v >= value + moved / (2.0 * step) - 1e-15 * value.abs() {
                let gain = v - value;
                u = cand;
                value = v;
                accepted = true;
                if gain.abs() <= settings.tol * (1.0 + value.abs()) {
                    converged = true;
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // No ascent direction left at machine precision.
            converged = true;
        }
        if converged {
            break;
        }
        step *= 2.0;
    }
    if !value.is_finite() {
        return Err(Error::NonFinite {
            what: "pathwise value",
            node: 0,
        });
    }
    Ok(PathwiseResult {
        value,
        control: ControlPath::new(path.grid, u)?,
        converged,
        iterations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundResult {
    pub estimate: Estimate,
    pub k: usize,
    pub theta: Vec<f64>,
    pub values: Vec<f64>,
    /// Paths whose iterative solve hit the iteration cap.
    pub unconverged: usize,
}

/// Monte-Carlo mean of the pathwise supremum over the ensemble.
pub fn upper_bound(
    spec: &MartingaleSpec,
    ensemble: &PathEnsemble,
    y0: &[f64],
    crit: &RegimeCriterion,
    params: &ModelParams,
    settings: &PathwiseSettings,
) -> Result<BoundResult> {
    if spec.family.batteries != params.batteries {
        return Err(Error::Dimension {
            what: "martingale batteries",
            expected: params.batteries,
            got: spec.family.batteries,
        });
    }
    let results: Vec<Result<PathwiseResult>> = ensemble
        .paths
        .par_iter()
        .zip(&ensemble.increments)
        .map(|(path, dw)| {
            let dual = dual_process(spec, path, dw)?;
            pathwise_max(path, &dual, y0, crit, params, settings)
        })
        .collect();
    let mut values = Vec::with_capacity(results.len());
    let mut unconverged = 0;
    for r in results {
        let r = r?;
        unconverged += usize::from(!r.converged);
        values.push(r.value);
    }
    Ok(BoundResult {
        estimate: Estimate::from_samples(&values),
        k: spec.k(),
        theta: spec.theta.clone(),
        values,
        unconverged,
    })
}

/// Outer search over `theta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearchBudget {
    /// Compass search from `theta = 0`: try `+-step` per coordinate, halve the
    /// step when nothing improves.
    Coordinate { step: f64, min_step: f64, max_evals: usize },
    /// Every combination of the listed values per coordinate.
    Grid(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub spec: MartingaleSpec,
    pub bound: BoundResult,
    /// `(theta, mean)` per evaluation.
    pub trace: Vec<(Vec<f64>, f64)>,
    pub exhausted: bool,
}

/// Tightest bound found over the family, evaluated with common random numbers.
pub fn minimize_over_v(
    family: &MartingaleFamily,
    ensemble: &PathEnsemble,
    y0: &[f64],
    crit: &RegimeCriterion,
    params: &ModelParams,
    settings: &PathwiseSettings,
    budget: &SearchBudget,
) -> Result<SearchResult> {
    let dim = family.dim();
    let mut trace = Vec::new();
    let eval = |theta: &[f64], trace: &mut Vec<(Vec<f64>, f64)>| -> Result<(MartingaleSpec, BoundResult)> {
        let spec = family.spec(theta.to_vec())?;
        let b = upper_bound(&spec, ensemble, y0, crit, params, settings)?;
        trace.push((theta.to_vec(), b.estimate.mean));
        Ok((spec, b))
    };
    match budget {
        SearchBudget::Grid(values) => {
            if values.is_empty() {
                return Err(Error::InvalidParameter("empty theta grid".into()));
            }
            let mut idx = vec![0usize; dim];
            let mut best: Option<(MartingaleSpec, BoundResult)> = None;
            loop {
                let theta: Vec<f64> = idx.iter().map(|&i| values[i]).collect();
                let (s, b) = eval(&theta, &mut trace)?;
                if best.as_ref().is_none_or(|(_, bb)| b.estimate.mean < bb.estimate.mean) {
                    best = Some((s, b));
                }
                let mut k = 0;
                while k < dim {
                    idx[k] += 1;
                    if idx[k] < values.len() {
                        break;
                    }
                    idx[k] = 0;
                    k += 1;
                }
                if k == dim {
                    break;
                }
            }
            let (spec, bound) = best.expect("at least one evaluation");
            Ok(SearchResult {
                spec,
                bound,
                trace,
                exhausted: false,
            })
        }
        SearchBudget::Coordinate {
            step,
            min_step,
            max_evals,
        } => {
            let mut theta = vec![0.0; dim];
            let (mut spec, mut bound) = eval(&theta, &mut trace)?;
            let mut h = *step;
            let mut exhausted = false;
            'outer: while h >= *min_step {
                let mut improved = false;
                for c in 0..dim {
                    for sign in [1.0, -1.0] {
                        if trace.len() >= *max_evals {
                            exhausted = true;
                            break 'outer;
                        }
                        let mut t = theta.clone();
                        t[c] += sign * h;
                        let (s, b) = eval(&t, &mut trace)?;
                        if b.estimate.mean < bound.estimate.mean {
                            theta = t;
                            spec = s;
                            bound = b;
                            improved = true;
                            break;
                        }
                    }
                }
                if !improved {
                    h *= 0.5;
                }
            }
            Ok(SearchResult {
                spec,
                bound,
                trace,
                exhausted,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DualityGap {
    pub gap: f64,
    pub se: f64,
    /// Gap below `-3 SE`: weak duality is contradicted.
    pub violated: bool,
}

pub fn duality_gap(lower: &Estimate, upper: &Estimate) -> DualityGap {
    let gap = upper.mean - lower.mean;
    let se = lower.combined_se(upper);
    DualityGap {
        gap,
        se,
        violated: gap < -3.0 * se - 1e-12 * (1.0 + upper.mean.abs()),
    }
}

/// One CSV row per bound: `instance,k,theta,mean,se,unconverged`, with
/// `theta` entries separated by `;`.
pub fn write_bounds_csv<W: Write>(mut w: W, rows: &[(String, BoundResult)]) -> std::io::Result<()> {
    writeln!(w, "instance,k,theta,mean,se,unconverged")?;
    for (id, b) in rows {
        let theta: Vec<String> = b.theta.iter().map(f64::to_string).collect();
        writeln!(
            w,
            "{id},{},{},{},{},{}",
            b.k,
            theta.join(";"),
            b.estimate.mean,
            b.estimate.se,
            b.unconverged
        )?;
    }
    Ok(())
}
