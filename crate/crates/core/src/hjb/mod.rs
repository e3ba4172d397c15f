//! Backward grid solver for the smoothed Hamilton-Jacobi-Bellman equation
//!
//! ```text
//! J_t + max_u { J_x g_eps + h_eps } + 1/2 Tr(beta^T J_xx beta) = 0,   J(x, T) = Phi_eps(x)
//! ```
//!
//! over `x = (factors, charges, averages)`. Each backward step is split in two:
//!
//! 1. the factor axes take an explicit step (upwind convection by the drift,
//!    central diffusion, linear extrapolation at the box faces);
//! 2. at every node the Hamiltonian is maximised over a control mesh. The
//!    deterministic charge/average dynamics are applied by reading the
//!    intermediate layer at the foot point `(y + f dt, ybar + (y - ybar) dt / t)`.
//!    For charge axes the step is limited to one cell, where this coincides
//!    with first-order upwinding; on the average axis the foot point is a convex
//!    combination of `y` and `ybar`, which keeps the step monotone for any `dt`.

mod grid;
mod policy;
mod refine;

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use grid::{Axis, AxisKind, StateGrid};
pub use policy::{evaluate_policy, FeedbackPolicy, Lookup, Policy, PolicyEvaluation, ThresholdPolicy, ZeroPolicy};
pub use refine::{eps_refine, RefineReport};

use crate::error::{Error, Result};
use crate::market::DiffusionSpec;
use crate::model::{clamp_charge, MarketPath, ModelParams, RegimeCriterion, TimeGrid};
use crate::smoothing::Smoother;

/// Where production and price come from.
#[derive(Debug, Clone)]
pub enum MarketModel {
    /// Known series on the solver's time grid; the grid has no factor axes.
    Deterministic(MarketPath),
    /// Every latent factor is a grid axis.
    Diffusion(DiffusionSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControlMesh {
    /// Equispaced points on `[-L, min(p, L)]` per battery (zero always
    /// added), optionally refined once around the incumbent.
    Uniform { points: usize, refine: bool },
    /// Fixed candidate rates, filtered by the admissible box at each node.
    Explicit(Vec<f64>),
}

impl Default for ControlMesh {
    fn default() -> Self {
        ControlMesh::Uniform {
            points: 21,
            refine: true,
        }
    }
}

pub type TerminalAdjust = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct HjbProblem {
    pub params: ModelParams,
    pub crit: RegimeCriterion,
    pub market: MarketModel,
    pub time: TimeGrid,
    pub grid: StateGrid,
    pub smoother: Smoother,
    pub mesh: ControlMesh,
    /// Added to the terminal layer (state coordinates in grid order).
    pub terminal_adjust: Option<TerminalAdjust>,
}

impl std::fmt::Debug for HjbProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HjbProblem")
            .field("params", &self.params)
            .field("crit", &self.crit)
            .field("market", &self.market)
            .field("time", &self.time)
            .field("grid", &self.grid)
            .field("smoother", &self.smoother)
            .field("mesh", &self.mesh)
            .finish_non_exhaustive()
    }
}

/// `J` on every grid node and time node.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueGrid {
    pub grid: StateGrid,
    pub time: TimeGrid,
    pub eps: f64,
    /// `values[j][node]`.
    pub values: Vec<Vec<f64>>,
}

impl ValueGrid {
    pub fn value_at(&self, point: &[f64], j: usize) -> f64 {
        self.grid.interpolate(&self.values[j], point)
    }

    pub fn terminal(&self) -> &[f64] {
        &self.values[self.time.steps()]
    }

    /// Long format: `t, axis coordinates..., J`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        self.grid.write_header(&mut w)?;
        writeln!(w, ",J")?;
        for (j, layer) in self.values.iter().enumerate() {
            let t = self.time.time(j);
            for (node, v) in layer.iter().enumerate() {
                write!(w, "{t}")?;
                for c in self.grid.coordinates(node) {
                    write!(w, ",{c}")?;
                }
                writeln!(w, ",{v}")?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub value: ValueGrid,
    pub policy: FeedbackPolicy,
}

/// Returns the stored argmax mesh.
pub fn extract_policy(solution: &Solution) -> &FeedbackPolicy {
    &solution.policy
}

struct Layout {
    factors: Vec<usize>,
    charges: Vec<usize>,
    averages: Vec<usize>,
}

impl HjbProblem {
    fn layout(&self) -> Layout {
        let mut l = Layout {
            factors: vec![],
            charges: vec![],
            averages: vec![],
        };
        for (a, k) in self.grid.kinds().iter().enumerate() {
            match k {
                AxisKind::Factor(_) => l.factors.push(a),
                AxisKind::Charge(_) => l.charges.push(a),
                AxisKind::Average(_) => l.averages.push(a),
            }
        }
        l
    }

    fn check(&self) -> Result<()> {
        self.params.validate()?;
        if self.grid.dims() > 4 {
            return Err(Error::TooManyAxes(self.grid.dims()));
        }
        if self.grid.battery_count() != self.params.batteries {
            return Err(Error::Dimension {
                what: "charge axes",
                expected: self.params.batteries,
                got: self.grid.battery_count(),
            });
        }
        for (a, k) in self.grid.kinds().iter().enumerate() {
            if matches!(k, AxisKind::Charge(_) | AxisKind::Average(_)) {
                let ax = &self.grid.axes()[a];
                if ax.lo() != 0.0 || ax.hi() != self.params.capacity {
                    return Err(Error::InvalidParameter("charge axes must span [0, C]".into()));
                }
            }
        }
        if self.crit.uses_average() && !self.grid.has_average() {
            return Err(Error::InvalidParameter(
                "the averaging criterion needs average axes in the state grid".into(),
            ));
        }
        if (self.smoother.eps.capacity() - self.params.capacity).abs() > 0.0 {
            return Err(Error::InvalidParameter("epsilon was validated against another capacity".into()));
        }
        match &self.market {
            MarketModel::Deterministic(path) => {
                path.grid.check_same(&self.time, "market vs solver time grid")?;
                if self.grid.factor_count() != 0 {
                    return Err(Error::InvalidParameter(
                        "a deterministic market takes no factor axes".into(),
                    ));
                }
            }
            MarketModel::Diffusion(spec) => {
                if self.grid.factor_count() != spec.dim() {
                    return Err(Error::Dimension {
                        what: "factor axes",
                        expected: spec.dim(),
                        got: self.grid.factor_count(),
                    });
                }
            }
        }
        if let ControlMesh::Uniform { points, .. } = self.mesh {
            if points < 2 {
                return Err(Error::InvalidParameter("control mesh needs >= 2 points".into()));
            }
        }
        Ok(())
    }

    /// Largest stable time step of the explicit scheme.
    pub fn max_stable_dt(&self) -> f64 {
        let layout = self.layout();
        let axes = self.grid.axes();
        let mut bound = f64::INFINITY;
        for &a in &layout.charges {
            bound = bound.min(axes[a].spacing() / self.params.max_rate);
        }
        if let MarketModel::Diffusion(spec) = &self.market {
            let n = layout.factors.len();
            let mut worst: f64 = 0.0;
            for j in 0..self.time.steps() {
                let t = self.time.time(j);
                for node in 0..self.factor_nodes() {
                    let x = self.factor_point(node);
                    let g = spec.drift_at(&x, t);
                    let cov = spec.covariance_at(&x, t);
                    let mut rate = 0.0;
                    for a in 0..n {
                        let h = axes[layout.factors[a]].spacing();
                        rate += g[a].abs() / h + cov[a][a] / (h * h);
                        for b in 0..n {
                            if b != a {
                                let hb = axes[layout.factors[b]].spacing();
                                rate += cov[a][b].abs() / (2.0 * h * hb);
                            }
                        }
                    }
                    worst = worst.max(rate);
                }
            }
            if worst > 0.0 {
                bound = bound.min(1.0 / worst);
            }
        }
        bound
    }

    fn factor_nodes(&self) -> usize {
        let layout = self.layout();
        layout.factors.iter().map(|&a| self.grid.axes()[a].len()).product()
    }

    /// Coordinates of the `node`-th point of the factor sub-grid.
    fn factor_point(&self, mut node: usize) -> Vec<f64> {
        let layout = self.layout();
        let axes = self.grid.axes();
        let mut x = vec![0.0; layout.factors.len()];
        for (k, &a) in layout.factors.iter().enumerate().rev() {
            let len = axes[a].len();
            x[k] = axes[a].node(node % len);
            node /= len;
        }
        x
    }

    fn market_at(&self, j: usize, coords: &[f64], layout: &Layout) -> (f64, f64) {
        match &self.market {
            MarketModel::Deterministic(path) => (path.production[j], path.price[j]),
            MarketModel::Diffusion(_) => {
                let x1 = coords[layout.factors[0]];
                let x2 = coords[layout.factors[1]];
                (x1.exp(), x2.exp())
            }
        }
    }

    fn terminal_value(&self, coords: &[f64], layout: &Layout) -> f64 {
        let (_, price) = self.market_at(self.time.steps(), coords, layout);
        let y: Vec<f64> = layout.charges.iter().map(|&a| coords[a]).collect();
        let base = self.smoother.terminal(&y, price);
        base + self.terminal_adjust.as_ref().map_or(0.0, |f| f(coords))
    }

    /// Explicit factor step `V + dt L V` with the generator at time `t`.
    fn factor_step(&self, next: &[f64], t: f64, layout: &Layout) -> Vec<f64> {
        let MarketModel::Diffusion(spec) = &self.market else {
            return next.to_vec();
        };
        let dt = self.time.dt();
        let axes = self.grid.axes();
        (0..self.grid.len())
            .into_par_iter()
            .map(|node| {
                let idx = self.grid.multi_index(node);
                let x: Vec<f64> = layout
                    .factors
                    .iter()
                    .map(|&a| axes[a].node(idx[a]))
                    .collect();
                let g = spec.drift_at(&x, t);
                let cov = spec.covariance_at(&x, t);
                let v = next[node];
                // Neighbour with linear extrapolation through the face.
                let nb = |a: usize, dir: isize| -> f64 {
                    let i = idx[a] as isize + dir;
                    let s = self.grid.stride(a) as isize;
                    if i < 0 || i >= axes[a].len() as isize {
                        let inner = next[(node as isize - dir * s) as usize];
                        2.0 * v - inner
                    } else {
                        next[(node as isize + dir * s) as usize]
                    }
                };
                let mut gen = 0.0;
                for (k, &a) in layout.factors.iter().enumerate() {
                    let h = axes[a].spacing();
                    if g[k] > 0.0 {
                        gen += g[k] * (nb(a, 1) - v) / h;
                    } else if g[k] < 0.0 {
                        gen += g[k] * (v - nb(a, -1)) / h;
                    }
                    if cov[k][k] != 0.0 {
                        gen += 0.5 * cov[k][k] * (nb(a, 1) - 2.0 * v + nb(a, -1)) / (h * h);
                    }
                }
                for (k, &a) in layout.factors.iter().enumerate() {
                    for (l, &b) in layout.factors.iter().enumerate().skip(k + 1) {
                        let c = cov[k][l];
                        let interior = |ax: usize| idx[ax] > 0 && idx[ax] + 1 < axes[ax].len();
                        if c == 0.0 || !interior(a) || !interior(b) {
                            continue;
                        }
                        let sa = self.grid.stride(a);
                        let sb = self.grid.stride(b);
                        let cross = next[node + sa + sb] - next[node + sa - sb] - next[node - sa + sb]
                            + next[node - sa - sb];
                        gen += c * cross / (4.0 * axes[a].spacing() * axes[b].spacing());
                    }
                }
                v + dt * gen
            })
            .collect()
    }

    /// Candidate rates per battery on `[lo, hi]`.
    fn candidates(&self, lo: f64, hi: f64) -> Vec<f64> {
        match &self.mesh {
            ControlMesh::Explicit(list) => {
                let mut c: Vec<f64> = list
                    .iter()
                    .copied()
                    .filter(|u| *u >= lo - 1e-12 && *u <= hi + 1e-12)
                    .map(|u| u.clamp(lo, hi))
                    .collect();
                if c.is_empty() {
                    c.push(0.0f64.clamp(lo, hi));
                }
                c
            }
            ControlMesh::Uniform { points, .. } => {
                let mut c = linspace(lo, hi, *points);
                if lo < 0.0 && hi > 0.0 && !c.contains(&0.0) {
                    c.push(0.0);
                }
                c
            }
        }
    }

    /// Value of the Hamiltonian-plus-continuation for one candidate.
    #[allow(clippy::too_many_arguments)]
    fn candidate_value(
        &self,
        star: &[f64],
        coords: &[f64],
        layout: &Layout,
        y: &[f64],
        ybar: &[f64],
        u: &[f64],
        production: f64,
        price: f64,
        avg_rate: f64,
        point: &mut [f64],
    ) -> f64 {
        let dt = self.time.dt();
        point.copy_from_slice(coords);
        for (i, &a) in layout.charges.iter().enumerate() {
            let f = self.smoother.dynamics(y[i], u[i]);
            point[a] = clamp_charge(y[i] + f * dt, self.params.capacity);
        }
        for (i, &a) in layout.averages.iter().enumerate() {
            point[a] = ybar[i] + (y[i] - ybar[i]) * avg_rate * dt;
        }
        let reward = self.smoother.reward(y, ybar, u, production, price, &self.crit);
        dt * reward + self.grid.interpolate(star, point)
    }

    /// One backward step from `next` (time `j + 1`) to time `j`.
    fn backward_step(&self, next: &[f64], j: usize, layout: &Layout) -> Result<Vec<(f64, Vec<f64>)>> {
        let t = self.time.time(j);
        let dt = self.time.dt();
        let star = self.factor_step(next, t, layout);
        // Left-rectangle averaging: ybar_{j+1} = ybar_j + (y_j - ybar_j) / (j + 1).
        let avg_rate = 1.0 / (t - self.time.t0() + dt);
        let m = self.params.batteries;
        (0..self.grid.len())
            .into_par_iter()
            .map(|node| {
                let coords = self.grid.coordinates(node);
                let y: Vec<f64> = layout.charges.iter().map(|&a| coords[a]).collect();
                let ybar: Vec<f64> = if layout.averages.is_empty() {
                    y.clone()
                } else {
                    layout.averages.iter().map(|&a| coords[a]).collect()
                };
                let (production, price) = self.market_at(j, &coords, layout);
                let lo = -self.params.max_rate;
                let hi = self.params.rate_upper(production);
                if !(hi >= lo) {
                    return Err(Error::Invariant(format!("empty control box [{lo}, {hi}]")));
                }
                let mut point = coords.clone();
                let eval = |u: &[f64], point: &mut [f64]| {
                    self.candidate_value(&star, &coords, layout, &y, &ybar, u, production, price, avg_rate, point)
                };
                let base = self.candidates(lo, hi);
                let mut best = Best::new(m);
                for_each_tensor(&vec![base.clone(); m], |u| {
                    let v = eval(u, &mut point);
                    best.offer(v, u);
                });
                if let ControlMesh::Uniform { points, refine: true } = self.mesh {
                    if hi > lo {
                        let h = (hi - lo) / (points - 1) as f64;
                        let local: Vec<Vec<f64>> = best
                            .u
                            .iter()
                            .map(|&c| {
                                let mut l = linspace((c - h).max(lo), (c + h).min(hi), points);
                                l.push(c);
                                l
                            })
                            .collect();
                        for_each_tensor(&local, |u| {
                            let v = eval(u, &mut point);
                            best.offer(v, u);
                        });
                    }
                }
                if !best.value.is_finite() {
                    return Err(Error::NonFinite { what: "value", node });
                }
                Ok((best.value, best.u))
            })
            .collect()
    }
}

struct Best {
    value: f64,
    u: Vec<f64>,
}

impl Best {
    fn new(m: usize) -> Self {
        Self {
            value: f64::NEG_INFINITY,
            u: vec![0.0; m],
        }
    }

    /// Keeps the larger value; near-ties go to the smallest `|u|`, then to
    /// negative rates.
    fn offer(&mut self, value: f64, u: &[f64]) {
        let tol = 1e-11 * (1.0 + self.value.abs().min(value.abs()));
        let better = if !self.value.is_finite() || value > self.value + tol {
            true
        } else if value < self.value - tol {
            false
        } else {
            tie_key(u) < tie_key(&self.u)
        };
        if better {
            self.value = value;
            self.u.clear();
            self.u.extend_from_slice(u);
        }
    }
}

fn tie_key(u: &[f64]) -> (u64, usize, u64) {
    let mag: f64 = u.iter().map(|v| v.abs()).sum();
    let positives = u.iter().filter(|v| **v > 0.0).count();
    // Total order on the rounded magnitude, then on the signed sum.
    let q = |x: f64| (x * 1e12).round() as i64;
    let signed = q(u.iter().sum::<f64>()) as i128 - i64::MIN as i128;
    ((q(mag)) as u64, positives, signed as u64)
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n < 2 || hi <= lo {
        return vec![lo];
    }
    let h = (hi - lo) / (n - 1) as f64;
    (0..n)
        .map(|i| if i + 1 == n { hi } else { lo + i as f64 * h })
        .collect()
}

fn for_each_tensor<F: FnMut(&[f64])>(choices: &[Vec<f64>], mut f: F) {
    let m = choices.len();
    if choices.iter().any(Vec::is_empty) {
        return;
    }
    let mut idx = vec![0usize; m];
    let mut u: Vec<f64> = choices.iter().map(|c| c[0]).collect();
    loop {
        f(&u);
        let mut k = 0;
        loop {
            if k == m {
                return;
            }
            idx[k] += 1;
            if idx[k] < choices[k].len() {
                u[k] = choices[k][idx[k]];
                break;
            }
            idx[k] = 0;
            u[k] = choices[k][0];
            k += 1;
        }
    }
}

/// Backward sweep from `T` to `t0`.
pub fn solve(problem: &HjbProblem) -> Result<Solution> {
    problem.check()?;
    let dt = problem.time.dt();
    let required = problem.max_stable_dt();
    if dt > required * (1.0 + 1e-9) {
        return Err(Error::Unstable { dt, required });
    }
    let layout = problem.layout();
    let n_nodes = problem.grid.len();
    let steps = problem.time.steps();
    let m = problem.params.batteries;

    let terminal: Vec<f64> = (0..n_nodes)
        .into_par_iter()
        .map(|node| problem.terminal_value(&problem.grid.coordinates(node), &layout))
        .collect();
    if let Some(node) = terminal.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: "terminal value", node });
    }

    let mut values = vec![Vec::new(); steps + 1];
    let mut controls = vec![Vec::new(); steps];
    values[steps] = terminal;
    for j in (0..steps).rev() {
        let layer = problem.backward_step(&values[j + 1], j, &layout)?;
        let mut v = Vec::with_capacity(n_nodes);
        let mut c = Vec::with_capacity(n_nodes * m);
        for (val, u) in layer {
            v.push(val);
            c.extend(u);
        }
        values[j] = v;
        controls[j] = c;
    }
    let value = ValueGrid {
        grid: problem.grid.clone(),
        time: problem.time,
        eps: problem.smoother.eps.value(),
        values,
    };
    let policy = FeedbackPolicy::new(problem.grid.clone(), problem.time, m, controls);
    Ok(Solution { value, policy })
}

/// Largest absolute residual of the discrete operator at time node `j` when
/// `J_j` replaces `J_{j+1}` inside the Hamiltonian, over interior nodes.
pub fn hamiltonian_residual(problem: &HjbProblem, value: &ValueGrid, j: usize) -> Result<f64> {
    if j >= problem.time.steps() {
        return Err(Error::InvalidParameter("residual needs j < N".into()));
    }
    let layout = problem.layout();
    let dt = problem.time.dt();
    let current = &value.values[j];
    let next = &value.values[j + 1];
    let stepped = problem.backward_step(current, j, &layout)?;
    let mut worst: f64 = 0.0;
    for (node, (s, _)) in stepped.iter().enumerate() {
        let idx = problem.grid.multi_index(node);
        let interior = idx
            .iter()
            .zip(problem.grid.axes())
            .all(|(&i, a)| i > 0 && i + 1 < a.len());
        if !interior {
            continue;
        }
        let r = (s - current[node]) / dt - (current[node] - next[node]) / dt;
        worst = worst.max(r.abs());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests;
