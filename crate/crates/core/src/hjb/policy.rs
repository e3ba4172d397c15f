use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::market::PathEnsemble;
use crate::model::{payoff, ControlPath, MarketPath, ModelParams, RegimeCriterion, Semantics, TimeGrid};
use crate::stats::Estimate;

use super::grid::{AxisKind, StateGrid};

#[derive(Debug, Clone, PartialEq)]
pub struct Lookup {
    pub rates: Vec<f64>,
    /// The state left the policy's grid box and was clamped.
    pub clamped: bool,
}

/// Adapted feedback rule: may only look at the market up to `step`.
pub trait Policy: Sync {
    fn control(&self, step: usize, market: &MarketPath, y: &[f64], ybar: &[f64]) -> Lookup;

    fn check_grid(&self, _grid: &TimeGrid) -> Result<()> {
        Ok(())
    }
}

/// `u = 0`.
#[derive(Debug, Clone, Copy)]
pub struct ZeroPolicy {
    pub batteries: usize,
}

impl Policy for ZeroPolicy {
    fn control(&self, _: usize, _: &MarketPath, _: &[f64], _: &[f64]) -> Lookup {
        Lookup {
            rates: vec![0.0; self.batteries],
            clamped: false,
        }
    }
}

/// Stores production at the full admissible rate while the price is below
/// `charge_below`, discharges at `-L` above `discharge_above`.
#[derive(Debug, Clone, Copy)]
pub struct ThresholdPolicy {
    pub batteries: usize,
    pub max_rate: f64,
    pub charge_below: f64,
    pub discharge_above: f64,
}

impl Policy for ThresholdPolicy {
    fn control(&self, step: usize, market: &MarketPath, _: &[f64], _: &[f64]) -> Lookup {
        let s = market.price[step];
        let u = if s < self.charge_below {
            market.production[step].min(self.max_rate)
        } else if s > self.discharge_above {
            -self.max_rate
        } else {
            0.0
        };
        Lookup {
            rates: vec![u; self.batteries],
            clamped: false,
        }
    }
}

/// Argmax controls recorded by the solver, looked up at the nearest node.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackPolicy {
    pub grid: StateGrid,
    pub time: TimeGrid,
    pub batteries: usize,
    /// `controls[j][node * batteries + i]` for `j < N`.
    pub controls: Vec<Vec<f64>>,
}

impl FeedbackPolicy {
    pub fn new(grid: StateGrid, time: TimeGrid, batteries: usize, controls: Vec<Vec<f64>>) -> Self {
        Self {
            grid,
            time,
            batteries,
            controls,
        }
    }

    pub fn at(&self, j: usize, node: usize) -> &[f64] {
        let m = self.batteries;
        &self.controls[j][node * m..(node + 1) * m]
    }

    /// Grid point for a market state and battery state.
    pub fn point(&self, step: usize, market: &MarketPath, y: &[f64], ybar: &[f64]) -> Vec<f64> {
        self.grid
            .kinds()
            .iter()
            .map(|k| match k {
                AxisKind::Factor(f) => market.factors[step][*f],
                AxisKind::Charge(i) => y[*i],
                AxisKind::Average(i) => ybar[*i],
            })
            .collect()
    }

    /// Long format: `t, axis coordinates..., u_1..u_m`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        self.grid.write_header(&mut w)?;
        for i in 1..=self.batteries {
            write!(w, ",u_{i}")?;
        }
        writeln!(w)?;
        for j in 0..self.controls.len() {
            let t = self.time.time(j);
            for node in 0..self.grid.len() {
                write!(w, "{t}")?;
                for c in self.grid.coordinates(node) {
                    write!(w, ",{c}")?;
                }
                for u in self.at(j, node) {
                    write!(w, ",{u}")?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }
}

impl Policy for FeedbackPolicy {
    fn control(&self, step: usize, market: &MarketPath, y: &[f64], ybar: &[f64]) -> Lookup {
        let point = self.point(step, market, y, ybar);
        let (node, clamped) = self.grid.nearest(&point);
        Lookup {
            rates: self.at(step, node).to_vec(),
            clamped,
        }
    }

    fn check_grid(&self, grid: &TimeGrid) -> Result<()> {
        self.time.check_same(grid, "policy vs ensemble")
    }
}

#[derive(Debug, Clone)]
pub struct PolicyEvaluation {
    pub estimate: Estimate,
    pub payoffs: Vec<f64>,
    /// Realised controls per path.
    pub controls: Vec<ControlPath>,
    /// Number of lookups that had to be clamped into the grid box.
    pub excursions: usize,
}

/// Runs `policy` along every path of the ensemble and averages the payoff.
///
/// Looked-up rates are projected onto the set keeping the next charge in
/// `[0, C]`, so the realised control is admissible and the clipped and
/// constrained payoffs coincide.
pub fn evaluate_policy(
    policy: &dyn Policy,
    ensemble: &PathEnsemble,
    y0: &[f64],
    crit: &RegimeCriterion,
    params: &ModelParams,
) -> Result<PolicyEvaluation> {
    policy.check_grid(&ensemble.grid)?;
    if y0.len() != params.batteries {
        return Err(Error::Dimension {
            what: "initial charge",
            expected: params.batteries,
            got: y0.len(),
        });
    }
    let results: Vec<Result<(f64, ControlPath, usize)>> = ensemble
        .paths
        .par_iter()
        .map(|market| run_path(policy, market, y0, crit, params))
        .collect();
    let mut payoffs = Vec::with_capacity(results.len());
    let mut controls = Vec::with_capacity(results.len());
    let mut excursions = 0;
    for r in results {
        let (v, c, e) = r?;
        payoffs.push(v);
        controls.push(c);
        excursions += e;
    }
    Ok(PolicyEvaluation {
        estimate: Estimate::from_samples(&payoffs),
        payoffs,
        controls,
        excursions,
    })
}

fn run_path(
    policy: &dyn Policy,
    market: &MarketPath,
    y0: &[f64],
    crit: &RegimeCriterion,
    params: &ModelParams,
) -> Result<(f64, ControlPath, usize)> {
    let grid = market.grid;
    let dt = grid.dt();
    let cap = params.capacity;
    let mut y = y0.to_vec();
    let mut integral = vec![0.0; y.len()];
    let mut rates = Vec::with_capacity(grid.steps());
    let mut excursions = 0;
    for j in 0..grid.steps() {
        let ybar: Vec<f64> = if j == 0 {
            y.clone()
        } else {
            integral.iter().map(|s| s / (j as f64 * dt)).collect()
        };
        let lookup = policy.control(j, market, &y, &ybar);
        excursions += usize::from(lookup.clamped);
        let upper_rate = params.rate_upper(market.production[j]);
        let u: Vec<f64> = lookup
            .rates
            .iter()
            .zip(&y)
            .map(|(&u, &yi)| {
                let lo = (-params.max_rate).max(-yi / dt);
                let hi = upper_rate.min((cap - yi) / dt);
                u.clamp(lo.min(hi), hi)
            })
            .collect();
        for i in 0..y.len() {
            integral[i] += y[i] * dt;
            y[i] = (y[i] + u[i] * dt).clamp(0.0, cap);
        }
        rates.push(u);
    }
    let control = ControlPath::new(grid, rates)?;
    let v = payoff(market, &control, y0, crit, params, Semantics::Clipped)?;
    Ok((v, control, excursions))
}
