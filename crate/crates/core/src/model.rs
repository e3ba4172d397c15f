//! State dynamics, admissibility checks, payoff functionals and battery-regime
//! criteria shared by the grid solver, the dual bound and the CLI.
//!
//! Conventions used throughout the crate:
//!
//! * A [`TimeGrid`] with `N` steps has `N + 1` nodes `t_0 < ... < t_N`.
//! * Market and battery series hold one entry per node.
//! * A [`ControlPath`] holds one rate vector per *step*: `rates[j]` is applied
//!   on `[t_j, t_{j+1})`. Quadratures are left-rectangle, so the integrated
//!   state and the running payoff use the same Euler discretisation.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

/// Absolute tolerance on control rates.
pub const RATE_TOL: f64 = 1e-9;
/// Relative (to capacity) tolerance on charge levels.
pub const CHARGE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    t0: f64,
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, horizon: f64, steps: usize) -> Result<Self> {
        if !(t0.is_finite() && horizon.is_finite()) || t0 < 0.0 || horizon <= t0 {
            return Err(Error::InvalidParameter(format!(
                "time grid needs 0 <= t0 < T, got t0={t0}, T={horizon}"
            )));
        }
        if steps == 0 {
            return Err(Error::InvalidParameter("time grid needs at least one step".into()));
        }
        Ok(Self { t0, horizon, steps })
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn nodes(&self) -> usize {
        self.steps + 1
    }

    pub fn dt(&self) -> f64 {
        (self.horizon - self.t0) / self.steps as f64
    }

    /// Time of node `j`; the last node is exactly `T`.
    pub fn time(&self, j: usize) -> f64 {
        if j >= self.steps {
            self.horizon
        } else {
            self.t0 + j as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.nodes()).map(|j| self.time(j)).collect()
    }

    pub(crate) fn check_same(&self, other: &TimeGrid, what: &str) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!("{what}: {self:?} vs {other:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Capacity of each battery.
    pub capacity: f64,
    /// Maximal charge/discharge rate of each battery.
    pub max_rate: f64,
    pub batteries: usize,
    /// Weight of the cumulative-moving-average criterion.
    pub gamma: f64,
}

impl ModelParams {
    pub fn new(capacity: f64, max_rate: f64, batteries: usize, gamma: f64) -> Result<Self> {
        let params = Self {
            capacity,
            max_rate,
            batteries,
            gamma,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.capacity.is_finite() && self.capacity > 0.0) {
            return Err(Error::InvalidParameter(format!("capacity must be > 0, got {}", self.capacity)));
        }
        if !(self.max_rate.is_finite() && self.max_rate > 0.0) {
            return Err(Error::InvalidParameter(format!("max rate must be > 0, got {}", self.max_rate)));
        }
        if self.batteries == 0 {
            return Err(Error::InvalidParameter("at least one battery is required".into()));
        }
        if !self.gamma.is_finite() {
            return Err(Error::InvalidParameter("gamma must be finite".into()));
        }
        Ok(())
    }

    /// Upper end of the admissible rate box given production `p`.
    pub fn rate_upper(&self, production: f64) -> f64 {
        production.min(self.max_rate)
    }

    pub(crate) fn check_len(&self, v: &[f64], what: &'static str) -> Result<()> {
        if v.len() == self.batteries {
            Ok(())
        } else {
            Err(Error::Dimension {
                what,
                expected: self.batteries,
                got: v.len(),
            })
        }
    }
}

/// Production rate, price and latent factors sampled on a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketPath {
    pub grid: TimeGrid,
    pub production: Vec<f64>,
    pub price: Vec<f64>,
    /// Latent factor vector per node; components 0 and 1 are `ln p` and `ln S`.
    pub factors: Vec<Vec<f64>>,
}

impl MarketPath {
    /// Builds a path from latent factors via `p = exp(x1)`, `S = exp(x2)`.
    pub fn from_factors(grid: TimeGrid, factors: Vec<Vec<f64>>) -> Result<Self> {
        if factors.len() != grid.nodes() {
            return Err(Error::Dimension {
                what: "factor nodes",
                expected: grid.nodes(),
                got: factors.len(),
            });
        }
        let (production, price) = crate::market::to_market(&factors)?;
        Ok(Self {
            grid,
            production,
            price,
            factors,
        })
    }

    /// Deterministic path from explicit production and price series. Zero
    /// production maps to a factor of `-inf`.
    pub fn from_series(grid: TimeGrid, production: Vec<f64>, price: Vec<f64>) -> Result<Self> {
        for (what, series) in [("production", &production), ("price", &price)] {
            if series.len() != grid.nodes() {
                return Err(Error::Dimension {
                    what,
                    expected: grid.nodes(),
                    got: series.len(),
                });
            }
            for (j, v) in series.iter().enumerate() {
                if !v.is_finite() || *v < 0.0 {
                    return Err(Error::NonFinite { what, node: j });
                }
            }
        }
        let factors = production
            .iter()
            .zip(&price)
            .map(|(p, s)| vec![p.ln(), s.ln()])
            .collect();
        Ok(Self {
            grid,
            production,
            price,
            factors,
        })
    }

    pub fn constant(grid: TimeGrid, production: f64, price: f64) -> Result<Self> {
        Self::from_series(grid, vec![production; grid.nodes()], vec![price; grid.nodes()])
    }
}

/// Charge levels and their cumulative moving averages, node-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BatteryPath {
    pub grid: TimeGrid,
    pub charge: Vec<Vec<f64>>,
    pub average: Vec<Vec<f64>>,
}

impl BatteryPath {
    pub fn from_charge(grid: TimeGrid, charge: Vec<Vec<f64>>) -> Result<Self> {
        if charge.len() != grid.nodes() {
            return Err(Error::Dimension {
                what: "charge nodes",
                expected: grid.nodes(),
                got: charge.len(),
            });
        }
        let m = charge.first().map_or(0, Vec::len);
        let mut average = vec![vec![0.0; m]; charge.len()];
        for i in 0..m {
            let series: Vec<f64> = charge.iter().map(|y| y[i]).collect();
            for (j, a) in cma(&series, &grid)?.into_iter().enumerate() {
                average[j][i] = a;
            }
        }
        Ok(Self {
            grid,
            charge,
            average,
        })
    }

    pub fn terminal(&self) -> &[f64] {
        self.charge.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Piecewise-constant control: `rates[j]` holds on `[t_j, t_{j+1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPath {
    pub grid: TimeGrid,
    pub rates: Vec<Vec<f64>>,
}

impl ControlPath {
    pub fn new(grid: TimeGrid, rates: Vec<Vec<f64>>) -> Result<Self> {
        if rates.len() != grid.steps() {
            return Err(Error::Dimension {
                what: "control steps",
                expected: grid.steps(),
                got: rates.len(),
            });
        }
        Ok(Self { grid, rates })
    }

    pub fn constant(grid: TimeGrid, rate: &[f64]) -> Self {
        Self {
            grid,
            rates: vec![rate.to_vec(); grid.steps()],
        }
    }

    pub fn zero(grid: TimeGrid, batteries: usize) -> Self {
        Self::constant(grid, &vec![0.0; batteries])
    }
}

pub type PhiFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;

/// Running penalty on the current charge and rate.
#[derive(Clone, Default)]
pub enum PhiHat {
    #[default]
    Off,
    /// `-prod_i (1 + (u_i/L)^2)(1 + ((2 y_i - C)/C)^2)`.
    UShaped { capacity: f64, max_rate: f64 },
    /// Arbitrary `(y, u) -> value`.
    Custom(PhiFn),
}

impl fmt::Debug for PhiHat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PhiHat::Off => write!(f, "Off"),
            PhiHat::UShaped { capacity, max_rate } => f
                .debug_struct("UShaped")
                .field("capacity", capacity)
                .field("max_rate", max_rate)
                .finish(),
            PhiHat::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

impl PhiHat {
    pub fn eval(&self, y: &[f64], u: &[f64]) -> f64 {
        match self {
            PhiHat::Off => 0.0,
            PhiHat::UShaped { capacity, max_rate } => {
                let prod: f64 = y
                    .iter()
                    .zip(u)
                    .map(|(&yi, &ui)| {
                        let ru = ui / max_rate;
                        let ry = (2.0 * yi - capacity) / capacity;
                        (1.0 + ru * ru) * (1.0 + ry * ry)
                    })
                    .product();
                -prod
            }
            PhiHat::Custom(f) => f(y, u),
        }
    }

    pub fn is_off(&self) -> bool {
        matches!(self, PhiHat::Off)
    }
}

/// Preferences on battery regimes: `phi = phi_hat(y, u) + gamma * sum_{i,j} (y_i - ybar_j)^2`.
#[derive(Debug, Clone, Default)]
pub struct RegimeCriterion {
    pub phi_hat: PhiHat,
    pub gamma: f64,
}

impl RegimeCriterion {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn with_gamma(gamma: f64) -> Self {
        Self {
            phi_hat: PhiHat::Off,
            gamma,
        }
    }

    pub fn from_params(params: &ModelParams, phi_hat_enabled: bool) -> Self {
        let phi_hat = if phi_hat_enabled {
            PhiHat::UShaped {
                capacity: params.capacity,
                max_rate: params.max_rate,
            }
        } else {
            PhiHat::Off
        };
        Self {
            phi_hat,
            gamma: params.gamma,
        }
    }

    /// True when the criterion contributes nothing.
    pub fn is_zero(&self) -> bool {
        self.gamma == 0.0 && self.phi_hat.is_off()
    }

    /// True when the averaging term depends on the CMA.
    pub fn uses_average(&self) -> bool {
        self.gamma != 0.0
    }
}

/// `phi_hat(y, u) + gamma * sum_{i,j} (y_i - ybar_j)^2`.
pub fn regime_penalty(y: &[f64], ybar: &[f64], u: &[f64], crit: &RegimeCriterion) -> f64 {
    let mut bar = 0.0;
    if crit.gamma != 0.0 {
        for &yi in y {
            for &aj in ybar {
                let d = yi - aj;
                bar += d * d;
            }
        }
        bar *= crit.gamma;
    }
    crit.phi_hat.eval(y, u) + bar
}

/// One Euler step of the clipped dynamics, `y' = clamp(y + u dt, 0, C)`.
///
/// The clamp reproduces the exact solution of `dy/ds = u 1{0 <= y <= C}` at the
/// end of the step when the boundary is hit mid-step.
pub fn clipped_step(y: &[f64], u: &[f64], dt: f64, params: &ModelParams) -> Result<Vec<f64>> {
    params.check_len(y, "charge")?;
    params.check_len(u, "rate")?;
    ensure_finite(y, "charge", 0)?;
    ensure_finite(u, "rate", 0)?;
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::InvalidParameter(format!("dt must be > 0, got {dt}")));
    }
    let mut out = Vec::with_capacity(y.len());
    for (i, (&yi, &ui)) in y.iter().zip(u).enumerate() {
        if ui.abs() > params.max_rate + RATE_TOL {
            return Err(Error::RateOutOfRange {
                battery: i,
                value: ui,
                limit: params.max_rate,
            });
        }
        out.push(clamp_charge(yi + ui * dt, params.capacity));
    }
    Ok(out)
}

#[inline]
pub(crate) fn clamp_charge(y: f64, capacity: f64) -> f64 {
    y.clamp(0.0, capacity)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ViolationKind {
    /// Rate outside `[-L, min(p, L)]`.
    Rate { value: f64, lower: f64, upper: f64 },
    /// Un-clipped charge outside `[0, C]`.
    Capacity { level: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Violation {
    pub node: usize,
    pub battery: usize,
    pub kind: ViolationKind,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ViolationReport {
    pub violations: Vec<Violation>,
}

impl ViolationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn len(&self) -> usize {
        self.violations.len()
    }

    pub fn rate_violations(&self) -> impl Iterator<Item = &Violation> {
        self.violations
            .iter()
            .filter(|v| matches!(v.kind, ViolationKind::Rate { .. }))
    }

    pub fn capacity_violations(&self) -> impl Iterator<Item = &Violation> {
        self.violations
            .iter()
            .filter(|v| matches!(v.kind, ViolationKind::Capacity { .. }))
    }
}

/// Membership test for the admissible class: rate box at every step and the
/// un-clipped integrated charge inside `[0, C]` at every node.
pub fn validate_control(
    control: &ControlPath,
    market: &MarketPath,
    y0: &[f64],
    params: &ModelParams,
) -> Result<ViolationReport> {
    control.grid.check_same(&market.grid, "control vs market")?;
    params.check_len(y0, "initial charge")?;
    ensure_finite(y0, "initial charge", 0)?;
    let dt = control.grid.dt();
    let cap_tol = CHARGE_TOL * params.capacity;
    let mut report = ViolationReport::default();
    let mut y = y0.to_vec();
    let check_charge = |node: usize, y: &[f64], report: &mut ViolationReport| {
        for (i, &level) in y.iter().enumerate() {
            if level < -cap_tol || level > params.capacity + cap_tol {
                report.violations.push(Violation {
                    node,
                    battery: i,
                    kind: ViolationKind::Capacity { level },
                });
            }
        }
    };
    check_charge(0, &y, &mut report);
    for (j, u) in control.rates.iter().enumerate() {
        params.check_len(u, "rate")?;
        ensure_finite(u, "rate", j)?;
        let lower = -params.max_rate;
        let upper = params.rate_upper(market.production[j]);
        for (i, &ui) in u.iter().enumerate() {
            if ui < lower - RATE_TOL || ui > upper + RATE_TOL {
                report.violations.push(Violation {
                    node: j,
                    battery: i,
                    kind: ViolationKind::Rate {
                        value: ui,
                        lower,
                        upper,
                    },
                });
            }
            y[i] += ui * dt;
        }
        check_charge(j + 1, &y, &mut report);
    }
    Ok(report)
}

/// Cumulative moving average with the left-rectangle rule:
/// `ybar_j = (sum_{d<j} y_d dt) / (t_j - t_0)` and `ybar_0 = y_0`.
pub fn cma(series: &[f64], grid: &TimeGrid) -> Result<Vec<f64>> {
    if series.is_empty() {
        return Err(Error::InvalidParameter("empty series".into()));
    }
    if series.len() > grid.nodes() {
        return Err(Error::Dimension {
            what: "cma series",
            expected: grid.nodes(),
            got: series.len(),
        });
    }
    let dt = grid.dt();
    let mut out = Vec::with_capacity(series.len());
    let mut integral = 0.0;
    for (j, &y) in series.iter().enumerate() {
        if !y.is_finite() {
            return Err(Error::NonFinite { what: "cma input", node: j });
        }
        if j == 0 {
            out.push(y);
        } else {
            out.push(integral / (j as f64 * dt));
        }
        integral += y * dt;
    }
    Ok(out)
}

/// How the payoff treats the capacity constraint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Semantics {
    /// Hard state constraints: the control must pass [`validate_control`].
    Constrained,
    /// Clipped dynamics with the income indicator `1{min_i y_i >= 0}`.
    Clipped,
}

/// Itemised payoff.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Payoff {
    pub selling: f64,
    pub regime: f64,
    pub terminal: f64,
}

impl Payoff {
    pub fn total(&self) -> f64 {
        self.selling + self.regime + self.terminal
    }
}

/// Integrates the charge under `control` and returns the battery path.
pub fn battery_path(
    control: &ControlPath,
    y0: &[f64],
    params: &ModelParams,
    semantics: Semantics,
) -> Result<BatteryPath> {
    params.check_len(y0, "initial charge")?;
    let dt = control.grid.dt();
    let mut charge = Vec::with_capacity(control.grid.nodes());
    charge.push(y0.to_vec());
    for (j, u) in control.rates.iter().enumerate() {
        let y = &charge[j];
        let next = match semantics {
            Semantics::Clipped => clipped_step(y, u, dt, params)?,
            Semantics::Constrained => {
                params.check_len(u, "rate")?;
                ensure_finite(u, "rate", j)?;
                y.iter().zip(u).map(|(a, b)| a + b * dt).collect()
            }
        };
        charge.push(next);
    }
    BatteryPath::from_charge(control.grid, charge)
}

/// Discrete payoff: `sum_j [(p_j - sum_i u_ij) S_j + phi_j] dt + S_N sum_i y_iN`.
pub fn payoff_breakdown(
    market: &MarketPath,
    control: &ControlPath,
    y0: &[f64],
    crit: &RegimeCriterion,
    params: &ModelParams,
    semantics: Semantics,
) -> Result<Payoff> {
    control.grid.check_same(&market.grid, "control vs market")?;
    if semantics == Semantics::Constrained {
        let report = validate_control(control, market, y0, params)?;
        if let Some(first) = report.violations.first() {
            return Err(Error::Inadmissible(report.len(), first.node));
        }
    }
    let battery = battery_path(control, y0, params, semantics)?;
    let dt = control.grid.dt();
    let mut out = Payoff::default();
    for (j, u) in control.rates.iter().enumerate() {
        let y = &battery.charge[j];
        let income = (market.production[j] - u.iter().sum::<f64>()) * market.price[j];
        let indicator = match semantics {
            Semantics::Clipped if y.iter().any(|&v| v < 0.0) => 0.0,
            _ => 1.0,
        };
        out.selling += indicator * income * dt;
        if !crit.is_zero() {
            out.regime += regime_penalty(y, &battery.average[j], u, crit) * dt;
        }
        if !(out.selling.is_finite() && out.regime.is_finite()) {
            return Err(Error::NonFinite { what: "payoff accumulation", node: j });
        }
    }
    out.terminal = market.price[control.grid.steps()] * battery.terminal().iter().sum::<f64>();
    Ok(out)
}

pub fn payoff(
    market: &MarketPath,
    control: &ControlPath,
    y0: &[f64],
    crit: &RegimeCriterion,
    params: &ModelParams,
    semantics: Semantics,
) -> Result<f64> {
    payoff_breakdown(market, control, y0, crit, params, semantics).map(|p| p.total())
}
