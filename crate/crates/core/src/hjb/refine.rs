use serde::Serialize;

use crate::error::{Error, Result};
use crate::smoothing::{Epsilon, Smoother};

use super::{solve, HjbProblem};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RefineReport {
    pub eps: Vec<f64>,
    /// `J_eps(x0, t0)` per schedule entry.
    pub values: Vec<f64>,
    /// `|J_{k+1} - J_k|`.
    pub differences: Vec<f64>,
    /// Aitken extrapolation of the last three values; the last value when the
    /// differences do not contract.
    pub extrapolated: f64,
    /// Differences are non-increasing.
    pub monotone: bool,
    pub warnings: Vec<String>,
}

/// Solves `problem` for each `eps` of a strictly decreasing schedule and
/// extrapolates `J_eps(x0, t0)` to `eps -> 0`.
pub fn eps_refine(problem: &HjbProblem, schedule: &[f64], x0: &[f64]) -> Result<RefineReport> {
    if schedule.len() < 3 {
        return Err(Error::InvalidParameter("eps schedule needs >= 3 entries".into()));
    }
    if schedule.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidParameter("eps schedule must be strictly decreasing".into()));
    }
    if x0.len() != problem.grid.dims() {
        return Err(Error::Dimension {
            what: "evaluation point",
            expected: problem.grid.dims(),
            got: x0.len(),
        });
    }
    let mut values = Vec::with_capacity(schedule.len());
    for &e in schedule {
        let mut p = problem.clone();
        p.smoother = Smoother::new(Epsilon::new(e, problem.params.capacity)?, problem.smoother.mode);
        let sol = solve(&p)?;
        values.push(sol.value.value_at(x0, 0));
    }
    let differences: Vec<f64> = values.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    let scale = 1e-12 * (1.0 + values.iter().fold(0.0f64, |a, v| a.max(v.abs())));
    let monotone = differences.windows(2).all(|w| w[1] <= w[0] + scale);
    let mut warnings = Vec::new();
    if !monotone {
        warnings.push("differences are not non-increasing".to_string());
    }
    let n = values.len();
    let (a, b, c) = (values[n - 3], values[n - 2], values[n - 1]);
    let d1 = b - a;
    let d2 = c - b;
    let extrapolated = if d2.abs() <= scale {
        c
    } else if d2.abs() >= d1.abs() {
        warnings.push("last differences do not contract; no extrapolation".to_string());
        c
    } else {
        c - d2 * d2 / (d2 - d1)
    };
    Ok(RefineReport {
        eps: schedule.to_vec(),
        values,
        differences,
        extrapolated,
        monotone,
        warnings,
    })
}
