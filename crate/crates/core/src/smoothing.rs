//! Continuous approximants of the discontinuous dynamics and income
//! coefficients: linear ramps near the capacity bounds, optionally followed by
//! convolution with a compactly supported kernel along the charge axes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{regime_penalty, RegimeCriterion};

/// Smoothing width, validated against the battery capacity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Epsilon {
    eps: f64,
    capacity: f64,
}

impl Epsilon {
    /// Requires `0 < eps < C/2` so the two boundary ramps cannot overlap.
    pub fn new(eps: f64, capacity: f64) -> Result<Self> {
        if !(eps.is_finite() && eps > 0.0 && eps < capacity / 2.0) {
            return Err(Error::InvalidParameter(format!(
                "epsilon must lie in (0, C/2) = (0, {}), got {eps}",
                capacity / 2.0
            )));
        }
        Ok(Self { eps, capacity })
    }

    pub fn value(&self) -> f64 {
        self.eps
    }

    pub fn capacity(&self) -> f64 {
        self.capacity
    }

    pub fn cap(&self) -> f64 {
        1.0 / self.eps
    }
}

/// Factor multiplying a positive charging rate: 1 below `C - eps`, linear
/// down to 0 at `C`, 0 above.
#[inline]
pub fn charge_ramp(y: f64, eps: &Epsilon) -> f64 {
    let c = eps.capacity;
    let e = eps.eps;
    if y < c - e {
        1.0
    } else if y <= c {
        (c - y) / e
    } else {
        0.0
    }
}

/// Factor multiplying selling income: 0 below 0, linear up to 1 at `eps`.
#[inline]
pub fn empty_ramp(y: f64, eps: &Epsilon) -> f64 {
    let e = eps.eps;
    if y > e {
        1.0
    } else if y >= 0.0 {
        y / e
    } else {
        0.0
    }
}

/// Ramp-smoothed charging dynamics for one battery.
#[inline]
pub fn f_tilde_eps(y: f64, u: f64, eps: &Epsilon) -> f64 {
    if u > 0.0 {
        u * charge_ramp(y, eps)
    } else {
        u
    }
}

/// Unsmoothed dynamics `u 1{y <= C}`.
#[inline]
pub fn f_exact(y: f64, u: f64, capacity: f64) -> f64 {
    if y <= capacity {
        u
    } else {
        0.0
    }
}

/// Ramp-smoothed running reward: selling income scaled by the product of
/// near-empty ramps, plus the regime term unscaled.
pub fn h_tilde_eps(
    y: &[f64],
    ybar: &[f64],
    u: &[f64],
    eps: &Epsilon,
    production: f64,
    price: f64,
    crit: &RegimeCriterion,
) -> f64 {
    let factor: f64 = y.iter().map(|&v| empty_ramp(v, eps)).product();
    let income = (production - u.iter().sum::<f64>()) * price;
    let phi = if crit.is_zero() {
        0.0
    } else {
        regime_penalty(y, ybar, u, crit)
    };
    income * factor + phi
}

/// Unsmoothed running reward `1{min y >= 0}(p - sum u) S + phi`.
pub fn h_exact(
    y: &[f64],
    ybar: &[f64],
    u: &[f64],
    production: f64,
    price: f64,
    crit: &RegimeCriterion,
) -> f64 {
    let indicator = if y.iter().all(|&v| v >= 0.0) { 1.0 } else { 0.0 };
    let phi = if crit.is_zero() {
        0.0
    } else {
        regime_penalty(y, ybar, u, crit)
    };
    indicator * (production - u.iter().sum::<f64>()) * price + phi
}

/// Terminal value `S * sum_i y_i`.
pub fn terminal_exact(y: &[f64], price: f64) -> f64 {
    price * y.iter().sum::<f64>()
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(order: usize) -> (Vec<f64>, Vec<f64>) {
    let n = order;
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 0 { 1.0 } else { p1 };
            let pm = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * pn - pm) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Normalised bump `k(s) = 15/16 (1 - s^2)^2` on `[-1, 1]`.
#[inline]
pub fn bump(s: f64) -> f64 {
    if s.abs() >= 1.0 {
        0.0
    } else {
        let a = 1.0 - s * s;
        15.0 / 16.0 * a * a
    }
}

/// Quadrature rule for `int f(x - eps s) k(s) ds`: composite Gauss-Legendre
/// over equal panels of `[-1, 1]`, with the kernel folded into the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MollifierKernel {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Default for MollifierKernel {
    fn default() -> Self {
        Self::new(32, 8)
    }
}

impl MollifierKernel {
    pub fn new(order: usize, panels: usize) -> Self {
        let (gx, gw) = gauss_legendre(order);
        let h = 2.0 / panels as f64;
        let mut nodes = Vec::with_capacity(order * panels);
        let mut weights = Vec::with_capacity(order * panels);
        for p in 0..panels {
            let mid = -1.0 + h * (p as f64 + 0.5);
            for (x, w) in gx.iter().zip(&gw) {
                let s = mid + 0.5 * h * x;
                nodes.push(s);
                weights.push(0.5 * h * w * bump(s));
            }
        }
        Self { nodes, weights }
    }

    pub fn mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// `sum_i w_i min(f(x - eps s_i), cap)`.
    pub fn apply<F: Fn(f64) -> f64>(&self, f: F, x: f64, eps: f64, cap: Option<f64>) -> Result<f64> {
        let mut acc = 0.0;
        for (s, w) in self.nodes.iter().zip(&self.weights) {
            let mut v = f(x - eps * s);
            if !v.is_finite() {
                return Err(Error::NonFinite { what: "mollified sample", node: 0 });
            }
            if let Some(c) = cap {
                v = v.min(c);
            }
            acc += w * v;
        }
        Ok(acc)
    }

    /// Tensorised convolution of `f` along the listed coordinates of `x`.
    pub fn apply_axes<F: Fn(&[f64]) -> f64>(
        &self,
        f: &F,
        x: &[f64],
        axes: &[usize],
        eps: f64,
        cap: Option<f64>,
    ) -> Result<f64> {
        let mut point = x.to_vec();
        self.recurse(f, &mut point, axes, eps, cap)
    }

    fn recurse<F: Fn(&[f64]) -> f64>(
        &self,
        f: &F,
        point: &mut Vec<f64>,
        axes: &[usize],
        eps: f64,
        cap: Option<f64>,
    ) -> Result<f64> {
        let Some((&axis, rest)) = axes.split_first() else {
            let v = f(point);
            if !v.is_finite() {
                return Err(Error::NonFinite { what: "mollified sample", node: 0 });
            }
            return Ok(cap.map_or(v, |c| v.min(c)));
        };
        let centre = point[axis];
        let mut acc = 0.0;
        for (s, w) in self.nodes.iter().zip(&self.weights) {
            point[axis] = centre - eps * s;
            acc += w * self.recurse(f, point, rest, eps, cap)?;
        }
        point[axis] = centre;
        Ok(acc)
    }
}

/// Convolves `f` with `k_eps(z) = k(z/eps)/eps` at each point, capping `f`
/// at `cap` first when given.
pub fn mollify<F: Fn(f64) -> f64>(f: F, eps: f64, points: &[f64], cap: Option<f64>) -> Result<Vec<f64>> {
    let kernel = MollifierKernel::default();
    points.iter().map(|&x| kernel.apply(&f, x, eps, cap)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SmoothingMode {
    /// Piecewise-linear ramps only.
    #[default]
    Ramp,
    /// Ramps followed by capping at `1/eps` and convolution along each
    /// charge axis.
    Mollified,
}

/// The coefficients `f_eps`, `h_eps`, `Phi_eps` used by the grid solver.
#[derive(Debug, Clone)]
pub struct Smoother {
    pub eps: Epsilon,
    pub mode: SmoothingMode,
    kernel: MollifierKernel,
}

impl Smoother {
    pub fn new(eps: Epsilon, mode: SmoothingMode) -> Self {
        let kernel = match mode {
            SmoothingMode::Ramp => MollifierKernel {
                nodes: vec![],
                weights: vec![],
            },
            // Coarser than the default rule: these are evaluated per grid node
            // and per candidate control.
            SmoothingMode::Mollified => MollifierKernel::new(32, 2),
        };
        Self { eps, mode, kernel }
    }

    pub fn dynamics(&self, y: f64, u: f64) -> f64 {
        match self.mode {
            SmoothingMode::Ramp => f_tilde_eps(y, u, &self.eps),
            SmoothingMode::Mollified => {
                if u <= 0.0 {
                    return u;
                }
                let e = self.eps.value();
                self.kernel
                    .apply(|z| f_tilde_eps(z, u, &self.eps), y, e, None)
                    .unwrap_or(0.0)
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn reward(
        &self,
        y: &[f64],
        ybar: &[f64],
        u: &[f64],
        production: f64,
        price: f64,
        crit: &RegimeCriterion,
    ) -> f64 {
        match self.mode {
            SmoothingMode::Ramp => h_tilde_eps(y, ybar, u, &self.eps, production, price, crit),
            SmoothingMode::Mollified => {
                let axes: Vec<usize> = (0..y.len()).collect();
                let g = |z: &[f64]| h_tilde_eps(z, ybar, u, &self.eps, production, price, crit);
                self.kernel
                    .apply_axes(&g, y, &axes, self.eps.value(), Some(self.eps.cap()))
                    .unwrap_or(f64::NEG_INFINITY)
            }
        }
    }

    pub fn terminal(&self, y: &[f64], price: f64) -> f64 {
        match self.mode {
            SmoothingMode::Ramp => terminal_exact(y, price),
            SmoothingMode::Mollified => {
                let axes: Vec<usize> = (0..y.len()).collect();
                let g = |z: &[f64]| terminal_exact(z, price);
                self.kernel
                    .apply_axes(&g, y, &axes, self.eps.value(), Some(self.eps.cap()))
                    .unwrap_or(f64::NEG_INFINITY)
            }
        }
    }
}
