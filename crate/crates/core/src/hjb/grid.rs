use std::io::Write;

use crate::error::{Error, Result};
use crate::market::{simulate, DiffusionSpec};
use crate::model::{ModelParams, TimeGrid};

/// Uniform axis including both end points.
#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    lo: f64,
    hi: f64,
    count: usize,
}

impl Axis {
    pub fn uniform(lo: f64, hi: f64, count: usize) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && hi > lo) || count < 2 {
            return Err(Error::InvalidParameter(format!(
                "axis needs lo < hi and >= 2 nodes, got [{lo}, {hi}] x {count}"
            )));
        }
        Ok(Self { lo, hi, count })
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self) -> f64 {
        (self.hi - self.lo) / (self.count - 1) as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        if i + 1 >= self.count {
            self.hi
        } else {
            self.lo + i as f64 * self.spacing()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.count).map(|i| self.node(i)).collect()
    }

    /// Cell index and weight of the upper node for linear interpolation,
    /// clamping outside the range.
    pub fn locate(&self, x: f64) -> (usize, f64) {
        if x <= self.lo {
            return (0, 0.0);
        }
        if x >= self.hi {
            return (self.count - 2, 1.0);
        }
        let s = (x - self.lo) / self.spacing();
        let i = (s.floor() as usize).min(self.count - 2);
        (i, (s - i as f64).clamp(0.0, 1.0))
    }

    pub fn nearest(&self, x: f64) -> usize {
        let s = ((x - self.lo) / self.spacing()).round();
        s.clamp(0.0, (self.count - 1) as f64) as usize
    }

    pub fn contains(&self, x: f64) -> bool {
        let tol = 1e-12 * (self.hi - self.lo);
        x >= self.lo - tol && x <= self.hi + tol
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AxisKind {
    /// Latent market factor `k`.
    Factor(usize),
    /// Charge of battery `i`.
    Charge(usize),
    /// Cumulative moving average of battery `i`.
    Average(usize),
}

/// Tensor grid over `(factors, charges, averages)`, row-major with the last
/// axis fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct StateGrid {
    axes: Vec<Axis>,
    kinds: Vec<AxisKind>,
    strides: Vec<usize>,
    len: usize,
}

impl StateGrid {
    pub fn new(factors: Vec<Axis>, charges: Vec<Axis>, averages: Vec<Axis>) -> Result<Self> {
        if charges.is_empty() {
            return Err(Error::InvalidParameter("state grid needs a charge axis".into()));
        }
        if !averages.is_empty() && averages.len() != charges.len() {
            return Err(Error::Dimension {
                what: "average axes",
                expected: charges.len(),
                got: averages.len(),
            });
        }
        let mut kinds = Vec::new();
        kinds.extend((0..factors.len()).map(AxisKind::Factor));
        kinds.extend((0..charges.len()).map(AxisKind::Charge));
        kinds.extend((0..averages.len()).map(AxisKind::Average));
        let axes: Vec<Axis> = factors.into_iter().chain(charges).chain(averages).collect();
        if axes.len() > 4 {
            return Err(Error::TooManyAxes(axes.len()));
        }
        let mut strides = vec![1; axes.len()];
        for a in (0..axes.len().saturating_sub(1)).rev() {
            strides[a] = strides[a + 1] * axes[a + 1].len();
        }
        let len = axes.iter().map(Axis::len).product();
        Ok(Self {
            axes,
            kinds,
            strides,
            len,
        })
    }

    /// Charge axes `[0, C]` (and optional average axes) with no factor axes,
    /// for markets known in advance.
    pub fn charge_only(params: &ModelParams, charge_nodes: usize, average_nodes: Option<usize>) -> Result<Self> {
        let charges = (0..params.batteries)
            .map(|_| Axis::uniform(0.0, params.capacity, charge_nodes))
            .collect::<Result<Vec<_>>>()?;
        let averages = match average_nodes {
            Some(n) => (0..params.batteries)
                .map(|_| Axis::uniform(0.0, params.capacity, n))
                .collect::<Result<Vec<_>>>()?,
            None => vec![],
        };
        Self::new(vec![], charges, averages)
    }

    /// Factor axes centred on `x0` covering +-4 standard deviations of a pilot
    /// simulation over the whole horizon, with `x0` on the centre node.
    #[allow(clippy::too_many_arguments)]
    pub fn for_diffusion(
        spec: &DiffusionSpec,
        time: &TimeGrid,
        params: &ModelParams,
        factor_nodes: usize,
        min_half_width: f64,
        charge_nodes: usize,
        average_nodes: Option<usize>,
        pilot_paths: usize,
        seed: u64,
    ) -> Result<Self> {
        let n = spec.dim();
        let odd = factor_nodes | 1;
        let pilot = simulate(spec, time, pilot_paths.max(2), seed)?;
        let mut half = vec![min_half_width; n];
        for j in 0..time.nodes() {
            for (k, h) in half.iter_mut().enumerate() {
                let xs: Vec<f64> = pilot.paths.iter().map(|p| p.factors[j][k]).collect();
                let m = xs.iter().sum::<f64>() / xs.len() as f64;
                let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64;
                let sd = var.sqrt();
                let reach = (m - spec.x0[k]).abs() + 4.0 * sd;
                *h = h.max(reach);
            }
        }
        let factors = (0..n)
            .map(|k| Axis::uniform(spec.x0[k] - half[k], spec.x0[k] + half[k], odd))
            .collect::<Result<Vec<_>>>()?;
        let charges = (0..params.batteries)
            .map(|_| Axis::uniform(0.0, params.capacity, charge_nodes))
            .collect::<Result<Vec<_>>>()?;
        let averages = match average_nodes {
            Some(c) => (0..params.batteries)
                .map(|_| Axis::uniform(0.0, params.capacity, c))
                .collect::<Result<Vec<_>>>()?,
            None => vec![],
        };
        Self::new(factors, charges, averages)
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn kinds(&self) -> &[AxisKind] {
        &self.kinds
    }

    pub fn dims(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn stride(&self, axis: usize) -> usize {
        self.strides[axis]
    }

    pub fn factor_count(&self) -> usize {
        self.kinds.iter().filter(|k| matches!(k, AxisKind::Factor(_))).count()
    }

    pub fn battery_count(&self) -> usize {
        self.kinds.iter().filter(|k| matches!(k, AxisKind::Charge(_))).count()
    }

    pub fn has_average(&self) -> bool {
        self.kinds.iter().any(|k| matches!(k, AxisKind::Average(_)))
    }

    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dims()];
        for a in 0..self.dims() {
            idx[a] = flat / self.strides[a];
            flat %= self.strides[a];
        }
        idx
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    pub fn coordinates(&self, flat: usize) -> Vec<f64> {
        self.multi_index(flat)
            .iter()
            .zip(&self.axes)
            .map(|(&i, a)| a.node(i))
            .collect()
    }

    /// Multilinear interpolation of nodal `values` at `point`, clamped to the box.
    pub fn interpolate(&self, values: &[f64], point: &[f64]) -> f64 {
        let d = self.dims();
        let mut base = 0;
        let mut cells = [(0usize, 0.0f64); 4];
        for a in 0..d {
            let (i, w) = self.axes[a].locate(point[a]);
            base += i * self.strides[a];
            cells[a] = (self.strides[a], w);
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << d) {
            let mut weight = 1.0;
            let mut offset = 0;
            for (a, &(stride, w)) in cells.iter().enumerate().take(d) {
                if corner >> a & 1 == 1 {
                    weight *= w;
                    offset += stride;
                } else {
                    weight *= 1.0 - w;
                }
            }
            if weight != 0.0 {
                acc += weight * values[base + offset];
            }
        }
        acc
    }

    /// Nearest node, plus whether any coordinate was outside the box.
    pub fn nearest(&self, point: &[f64]) -> (usize, bool) {
        let mut flat = 0;
        let mut outside = false;
        for (a, axis) in self.axes.iter().enumerate() {
            outside |= !axis.contains(point[a]);
            flat += axis.nearest(point[a]) * self.strides[a];
        }
        (flat, outside)
    }

    pub(crate) fn write_header<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        write!(w, "t")?;
        for k in &self.kinds {
            match k {
                AxisKind::Factor(i) => write!(w, ",x_{}", i + 1)?,
                AxisKind::Charge(i) => write!(w, ",y_{}", i + 1)?,
                AxisKind::Average(i) => write!(w, ",ybar_{}", i + 1)?,
            }
        }
        Ok(())
    }
}
