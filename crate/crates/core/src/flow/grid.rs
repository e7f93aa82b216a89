use super::{FlowError, FlowStack, LogDetMode, Result};
use crate::autodiff::ArrayValue;
use crate::icnn;

/// Regular grid over `[x_lo, x_hi] x [y_lo, y_hi]` with `resolution` points
/// per axis, endpoints included.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub bounds: [f64; 4],
    pub resolution: usize,
}

impl GridSpec {
    pub fn new(bounds: [f64; 4], resolution: usize) -> Result<Self> {
        let [x0, x1, y0, y1] = bounds;
        if resolution < 2 || !(x1 > x0) || !(y1 > y0) || bounds.iter().any(|b| !b.is_finite()) {
            return Err(FlowError::Unsupported(format!(
                "grid needs increasing finite bounds and at least 2 points per axis, got {bounds:?} x {resolution}"
            )));
        }
        Ok(Self { bounds, resolution })
    }

    fn axis(lo: f64, hi: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
    }

    pub fn xs(&self) -> Vec<f64> {
        Self::axis(self.bounds[0], self.bounds[1], self.resolution)
    }

    pub fn ys(&self) -> Vec<f64> {
        Self::axis(self.bounds[2], self.bounds[3], self.resolution)
    }

    /// Grid points as rows `(x1, x2)`, `x2` varying slowest.
    pub fn points(&self) -> ArrayValue {
        let (xs, ys) = (self.xs(), self.ys());
        let mut data = Vec::with_capacity(2 * xs.len() * ys.len());
        for &y in &ys {
            for &x in &xs {
                data.push(x);
                data.push(y);
            }
        }
        ArrayValue::matrix(xs.len() * ys.len(), 2, data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensityGrid {
    pub spec: GridSpec,
    /// Row-major over [`GridSpec::points`].
    pub logp: Vec<f64>,
}

fn require_2d(stack: &FlowStack) -> Result<()> {
    if stack.dim() != 2 {
        return Err(FlowError::Unsupported(format!(
            "density grids need a 2-dimensional model, got dimension {}",
            stack.dim()
        )));
    }
    Ok(())
}

/// Exact log-density on a grid.
pub fn density_grid(stack: &FlowStack, spec: GridSpec) -> Result<DensityGrid> {
    require_2d(stack)?;
    let pts = spec.points();
    let logp = stack.log_density(&pts, LogDetMode::Exact)?.logp;
    Ok(DensityGrid { spec, logp })
}

/// Trapezoid-rule integral of `exp(logp)` over the grid.
pub fn trapezoid_integral(grid: &DensityGrid) -> f64 {
    let n = grid.spec.resolution;
    let [x0, x1, y0, y1] = grid.spec.bounds;
    let (hx, hy) = ((x1 - x0) / (n - 1) as f64, (y1 - y0) / (n - 1) as f64);
    let w = |i: usize| if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
    let mut total = 0.0;
    for j in 0..n {
        for i in 0..n {
            total += w(i) * w(j) * grid.logp[j * n + i].exp();
        }
    }
    total * hx * hy
}

impl DensityGrid {
    /// Binary PGM (`P5`, maxval 255) of `exp(logp)` normalized by its
    /// maximum; the top image row is the largest `x2`.
    pub fn to_pgm(&self) -> Vec<u8> {
        let n = self.spec.resolution;
        let max = self.logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut out = format!("P5\n{n} {n}\n255\n").into_bytes();
        for j in (0..n).rev() {
            for i in 0..n {
                let v = (self.logp[j * n + i] - max).exp();
                out.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
        out
    }
}

/// Potential of the first block (after its affine normalization) on the grid.
pub fn potential_grid(stack: &FlowStack, spec: GridSpec) -> Result<Vec<f64>> {
    require_2d(stack)?;
    let pts = spec.points();
    let Some(b) = stack.blocks.first() else {
        return Ok(pts
            .data()
            .chunks(2)
            .map(|p| 0.5 * (p[0] * p[0] + p[1] * p[1]))
            .collect());
    };
    let h = match &b.actnorm {
        Some(a) => a.forward(&pts),
        None => pts,
    };
    let mut out = Vec::with_capacity(h.rows());
    for r in super::layer::chunks(h.rows()) {
        out.extend(icnn::potential_values(
            &b.layer.params,
            &b.layer.config,
            &super::layer::rows(&h, r),
        )?);
    }
    Ok(out)
}
