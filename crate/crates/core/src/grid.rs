//! Rectangular grids in a rotated frame, fields, and functions sampled on grids.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Tensor grid on the box `[-w_a, w_a]` along the orthonormal axes `frame[:, a]`.
///
/// Nodes are stored row-major: the last axis varies fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    frame: DMatrix<f64>,
    half_widths: Vec<f64>,
    shape: Vec<usize>,
    strides: Vec<usize>,
}

impl Grid {
    pub fn new(frame: DMatrix<f64>, half_widths: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        let d = shape.len();
        if d == 0 || d > 3 {
            return Err(Error::InvalidInput(format!("grid dimension must be 1..=3, got {d}")));
        }
        if frame.shape() != (d, d) || half_widths.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: frame.nrows().max(half_widths.len()),
            });
        }
        let ortho = (frame.transpose() * &frame - DMatrix::<f64>::identity(d, d)).amax();
        if ortho > 1e-10 {
            return Err(Error::InvalidInput(format!("grid frame is not orthonormal ({ortho:.3e})")));
        }
        if shape.iter().any(|&n| n < 3) {
            return Err(Error::InvalidInput("grids need at least 3 points per axis".into()));
        }
        if half_widths.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidInput("box half-widths must be positive".into()));
        }
        let mut strides = vec![1; d];
        for a in (0..d.saturating_sub(1)).rev() {
            strides[a] = strides[a + 1] * shape[a + 1];
        }
        Ok(Self {
            frame,
            half_widths,
            shape,
            strides,
        })
    }

    /// Axis-aligned grid.
    pub fn aligned(half_widths: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        let d = shape.len();
        Self::new(DMatrix::identity(d, d), half_widths, shape)
    }

    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn half_widths(&self) -> &[f64] {
        &self.half_widths
    }

    pub fn frame(&self) -> &DMatrix<f64> {
        &self.frame
    }

    pub fn stride(&self, axis: usize) -> usize {
        self.strides[axis]
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        2.0 * self.half_widths[axis] / (self.shape[axis] - 1) as f64
    }

    pub fn multi_index(&self, mut k: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for a in 0..self.dim() {
            idx[a] = k / self.strides[a];
            k %= self.strides[a];
        }
        idx
    }

    pub fn linear_index(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    /// Coordinate of index `i` along `axis`, in the grid frame.
    pub fn coordinate(&self, axis: usize, i: f64) -> f64 {
        -self.half_widths[axis] + i * self.spacing(axis)
    }

    /// Frame coordinates of node `k`.
    pub fn local(&self, k: usize) -> Vec<f64> {
        self.multi_index(k)
            .iter()
            .enumerate()
            .map(|(a, &i)| self.coordinate(a, i as f64))
            .collect()
    }

    pub fn to_physical(&self, local: &[f64]) -> Vec<f64> {
        let d = self.dim();
        (0..d)
            .map(|i| (0..d).map(|a| self.frame[(i, a)] * local[a]).sum())
            .collect()
    }

    pub fn to_local(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        (0..d)
            .map(|a| (0..d).map(|i| self.frame[(i, a)] * x[i]).sum())
            .collect()
    }

    /// Physical coordinates of node `k`.
    pub fn node(&self, k: usize) -> Vec<f64> {
        self.to_physical(&self.local(k))
    }

    pub fn nodes(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|k| self.node(k)).collect()
    }

    /// Trapezoid volume of node `k`.
    pub fn volume(&self, k: usize) -> f64 {
        let idx = self.multi_index(k);
        (0..self.dim())
            .map(|a| {
                let h = self.spacing(a);
                if idx[a] == 0 || idx[a] == self.shape[a] - 1 {
                    0.5 * h
                } else {
                    h
                }
            })
            .product()
    }

    /// True when node `k` is at least `margin` nodes away from every face.
    pub fn is_interior(&self, k: usize, margin: usize) -> bool {
        self.multi_index(k)
            .iter()
            .zip(&self.shape)
            .all(|(&i, &n)| i >= margin && i + margin < n)
    }

    pub fn is_boundary(&self, k: usize) -> bool {
        !self.is_interior(k, 1)
    }

    /// Grid of every other node (requires odd point counts).
    pub fn coarsen(&self) -> Result<Self> {
        if self.shape.iter().any(|&n| n % 2 == 0 || n < 5) {
            return Err(Error::InvalidInput("coarsening needs odd shapes of at least 5 points".into()));
        }
        Self::new(
            self.frame.clone(),
            self.half_widths.clone(),
            self.shape.iter().map(|&n| (n + 1) / 2).collect(),
        )
    }
}

/// A function on `ℝᵈ` with an optional gradient.
pub trait Field: Sync {
    fn dim(&self) -> usize;

    fn eval(&self, x: &[f64], grad: Option<&mut [f64]>) -> f64;

    /// The grid the values came from, for fields only known on a box.
    fn support_grid(&self) -> Option<&Grid> {
        None
    }
}

/// Closed-form test functions.
#[derive(Debug, Clone, PartialEq)]
pub enum TestFunction {
    Constant(f64),
    /// `⟨a, x⟩`.
    Linear(Vec<f64>),
    /// `x_axis^power`.
    Monomial { dim: usize, axis: usize, power: u32 },
    /// `amplitude · exp(−|x − center|² / (2 width²))`.
    GaussianBump {
        center: Vec<f64>,
        width: f64,
        amplitude: f64,
    },
    /// `exp(1 − 1/(1 − |x − center|²/radius²))` inside the ball, 0 outside.
    CompactBump { center: Vec<f64>, radius: f64 },
    /// `cos(⟨k, x⟩)`.
    Cosine(Vec<f64>),
}

impl Field for TestFunction {
    fn dim(&self) -> usize {
        match self {
            TestFunction::Constant(_) => 0,
            TestFunction::Linear(a) | TestFunction::Cosine(a) => a.len(),
            TestFunction::Monomial { dim, .. } => *dim,
            TestFunction::GaussianBump { center, .. } | TestFunction::CompactBump { center, .. } => center.len(),
        }
    }

    fn eval(&self, x: &[f64], grad: Option<&mut [f64]>) -> f64 {
        match self {
            TestFunction::Constant(c) => {
                if let Some(g) = grad {
                    g.fill(0.0);
                }
                *c
            }
            TestFunction::Linear(a) => {
                if let Some(g) = grad {
                    g.copy_from_slice(a);
                }
                a.iter().zip(x).map(|(ai, xi)| ai * xi).sum()
            }
            TestFunction::Monomial { axis, power, .. } => {
                let xi = x[*axis];
                if let Some(g) = grad {
                    g.fill(0.0);
                    if *power > 0 {
                        g[*axis] = *power as f64 * xi.powi(*power as i32 - 1);
                    }
                }
                xi.powi(*power as i32)
            }
            TestFunction::GaussianBump {
                center,
                width,
                amplitude,
            } => {
                let r2: f64 = x.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum();
                let v = amplitude * (-0.5 * r2 / (width * width)).exp();
                if let Some(g) = grad {
                    for i in 0..x.len() {
                        g[i] = -v * (x[i] - center[i]) / (width * width);
                    }
                }
                v
            }
            TestFunction::CompactBump { center, radius } => {
                let r2: f64 = x.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (radius * radius);
                if r2 >= 1.0 {
                    if let Some(g) = grad {
                        g.fill(0.0);
                    }
                    return 0.0;
                }
                let q = 1.0 - r2;
                let v = (1.0 - 1.0 / q).exp();
                if let Some(g) = grad {
                    // d/dx exp(1 − 1/q) = v · (−1/q²) · (−dq/dx), dq/dx = −2(x−c)/R²
                    for i in 0..x.len() {
                        g[i] = -v * 2.0 * (x[i] - center[i]) / (radius * radius * q * q);
                    }
                }
                v
            }
            TestFunction::Cosine(k) => {
                let arg: f64 = k.iter().zip(x).map(|(a, b)| a * b).sum();
                if let Some(g) = grad {
                    for i in 0..x.len() {
                        g[i] = -arg.sin() * k[i];
                    }
                }
                arg.cos()
            }
        }
    }
}

/// Values on the nodes of a grid, interpolated by tensor cubic Lagrange
/// polynomials and extended by the nearest boundary value outside the box.
#[derive(Debug, Clone)]
pub struct GridFunction {
    grid: Arc<Grid>,
    values: Vec<f64>,
    pub tag: String,
}

impl GridFunction {
    pub fn new(grid: Arc<Grid>, values: Vec<f64>, tag: impl Into<String>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::DimensionMismatch {
                expected: grid.len(),
                found: values.len(),
            });
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite value at node {k}")));
        }
        Ok(Self {
            grid,
            values,
            tag: tag.into(),
        })
    }

    /// Samples a field at the nodes.
    pub fn sample(grid: Arc<Grid>, f: &dyn Field, tag: impl Into<String>) -> Result<Self> {
        let values = (0..grid.len()).map(|k| f.eval(&grid.node(k), None)).collect();
        Self::new(grid, values, tag)
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// Four-point Lagrange stencil: start index and weights (and derivative weights).
fn stencil(n: usize, pos: f64) -> (usize, [f64; 4], [f64; 4]) {
    let start = (pos.floor() as isize - 1).clamp(0, n as isize - 4) as usize;
    let s = pos - start as f64;
    let pts = [0.0, 1.0, 2.0, 3.0];
    let mut w = [0.0; 4];
    let mut dw = [0.0; 4];
    for j in 0..4 {
        let mut num = 1.0;
        let mut den = 1.0;
        for m in 0..4 {
            if m != j {
                num *= s - pts[m];
                den *= pts[j] - pts[m];
            }
        }
        w[j] = num / den;
        let mut deriv = 0.0;
        for l in 0..4 {
            if l == j {
                continue;
            }
            let mut prod = 1.0;
            for m in 0..4 {
                if m != j && m != l {
                    prod *= s - pts[m];
                }
            }
            deriv += prod;
        }
        dw[j] = deriv / den;
    }
    (start, w, dw)
}

impl Field for GridFunction {
    fn dim(&self) -> usize {
        self.grid.dim()
    }

    fn eval(&self, x: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let g = &self.grid;
        let d = g.dim();
        let y = g.to_local(x);
        let mut stencils = Vec::with_capacity(d);
        let mut inside = vec![true; d];
        for a in 0..d {
            let n = g.shape()[a];
            let h = g.spacing(a);
            let mut pos = (y[a] + g.half_widths()[a]) / h;
            if pos < 0.0 || pos > (n - 1) as f64 {
                inside[a] = false;
                pos = pos.clamp(0.0, (n - 1) as f64);
            }
            stencils.push(stencil(n, pos));
        }
        let mut value = 0.0;
        let mut dlocal = vec![0.0; d];
        let combos = 4usize.pow(d as u32);
        for c in 0..combos {
            let mut idx = 0;
            let mut w = 1.0;
            let mut partial = vec![1.0; d];
            let mut rem = c;
            for a in 0..d {
                let j = rem % 4;
                rem /= 4;
                let (start, wa, dwa) = &stencils[a];
                idx += (start + j) * g.stride(a);
                w *= wa[j];
                for (b, p) in partial.iter_mut().enumerate() {
                    *p *= if a == b { dwa[j] / g.spacing(a) } else { wa[j] };
                }
            }
            let v = self.values[idx];
            value += w * v;
            for a in 0..d {
                dlocal[a] += partial[a] * v;
            }
        }
        if let Some(gr) = grad {
            for a in 0..d {
                if !inside[a] {
                    dlocal[a] = 0.0;
                }
            }
            let phys = g.to_physical(&dlocal);
            gr.copy_from_slice(&phys);
        }
        value
    }

    fn support_grid(&self) -> Option<&Grid> {
        Some(&self.grid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn indexing_round_trips() {
        let g = Grid::aligned(vec![1.0, 2.0, 3.0], vec![3, 5, 7]).unwrap();
        for k in 0..g.len() {
            assert_eq!(g.linear_index(&g.multi_index(k)), k);
        }
        assert_eq!(g.node(0), vec![-1.0, -2.0, -3.0]);
        assert_eq!(g.node(g.len() - 1), vec![1.0, 2.0, 3.0]);
        let vol: f64 = (0..g.len()).map(|k| g.volume(k)).sum();
        assert_relative_eq!(vol, 2.0 * 4.0 * 6.0, epsilon = 1e-12);
    }

    #[test]
    fn rotated_frame_maps_back() {
        let c = 0.6f64;
        let s = 0.8f64;
        let frame = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
        let g = Grid::new(frame, vec![1.0, 1.0], vec![5, 5]).unwrap();
        let x = g.node(7);
        let back = g.to_local(&x);
        assert_eq!(back.len(), 2);
        let loc = g.local(7);
        assert!((back[0] - loc[0]).abs() < 1e-15 && (back[1] - loc[1]).abs() < 1e-15);
    }

    #[test]
    fn cubic_interpolation_is_exact_on_cubics() {
        let g = Arc::new(Grid::aligned(vec![2.0, 1.5], vec![9, 11]).unwrap());
        let f = |x: &[f64]| x[0].powi(3) - 2.0 * x[0] * x[1] * x[1] + x[1] + 0.5;
        let vals = (0..g.len()).map(|k| f(&g.node(k))).collect();
        let gf = GridFunction::new(g, vals, "cubic").unwrap();
        let mut grad = [0.0; 2];
        let p = [0.37, -0.81];
        let v = gf.eval(&p, Some(&mut grad));
        assert_relative_eq!(v, f(&p), epsilon = 1e-12);
        assert_relative_eq!(grad[0], 3.0 * p[0] * p[0] - 2.0 * p[1] * p[1], epsilon = 1e-11);
        assert_relative_eq!(grad[1], -4.0 * p[0] * p[1] + 1.0, epsilon = 1e-11);
        // constant extension outside
        let out = gf.eval(&[5.0, 0.0], None);
        assert_relative_eq!(out, gf.eval(&[2.0, 0.0], None), epsilon = 1e-12);
    }

    #[test]
    fn test_function_gradients() {
        let fs = vec![
            TestFunction::Linear(vec![1.0, -2.0]),
            TestFunction::Monomial { dim: 2, axis: 1, power: 3 },
            TestFunction::GaussianBump {
                center: vec![0.1, 0.2],
                width: 0.7,
                amplitude: 2.0,
            },
            TestFunction::CompactBump {
                center: vec![0.0, 0.3],
                radius: 1.5,
            },
            TestFunction::Cosine(vec![0.5, 1.5]),
        ];
        let x = [0.4, -0.3];
        for f in &fs {
            let mut g = [0.0; 2];
            f.eval(&x, Some(&mut g));
            for i in 0..2 {
                let e = 1e-6;
                let mut xp = x;
                let mut xm = x;
                xp[i] += e;
                xm[i] -= e;
                let fd = (f.eval(&xp, None) - f.eval(&xm, None)) / (2.0 * e);
                assert!((fd - g[i]).abs() < 1e-8, "{f:?} axis {i}: {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn coarsen_keeps_even_nodes() {
        let g = Grid::aligned(vec![1.0], vec![9]).unwrap();
        let c = g.coarsen().unwrap();
        assert_eq!(c.shape(), &[5]);
        assert_eq!(c.node(1), g.node(2));
    }
}
