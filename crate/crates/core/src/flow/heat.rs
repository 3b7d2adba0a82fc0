//! Poincaré constants of `μ ∗ γ_s` for a tabulated one-dimensional density `μ`.
//!
//! The table is read as a piecewise-linear density, so `μ ∗ γ_s` has a closed
//! form in terms of `erf`. Each convolved density is put on its own grid
//! (trimmed where it drops below `1e-25` of its maximum) and the unweighted
//! generator `f'' + (log p)' f'` is solved there.

use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::spectral::{spectrum, Drift, GeneratorDiscretization};

/// Relative tolerance on decreases of `C_P(μ ∗ γ_s)` in `s`.
const MONOTONE_TOLERANCE: f64 = 1e-4;
const TRIM_RATIO: f64 = 1e-25;
const LOG_CONCAVITY_SLACK: f64 = 1e-9;

/// Density on a uniform grid, normalized by the trapezoid rule.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityTable {
    pub x: Vec<f64>,
    pub density: Vec<f64>,
    /// Trapezoid mass of the table as read.
    pub original_mass: f64,
}

impl DensityTable {
    pub fn new(x: Vec<f64>, density: Vec<f64>) -> Result<Self> {
        if x.len() != density.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                found: density.len(),
            });
        }
        if x.len() < 3 {
            return Err(Error::InvalidInput("density table needs at least 3 rows".into()));
        }
        if let Some(i) = (1..x.len()).find(|&i| x[i] <= x[i - 1]) {
            return Err(Error::NonMonotoneGrid(i));
        }
        let h = (x[x.len() - 1] - x[0]) / (x.len() - 1) as f64;
        if let Some(i) = (1..x.len()).find(|&i| ((x[i] - x[i - 1]) - h).abs() > 1e-9 * h.max(x[i].abs())) {
            return Err(Error::Parse {
                line: i + 1,
                message: "density table must be uniformly spaced".into(),
            });
        }
        if density.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
            return Err(Error::InvalidInput("density values must be finite and non-negative".into()));
        }
        let mass = trapezoid(&density, h);
        if !(mass > 0.0) {
            return Err(Error::InvalidInput("density table has zero mass".into()));
        }
        if (mass - 1.0).abs() > 1e-6 {
            log::warn!("density table has mass {mass:.9}; renormalizing");
        }
        Ok(Self {
            x,
            density: density.iter().map(|p| p / mass).collect(),
            original_mass: mass,
        })
    }

    pub fn spacing(&self) -> f64 {
        self.x[1] - self.x[0]
    }

    /// Discrete midpoint log-concavity, with positive density on a single interval.
    pub fn is_log_concave(&self) -> bool {
        let p = &self.density;
        let first = p.iter().position(|&v| v > 0.0);
        let last = p.iter().rposition(|&v| v > 0.0);
        let (Some(lo), Some(hi)) = (first, last) else {
            return false;
        };
        if p[lo..=hi].iter().any(|&v| v <= 0.0) {
            return false;
        }
        (lo + 1..hi).all(|i| 2.0 * p[i].ln() >= p[i - 1].ln() + p[i + 1].ln() - LOG_CONCAVITY_SLACK)
    }

    /// `(μ ∗ γ_s)(y)` for the piecewise-linear interpolant.
    pub fn convolved(&self, s: f64, y: f64) -> f64 {
        if s == 0.0 {
            return self.interpolate(y);
        }
        let sigma = s.sqrt();
        let mut acc = 0.0;
        for i in 0..self.x.len() - 1 {
            let (a, b) = (self.x[i], self.x[i + 1]);
            let (pa, pb) = (self.density[i], self.density[i + 1]);
            if (pa == 0.0 && pb == 0.0) || (a - y) / sigma > 40.0 || (y - b) / sigma > 40.0 {
                continue;
            }
            let slope = (pb - pa) / (b - a);
            // p(z) = p(y) + slope·(z − y) on the segment, u = z − y
            let at_y = pa + slope * (y - a);
            let mass = normal_interval((a - y) / sigma, (b - y) / sigma);
            let first = sigma * (normal_pdf((a - y) / sigma) - normal_pdf((b - y) / sigma));
            acc += at_y * mass + slope * first;
        }
        acc.max(0.0)
    }

    fn interpolate(&self, y: f64) -> f64 {
        let h = self.spacing();
        let last = (self.x.len() - 1) as f64;
        let mut u = (y - self.x[0]) / h;
        if u < -1e-9 || u > last + 1e-9 {
            return 0.0;
        }
        u = u.clamp(0.0, last);
        let i = (u.floor() as usize).min(self.x.len() - 2);
        let f = u - i as f64;
        (1.0 - f) * self.density[i] + f * self.density[i + 1]
    }
}

fn trapezoid(v: &[f64], h: f64) -> f64 {
    h * (v.iter().sum::<f64>() - 0.5 * (v[0] + v[v.len() - 1]))
}

fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `P(lo ≤ Z ≤ hi)` without cancellation in the tails.
fn normal_interval(lo: f64, hi: f64) -> f64 {
    let r = std::f64::consts::FRAC_1_SQRT_2;
    if lo >= 0.0 {
        0.5 * (libm::erfc(lo * r) - libm::erfc(hi * r))
    } else if hi <= 0.0 {
        0.5 * (libm::erfc(-hi * r) - libm::erfc(-lo * r))
    } else {
        0.5 * (libm::erf(hi * r) - libm::erf(lo * r))
    }
}

/// Two-column text: position and density, `#` comments and blank lines skipped.
pub fn load_density_table(path: &Path) -> Result<DensityTable> {
    let text = std::fs::read_to_string(path)?;
    let mut x = Vec::new();
    let mut p = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(|c: char| c.is_whitespace() || c == ',').filter(|f| !f.is_empty()).collect();
        if fields.len() != 2 {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("expected 2 columns, found {}", fields.len()),
            });
        }
        let parse = |f: &str| {
            f.parse::<f64>().map_err(|e| Error::Parse {
                line: i + 1,
                message: format!("'{f}': {e}"),
            })
        };
        x.push(parse(fields[0])?);
        p.push(parse(fields[1])?);
    }
    DensityTable::new(x, p)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeatFlowPoint {
    pub s: f64,
    pub poincare: f64,
    /// `C_P` from the Richardson-extrapolated `μ₁`.
    pub extrapolated: Option<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct HeatFlowTrace {
    pub points: Vec<HeatFlowPoint>,
    pub log_concave: bool,
    /// No relative decrease larger than the tolerance between consecutive points.
    pub monotone: bool,
    /// Largest relative decrease between consecutive points.
    pub max_decrease: f64,
    /// `C_P(μ)`.
    pub poincare_input: f64,
    /// `C_P(μ ∗ γ₁)`.
    pub poincare_unit: f64,
    /// `C_P(μ ∗ γ₁) − 1 ≤ C_P(μ)`.
    pub two_sided_holds: bool,
}

/// `C_P(μ ∗ γ_s)` from the unweighted 1D generator on `points` nodes.
pub fn poincare_of_convolution(table: &DensityTable, s: f64, points: usize) -> Result<HeatFlowPoint> {
    if s < 0.0 {
        return Err(Error::NegativeTime(s));
    }
    let sd = s.sqrt();
    let (lo, hi) = if s == 0.0 {
        (table.x[0], table.x[table.x.len() - 1])
    } else {
        // scan for the trimmed support
        let pad = 12.0 * sd;
        let (a, b) = (table.x[0] - pad, table.x[table.x.len() - 1] + pad);
        let probe = 4097;
        let ys: Vec<f64> = (0..probe).map(|i| a + (b - a) * i as f64 / (probe - 1) as f64).collect();
        let vals: Vec<f64> = ys.iter().map(|&y| table.convolved(s, y)).collect();
        let max = vals.iter().copied().fold(0.0, f64::max);
        let keep = |v: &f64| *v >= TRIM_RATIO * max;
        let first = vals.iter().position(keep).unwrap_or(0);
        let last = vals.iter().rposition(keep).unwrap_or(probe - 1);
        (ys[first], ys[last])
    };
    let center = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo);
    let grid = Arc::new(Grid::aligned(vec![half], vec![points])?);
    let log_p = |y: f64| {
        let v = table.convolved(s, center + y);
        if v > 0.0 {
            v.ln()
        } else {
            -800.0
        }
    };
    let node: Vec<f64> = (0..points).map(|k| log_p(grid.local(k)[0])).collect();
    let h = grid.spacing(0);
    let mids: Vec<f64> = (0..points)
        .map(|k| if k + 1 < points { log_p(grid.local(k)[0] + 0.5 * h) } else { f64::NAN })
        .collect();
    let gen = GeneratorDiscretization::from_log_weights(s, Drift::ScriptL, grid, vec![1.0], node, &[mids])?;
    let res = spectrum(&gen, 1)?;
    Ok(HeatFlowPoint {
        s,
        poincare: res.poincare_constant,
        extrapolated: res.extrapolated.map(|e| 1.0 / e[1]),
        converged: res.converged,
    })
}

/// `C_P(μ ∗ γ_s)` along `s_grid`, with the monotonicity and two-sided checks.
pub fn heatflow_harness(table: &DensityTable, s_grid: &[f64], points: usize) -> Result<HeatFlowTrace> {
    if let Some(i) = (1..s_grid.len()).find(|&i| s_grid[i] <= s_grid[i - 1]) {
        return Err(Error::NonMonotoneGrid(i));
    }
    let log_concave = table.is_log_concave();
    if !log_concave {
        log::warn!("input density is not log-concave; monotonicity is not expected");
    }
    let points_out = s_grid
        .iter()
        .map(|&s| poincare_of_convolution(table, s, points))
        .collect::<Result<Vec<_>>>()?;
    let max_decrease = points_out
        .windows(2)
        .map(|w| (w[0].poincare - w[1].poincare) / w[0].poincare)
        .fold(0.0, f64::max);
    let poincare_input = poincare_of_convolution(table, 0.0, points)?.poincare;
    let poincare_unit = poincare_of_convolution(table, 1.0, points)?.poincare;
    Ok(HeatFlowTrace {
        points: points_out,
        log_concave,
        monotone: max_decrease <= MONOTONE_TOLERANCE,
        max_decrease,
        poincare_input,
        poincare_unit,
        two_sided_holds: poincare_unit - 1.0 <= poincare_input * (1.0 + MONOTONE_TOLERANCE),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian_table(var: f64, half: f64, n: usize) -> DensityTable {
        let x: Vec<f64> = (0..n).map(|i| -half + 2.0 * half * i as f64 / (n - 1) as f64).collect();
        let p = x.iter().map(|v| (-0.5 * v * v / var).exp()).collect();
        DensityTable::new(x, p).unwrap()
    }

    #[test]
    fn convolution_of_uniform_matches_erf() {
        let x: Vec<f64> = (0..=200).map(|i| -1.0 + i as f64 / 100.0).collect();
        let t = DensityTable::new(x, vec![0.5; 201]).unwrap();
        let s: f64 = 0.3;
        for y in [-2.0, -0.4, 0.0, 1.1, 3.5] {
            let r = std::f64::consts::FRAC_1_SQRT_2 / s.sqrt();
            let exact = 0.25 * (libm::erf((y + 1.0) * r) - libm::erf((y - 1.0) * r));
            assert!((t.convolved(s, y) - exact).abs() < 1e-14, "{y}");
        }
        assert!(t.is_log_concave());
    }

    #[test]
    fn gaussian_poincare_grows_like_variance() {
        let t = gaussian_table(1.0, 12.0, 2401);
        for s in [0.0, 0.5, 1.0] {
            let p = poincare_of_convolution(&t, s, 2049).unwrap();
            assert!((p.poincare - (1.0 + s)).abs() < 2e-3 * (1.0 + s), "{s}: {p:?}");
        }
    }

    #[test]
    fn uniform_is_monotone() {
        let x: Vec<f64> = (0..=400).map(|i| -1.0 + i as f64 / 200.0).collect();
        let t = DensityTable::new(x, vec![1.0; 401]).unwrap();
        assert!((t.original_mass - 2.0).abs() < 1e-12);
        let trace = heatflow_harness(&t, &[0.0, 0.01, 0.05, 0.2, 0.5, 1.0], 2049).unwrap();
        assert!((trace.poincare_input - 4.0 / std::f64::consts::PI.powi(2)).abs() < 1e-4);
        assert!(trace.monotone, "{trace:?}");
        assert!(trace.two_sided_holds);
    }

    #[test]
    fn tables_are_validated() {
        assert!(DensityTable::new(vec![0.0, 1.0, 3.0], vec![1.0; 3]).is_err());
        assert!(DensityTable::new(vec![0.0, 1.0, 0.5], vec![1.0; 3]).is_err());
        let bimodal = DensityTable::new(vec![0.0, 1.0, 2.0, 3.0, 4.0], vec![1.0, 0.1, 1.0, 0.1, 1.0]).unwrap();
        assert!(!bimodal.is_log_concave());
    }
}
