//! Flow measures `ν_t ∝ e^{−V_t} γ_{C_∞−C_t}` on truncated grids and the
//! semigroup `P_{s,t} f = e^{V_t} γ_{C_t−C_s} ∗ (f e^{−V_s})`.

mod conservation;
mod heat;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::covariance::{CovarianceAt, CovarianceSchedule};
use crate::error::{Error, Result};
use crate::grid::{Field, Grid, GridFunction};
use crate::linalg::SymEigen;
use crate::potential::{Derivs, GaussianKernel, Potential, Renormalized};
use crate::quadrature::QuadratureRule;

pub use conservation::{conservation_check, ConservationReport, TailInput};
pub use heat::{heatflow_harness, load_density_table, DensityTable, HeatFlowPoint, HeatFlowTrace};

/// Box and resolution of the grids carrying `ν_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowOptions {
    /// Points per axis.
    pub shape: Vec<usize>,
    /// Half-width in standard deviations of `γ_{C_∞−C_t}` along each axis.
    pub sd_multiple: f64,
    /// Fixed half-widths instead of the per-time box.
    pub half_widths: Option<Vec<f64>>,
}

impl FlowOptions {
    pub fn new(shape: Vec<usize>) -> Self {
        Self {
            shape,
            sd_multiple: 8.0,
            half_widths: None,
        }
    }
}

/// The measure `ν_t` with node masses on its grid.
pub struct FlowMeasure<'a> {
    t: f64,
    at: CovarianceAt,
    gap_inv: DMatrix<f64>,
    potential: Renormalized<'a>,
    grid: Arc<Grid>,
    log_density: Vec<f64>,
    log_normalizer: f64,
    probs: Vec<f64>,
    tail_mass: f64,
}

/// Frame diagonalising `C_t'`, with the standard deviation of `C_∞ − C_t` per axis.
fn flow_frame(at: &CovarianceAt) -> (DMatrix<f64>, Vec<f64>) {
    let eig = SymEigen::new(&at.c_prime);
    let d = at.c.nrows();
    let sds = (0..d)
        .map(|a| {
            let v = eig.vectors.column(a);
            (v.transpose() * &at.gap * v)[(0, 0)].max(0.0).sqrt()
        })
        .collect();
    (eig.vectors, sds)
}

impl<'a> FlowMeasure<'a> {
    pub fn new(
        schedule: &CovarianceSchedule,
        v0: &'a dyn Potential,
        t: f64,
        rule: &'a QuadratureRule,
        opts: &FlowOptions,
    ) -> Result<Self> {
        let d = schedule.dim();
        if v0.dim() != d || opts.shape.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: if v0.dim() != d { v0.dim() } else { opts.shape.len() },
            });
        }
        let at = schedule.eval(t)?;
        let gap_inv = schedule.gap_inverse(&at)?;
        let (frame, sds) = flow_frame(&at);
        let half_widths = match &opts.half_widths {
            Some(w) => w.clone(),
            None => sds.iter().map(|s| opts.sd_multiple * s).collect(),
        };
        let tail_mass: f64 = half_widths
            .iter()
            .zip(&sds)
            .map(|(w, s)| libm::erfc(w / (s * std::f64::consts::SQRT_2)))
            .sum();
        let grid = Arc::new(Grid::new(frame, half_widths, opts.shape.clone())?);
        let potential = Renormalized::new(v0, &at.c, rule)?;
        let log_density = (0..grid.len())
            .into_par_iter()
            .map(|k| log_density_with(&potential, &gap_inv, &grid.node(k)))
            .collect::<Result<Vec<f64>>>()?;
        let max = log_density.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let masses: Vec<f64> = (0..grid.len())
            .map(|k| grid.volume(k) * (log_density[k] - max).exp())
            .collect();
        let total: f64 = masses.iter().sum();
        let probs = masses.iter().map(|m| m / total).collect();
        Ok(Self {
            t,
            at,
            gap_inv,
            potential,
            grid,
            log_density,
            log_normalizer: max + total.ln(),
            probs,
            tail_mass,
        })
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn covariance(&self) -> &CovarianceAt {
        &self.at
    }

    /// `C_t'`.
    pub fn mobility(&self) -> &DMatrix<f64> {
        &self.at.c_prime
    }

    /// `(C_∞ − C_t)⁻¹`.
    pub fn gap_inverse(&self) -> &DMatrix<f64> {
        &self.gap_inv
    }

    pub fn potential(&self) -> &Renormalized<'a> {
        &self.potential
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    /// Unnormalized log-density at the nodes.
    pub fn log_density(&self) -> &[f64] {
        &self.log_density
    }

    /// Log of the trapezoid integral of the unnormalized density over the box.
    pub fn log_normalizer(&self) -> f64 {
        self.log_normalizer
    }

    /// Normalized node masses (sum to one).
    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    /// Normalized density at node `k`.
    pub fn density(&self, k: usize) -> f64 {
        (self.log_density[k] - self.log_normalizer).exp()
    }

    /// Gaussian tail bound on the mass of `γ_{C_∞−C_t}` outside the box.
    pub fn tail_mass(&self) -> f64 {
        self.tail_mass
    }

    /// Unnormalized log-density at an arbitrary point.
    pub fn log_density_at(&self, x: &[f64]) -> Result<f64> {
        log_density_with(&self.potential, &self.gap_inv, x)
    }

    /// `E_{ν_t}` of node values.
    pub fn expect(&self, values: &[f64]) -> f64 {
        self.probs.iter().zip(values).map(|(p, v)| p * v).sum()
    }

    /// `E_{ν_t} f`.
    pub fn expect_field(&self, f: &dyn Field) -> f64 {
        (0..self.grid.len())
            .map(|k| self.probs[k] * f.eval(&self.grid.node(k), None))
            .sum()
    }

    /// Second moment `E_{ν_t}|x|²`.
    pub fn second_moment(&self) -> f64 {
        (0..self.grid.len())
            .map(|k| self.probs[k] * self.grid.node(k).iter().map(|v| v * v).sum::<f64>())
            .sum()
    }
}

fn log_density_with(potential: &Renormalized<'_>, gap_inv: &DMatrix<f64>, x: &[f64]) -> Result<f64> {
    let xv = DVector::from_column_slice(x);
    let quad = (gap_inv * &xv).dot(&xv);
    Ok(-0.5 * quad - potential.value(x)?)
}

/// `−½⟨x, (C_∞ − C_t)⁻¹x⟩ − V_t(x)`.
pub fn nu_log_density(
    schedule: &CovarianceSchedule,
    v0: &dyn Potential,
    t: f64,
    x: &[f64],
    q: &QuadratureRule,
) -> Result<f64> {
    let at = schedule.eval(t)?;
    let gap_inv = schedule.gap_inverse(&at)?;
    let r = Renormalized::new(v0, &at.c, q)?;
    log_density_with(&r, &gap_inv, x)
}

/// The operator `P_{s,t}`, evaluated pointwise as an expectation against the
/// tilted measure `∝ e^{−V_s(x+ζ)} γ_{C_t−C_s}(dζ)`.
pub struct Semigroup<'a> {
    v0: &'a dyn Potential,
    vs: Option<Renormalized<'a>>,
    kernel: GaussianKernel,
    rule: &'a QuadratureRule,
    s: f64,
    t: f64,
}

impl<'a> Semigroup<'a> {
    pub fn new(
        schedule: &CovarianceSchedule,
        v0: &'a dyn Potential,
        s: f64,
        t: f64,
        rule: &'a QuadratureRule,
    ) -> Result<Self> {
        if s > t {
            return Err(Error::TimesOutOfOrder { s, t });
        }
        let cs = schedule.eval(s)?;
        let ct = schedule.eval(t)?;
        let diff = &ct.c - &cs.c;
        let kernel = GaussianKernel::new(&((&diff + diff.transpose()) * 0.5))?;
        let vs = if s > 0.0 {
            Some(Renormalized::new(v0, &cs.c, rule)?)
        } else {
            None
        };
        Ok(Self {
            v0,
            vs,
            kernel,
            rule,
            s,
            t,
        })
    }

    pub fn times(&self) -> (f64, f64) {
        (self.s, self.t)
    }

    fn base(&self) -> &dyn Potential {
        match &self.vs {
            Some(r) => r,
            None => self.v0,
        }
    }

    fn check_support(&self, f: &dyn Field) -> Result<()> {
        if let Some(g) = f.support_grid() {
            let half = g.half_widths().iter().copied().fold(f64::INFINITY, f64::min);
            let sd = self.kernel.max_sd();
            if sd > half {
                return Err(Error::KernelWiderThanBox {
                    kernel_sd: sd,
                    half_width: half,
                });
            }
        }
        Ok(())
    }

    /// `P_{s,t} f(x)`.
    pub fn at(&self, f: &dyn Field, x: &[f64]) -> Result<f64> {
        let tm = crate::potential::TiltedMeasure::build(self.base(), &self.kernel, x, self.rule, Derivs::Value)?;
        Ok(tm.expect(|p| f.eval(p, None)))
    }

    /// `P_{s,t} f(x)` and `∇P_{s,t} f(x)`.
    pub fn at_with_gradient(&self, f: &dyn Field, x: &[f64]) -> Result<(f64, DVector<f64>)> {
        let tm = crate::potential::TiltedMeasure::build(self.base(), &self.kernel, x, self.rule, Derivs::Gradient)?;
        Ok(tm.transport(&|p, g| f.eval(p, g)))
    }

    /// `P_{s,t} f` at every node of `grid`.
    pub fn apply(&self, f: &dyn Field, grid: Arc<Grid>) -> Result<GridFunction> {
        self.check_support(f)?;
        let values = (0..grid.len())
            .into_par_iter()
            .map(|k| self.at(f, &grid.node(k)))
            .collect::<Result<Vec<f64>>>()?;
        GridFunction::new(grid, values, format!("P[{},{}]", self.s, self.t))
    }

    /// `P_{s,t} f` and its gradient at every node of `grid`.
    pub fn apply_with_gradient(&self, f: &dyn Field, grid: Arc<Grid>) -> Result<(GridFunction, Vec<DVector<f64>>)> {
        self.check_support(f)?;
        let pairs = (0..grid.len())
            .into_par_iter()
            .map(|k| self.at_with_gradient(f, &grid.node(k)))
            .collect::<Result<Vec<_>>>()?;
        let (values, grads): (Vec<f64>, Vec<DVector<f64>>) = pairs.into_iter().unzip();
        let gf = GridFunction::new(grid, values, format!("P[{},{}]", self.s, self.t))?;
        Ok((gf, grads))
    }
}

/// `P_{s,t} f` on the nodes of `grid`.
pub fn semigroup_apply(
    schedule: &CovarianceSchedule,
    v0: &dyn Potential,
    s: f64,
    t: f64,
    f: &dyn Field,
    grid: Arc<Grid>,
    q: &QuadratureRule,
) -> Result<GridFunction> {
    Semigroup::new(schedule, v0, s, t, q)?.apply(f, grid)
}
