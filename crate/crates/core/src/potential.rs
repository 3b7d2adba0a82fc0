//! Base potentials `V₀` and renormalized potentials `V_t = −log(γ_{C_t} ∗ e^{−V₀})`.
//!
//! Expectations against the tilted measure `dρ(ζ) ∝ e^{−V₀(x+ζ)} dγ_C(ζ)` are
//! computed by Gauss–Hermite quadrature recentred at the mode of the tilted
//! density and stretched along the principal axes of its Hessian to the extent
//! of the mass, so that the nodes sit where `ρ` lives even when `e^{−V₀}`
//! moves or flattens it. All sums are taken in log-space.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, SymEigen};
use crate::quadrature::QuadratureRule;

/// Anything with a value, gradient and Hessian on `ℝᵈ`.
///
/// `hess` is filled row-major (`d × d`).
pub trait Potential: Send + Sync {
    fn dim(&self) -> usize;

    fn eval(&self, x: &[f64], grad: Option<&mut [f64]>, hess: Option<&mut [f64]>) -> Result<f64>;

    fn value(&self, x: &[f64]) -> Result<f64> {
        self.eval(x, None, None)
    }

    /// `B` when the potential is exactly `½⟨x, Bx⟩`.
    fn as_quadratic(&self) -> Option<&DMatrix<f64>> {
        None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PotentialForm {
    Zero,
    /// `½⟨x, Bx⟩`.
    Quadratic(DMatrix<f64>),
    /// `Σᵢ ¼ quartic[i] xᵢ⁴ + ½ quadratic[i] xᵢ² − linear[i] xᵢ`.
    Polynomial {
        quartic: Vec<f64>,
        quadratic: Vec<f64>,
        linear: Vec<f64>,
    },
    /// `Σᵢ ¼ g xᵢ⁴ + ½ ν xᵢ² − hᵢ xᵢ`.
    Phi4SiteSum { g: f64, nu: f64, h: Vec<f64> },
}

/// Closed-form base potential `V₀`.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialDescriptor {
    form: PotentialForm,
    dim: usize,
    // per-coordinate (quartic, quadratic, linear) for the polynomial forms
    coeffs: Vec<[f64; 3]>,
}

impl PotentialDescriptor {
    pub fn new(form: PotentialForm, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidInput("dimension must be positive".into()));
        }
        let check_len = |v: &[f64]| {
            if v.len() == dim {
                Ok(())
            } else {
                Err(Error::DimensionMismatch {
                    expected: dim,
                    found: v.len(),
                })
            }
        };
        let coeffs = match &form {
            PotentialForm::Zero => Vec::new(),
            PotentialForm::Quadratic(b) => {
                if b.shape() != (dim, dim) {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        found: b.nrows(),
                    });
                }
                let asym = linalg::max_asymmetry(b);
                if asym > 1e-12 * b.amax().max(1.0) {
                    return Err(Error::NotSymmetric {
                        what: "B".into(),
                        asymmetry: asym,
                    });
                }
                Vec::new()
            }
            PotentialForm::Polynomial {
                quartic,
                quadratic,
                linear,
            } => {
                check_len(quartic)?;
                check_len(quadratic)?;
                check_len(linear)?;
                (0..dim).map(|i| [quartic[i], quadratic[i], linear[i]]).collect()
            }
            PotentialForm::Phi4SiteSum { g, nu, h } => {
                check_len(h)?;
                h.iter().map(|&hi| [*g, *nu, hi]).collect()
            }
        };
        if coeffs.iter().any(|c| c[0] < 0.0 || !c.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidInput(
                "quartic coefficients must be finite and non-negative".into(),
            ));
        }
        Ok(Self { form, dim, coeffs })
    }

    pub fn zero(dim: usize) -> Self {
        Self::new(PotentialForm::Zero, dim).expect("zero potential")
    }

    pub fn quadratic(b: DMatrix<f64>) -> Result<Self> {
        let d = b.nrows();
        Self::new(PotentialForm::Quadratic(b), d)
    }

    pub fn phi4(g: f64, nu: f64, h: Vec<f64>) -> Result<Self> {
        let d = h.len();
        Self::new(PotentialForm::Phi4SiteSum { g, nu, h }, d)
    }

    pub fn form(&self) -> &PotentialForm {
        &self.form
    }

    /// True when `V₀` is identically zero.
    pub fn is_zero(&self) -> bool {
        matches!(self.form, PotentialForm::Zero)
    }
}

impl Potential for PotentialDescriptor {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &[f64], grad: Option<&mut [f64]>, hess: Option<&mut [f64]>) -> Result<f64> {
        let d = self.dim;
        if x.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: x.len(),
            });
        }
        match &self.form {
            PotentialForm::Zero => {
                if let Some(g) = grad {
                    g.fill(0.0);
                }
                if let Some(h) = hess {
                    h.fill(0.0);
                }
                Ok(0.0)
            }
            PotentialForm::Quadratic(b) => {
                let mut v = 0.0;
                let mut bx = vec![0.0; d];
                for i in 0..d {
                    for j in 0..d {
                        bx[i] += b[(i, j)] * x[j];
                    }
                    v += 0.5 * x[i] * bx[i];
                }
                if let Some(g) = grad {
                    g.copy_from_slice(&bx);
                }
                if let Some(h) = hess {
                    for i in 0..d {
                        for j in 0..d {
                            h[i * d + j] = b[(i, j)];
                        }
                    }
                }
                Ok(v)
            }
            PotentialForm::Polynomial { .. } | PotentialForm::Phi4SiteSum { .. } => {
                let mut v = 0.0;
                for (i, &[q4, q2, q1]) in self.coeffs.iter().enumerate() {
                    let xi = x[i];
                    let x2 = xi * xi;
                    v += 0.25 * q4 * x2 * x2 + 0.5 * q2 * x2 - q1 * xi;
                }
                if let Some(g) = grad {
                    for (i, &[q4, q2, q1]) in self.coeffs.iter().enumerate() {
                        let xi = x[i];
                        g[i] = q4 * xi * xi * xi + q2 * xi - q1;
                    }
                }
                if let Some(h) = hess {
                    h.fill(0.0);
                    for (i, &[q4, q2, _]) in self.coeffs.iter().enumerate() {
                        h[i * d + i] = 3.0 * q4 * x[i] * x[i] + q2;
                    }
                }
                Ok(v)
            }
        }
    }

    fn as_quadratic(&self) -> Option<&DMatrix<f64>> {
        match &self.form {
            PotentialForm::Quadratic(b) => Some(b),
            _ => None,
        }
    }
}

/// Factor `C = M Mᵀ` of a positive-semidefinite covariance restricted to its range.
#[derive(Debug, Clone)]
pub struct GaussianKernel {
    cov: DMatrix<f64>,
    /// `d × r`, columns `√cᵢ uᵢ` for the retained eigenpairs.
    factor: DMatrix<f64>,
}

impl GaussianKernel {
    pub fn new(cov: &DMatrix<f64>) -> Result<Self> {
        linalg::require_square(cov, "covariance")?;
        let asym = linalg::max_asymmetry(cov);
        if asym > 1e-10 * cov.amax().max(1.0) {
            return Err(Error::NotSymmetric {
                what: "covariance".into(),
                asymmetry: asym,
            });
        }
        let d = cov.nrows();
        let eig = SymEigen::new(cov);
        let top = eig.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if eig.values.len() > 0 && eig.min() < -1e-10 * top.max(1e-300) - 1e-14 {
            return Err(Error::NotPositiveDefinite {
                what: "covariance".into(),
                index: 0,
                eigenvalue: eig.min(),
            });
        }
        let cut = 1e-14 * top;
        let keep: Vec<usize> = (0..d).filter(|&i| eig.values[i] > cut && eig.values[i] > 0.0).collect();
        let mut factor = DMatrix::zeros(d, keep.len());
        for (k, &i) in keep.iter().enumerate() {
            factor.set_column(k, &(eig.vectors.column(i) * eig.values[i].sqrt()));
        }
        Ok(Self {
            cov: (cov + cov.transpose()) * 0.5,
            factor,
        })
    }

    pub fn dim(&self) -> usize {
        self.cov.nrows()
    }

    pub fn rank(&self) -> usize {
        self.factor.ncols()
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    /// Largest standard deviation along any direction.
    pub fn max_sd(&self) -> f64 {
        (0..self.rank()).map(|k| self.factor.column(k).norm()).fold(0.0, f64::max)
    }
}

/// How many derivatives of the integrated potential each node needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Derivs {
    Value,
    Gradient,
    Hessian,
}

/// Discrete approximation of the tilted measure at one base point `x`.
#[derive(Debug, Clone)]
pub struct TiltedMeasure {
    dim: usize,
    x: Vec<f64>,
    /// Shifts `ζ` (flat, `n × d`).
    shifts: Vec<f64>,
    probs: Vec<f64>,
    log_norm: f64,
    grads: Vec<f64>,
    hessians: Vec<f64>,
    exact: bool,
}

const NEWTON_MAX_ITER: usize = 100;
const CURVATURE_FLOOR: f64 = 1e-2;

impl TiltedMeasure {
    /// Builds the measure `ρ ∝ e^{−U(x+ζ)} γ_C(ζ)` at `x`.
    pub fn build(
        base: &dyn Potential,
        kernel: &GaussianKernel,
        x: &[f64],
        rule: &QuadratureRule,
        need: Derivs,
    ) -> Result<Self> {
        let d = base.dim();
        if kernel.dim() != d || x.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: if kernel.dim() != d { kernel.dim() } else { x.len() },
            });
        }
        let r = kernel.rank();
        if r == 0 {
            // degenerate kernel: ρ = δ₀
            let mut grads = vec![0.0; d];
            let mut hessians = vec![0.0; d * d];
            let v = base.eval(
                x,
                (need >= Derivs::Gradient).then_some(&mut grads[..]),
                (need >= Derivs::Hessian).then_some(&mut hessians[..]),
            )?;
            return Ok(Self {
                dim: d,
                x: x.to_vec(),
                shifts: vec![0.0; d],
                probs: vec![1.0],
                log_norm: -v,
                grads,
                hessians,
                exact: true,
            });
        }
        let m = kernel.factor();
        let tensor = rule.tensor(r)?;

        let (z_star, h_z) = find_mode(base, m, x)?;
        let l = node_map(base, m, x, &z_star, &h_z)?;
        let log_det_l: f64 = l.determinant().abs().ln();

        let n = tensor.len();
        let mut shifts = vec![0.0; n * d];
        let mut logw = vec![f64::NEG_INFINITY; n];
        let mut grads = if need >= Derivs::Gradient { vec![0.0; n * d] } else { Vec::new() };
        let mut hessians = if need >= Derivs::Hessian { vec![0.0; n * d * d] } else { Vec::new() };
        let mut z = vec![0.0; r];
        let mut p = vec![0.0; d];
        for k in 0..n {
            let u = tensor.node(k);
            for a in 0..r {
                let mut s = z_star[a];
                for b in 0..r {
                    s += l[(a, b)] * u[b];
                }
                z[a] = s;
            }
            for i in 0..d {
                let mut s = 0.0;
                for a in 0..r {
                    s += m[(i, a)] * z[a];
                }
                shifts[k * d + i] = s;
                p[i] = x[i] + s;
            }
            let g = (need >= Derivs::Gradient).then(|| &mut grads[k * d..(k + 1) * d]);
            let h = (need >= Derivs::Hessian).then(|| &mut hessians[k * d * d..(k + 1) * d * d]);
            let u_val = base.eval(&p, g, h)?;
            let z2: f64 = z.iter().map(|v| v * v).sum();
            logw[k] = tensor.log_scaled[k] - u_val - 0.5 * z2;
        }
        let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::QuadratureUnderflow { max_exponent: max });
        }
        let sum: f64 = logw.iter().map(|&lw| (lw - max).exp()).sum();
        let log_sum = max + sum.ln();
        let probs: Vec<f64> = logw.iter().map(|&lw| (lw - log_sum).exp()).collect();
        Ok(Self {
            dim: d,
            x: x.to_vec(),
            shifts,
            probs,
            log_norm: log_sum + log_det_l,
            grads,
            hessians,
            exact: false,
        })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn base_point(&self) -> &[f64] {
        &self.x
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    pub fn shift(&self, k: usize) -> &[f64] {
        &self.shifts[k * self.dim..(k + 1) * self.dim]
    }

    /// `log E_{γ_C} e^{−U(x+ζ)}`.
    pub fn log_normalizer(&self) -> f64 {
        self.log_norm
    }

    /// `−log E_{γ_C} e^{−U(x+ζ)}`, the renormalized value.
    pub fn value(&self) -> f64 {
        -self.log_norm
    }

    /// True when the kernel was degenerate and `ρ` is a point mass.
    pub fn is_point_mass(&self) -> bool {
        self.exact
    }

    /// `E_ρ f(x + ζ)`.
    pub fn expect(&self, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
        let d = self.dim;
        let mut p = vec![0.0; d];
        let mut acc = 0.0;
        for (k, &w) in self.probs.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for i in 0..d {
                p[i] = self.x[i] + self.shifts[k * d + i];
            }
            acc += w * f(&p);
        }
        acc
    }

    fn require(&self, need: Derivs) {
        let ok = match need {
            Derivs::Value => true,
            Derivs::Gradient => !self.grads.is_empty(),
            Derivs::Hessian => !self.hessians.is_empty(),
        };
        assert!(ok, "tilted measure was built without {need:?} data");
    }

    /// `E_ρ ∇U(x+ζ)`, the gradient of the renormalized potential.
    pub fn gradient(&self) -> DVector<f64> {
        self.require(Derivs::Gradient);
        let d = self.dim;
        let mut g = DVector::zeros(d);
        for (k, &w) in self.probs.iter().enumerate() {
            for i in 0..d {
                g[i] += w * self.grads[k * d + i];
            }
        }
        g
    }

    /// `E_ρ ∇²U − Cov_ρ(∇U)`, the Hessian of the renormalized potential.
    pub fn hessian(&self) -> DMatrix<f64> {
        self.require(Derivs::Hessian);
        let d = self.dim;
        let mean = self.gradient();
        let mut h = DMatrix::zeros(d, d);
        for (k, &w) in self.probs.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let gk = &self.grads[k * d..(k + 1) * d];
            let hk = &self.hessians[k * d * d..(k + 1) * d * d];
            for i in 0..d {
                for j in 0..d {
                    h[(i, j)] += w * (hk[i * d + j] - (gk[i] - mean[i]) * (gk[j] - mean[j]));
                }
            }
        }
        (&h + h.transpose()) * 0.5
    }

    /// `E_ρ ζ`.
    pub fn shift_mean(&self) -> DVector<f64> {
        let d = self.dim;
        let mut m = DVector::zeros(d);
        for (k, &w) in self.probs.iter().enumerate() {
            for i in 0..d {
                m[i] += w * self.shifts[k * d + i];
            }
        }
        m
    }

    /// `Cov_ρ(ζ)`.
    pub fn shift_covariance(&self) -> DMatrix<f64> {
        let d = self.dim;
        let mean = self.shift_mean();
        let mut c = DMatrix::zeros(d, d);
        for (k, &w) in self.probs.iter().enumerate() {
            let s = &self.shifts[k * d..(k + 1) * d];
            for i in 0..d {
                for j in 0..d {
                    c[(i, j)] += w * (s[i] - mean[i]) * (s[j] - mean[j]);
                }
            }
        }
        (&c + c.transpose()) * 0.5
    }

    /// `E_ρ F` and `∇ₓ E_ρ F = E_ρ ∇F − Cov_ρ(F, ∇U)` for a field with gradient.
    pub fn transport(&self, f: &dyn Fn(&[f64], Option<&mut [f64]>) -> f64) -> (f64, DVector<f64>) {
        self.require(Derivs::Gradient);
        let d = self.dim;
        let mean_u = self.gradient();
        let mut p = vec![0.0; d];
        let mut fg = vec![0.0; d];
        let mut vals = Vec::with_capacity(self.len());
        let mut mean_f = 0.0;
        let mut grad = DVector::zeros(d);
        for (k, &w) in self.probs.iter().enumerate() {
            for i in 0..d {
                p[i] = self.x[i] + self.shifts[k * d + i];
            }
            let v = f(&p, Some(&mut fg));
            vals.push(v);
            mean_f += w * v;
            for i in 0..d {
                grad[i] += w * fg[i];
            }
        }
        for (k, &w) in self.probs.iter().enumerate() {
            let dv = vals[k] - mean_f;
            for i in 0..d {
                grad[i] -= w * dv * (self.grads[k * d + i] - mean_u[i]);
            }
        }
        (mean_f, grad)
    }
}

/// Newton iteration for the minimiser of `f(z) = U(x + Mz) + ½|z|²`.
/// Returns the minimiser and the Hessian of `f` there.
fn find_mode(base: &dyn Potential, m: &DMatrix<f64>, x: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let d = x.len();
    let r = m.ncols();
    let mut grad_u = vec![0.0; d];
    let mut hess_u = vec![0.0; d * d];
    let mut p = vec![0.0; d];

    let point = |z: &[f64], p: &mut [f64]| {
        for i in 0..d {
            let mut s = x[i];
            for a in 0..r {
                s += m[(i, a)] * z[a];
            }
            p[i] = s;
        }
    };
    let objective = |z: &[f64], p: &mut [f64]| -> Result<f64> {
        point(z, p);
        let u = base.value(p)?;
        Ok(u + 0.5 * z.iter().map(|v| v * v).sum::<f64>())
    };

    let mut z = vec![0.0; r];
    let mut hz;
    for _ in 0..NEWTON_MAX_ITER {
        point(&z, &mut p);
        let u = base.eval(&p, Some(&mut grad_u), Some(&mut hess_u))?;
        let f0 = u + 0.5 * z.iter().map(|v| v * v).sum::<f64>();
        let hu = DMatrix::from_row_slice(d, d, &hess_u);
        let gu = DVector::from_column_slice(&grad_u);
        let g = m.transpose() * gu + DVector::from_column_slice(&z);
        hz = m.transpose() * hu * m + DMatrix::identity(r, r);
        hz = (&hz + hz.transpose()) * 0.5;
        let gnorm = g.amax();
        if !gnorm.is_finite() {
            return Err(Error::NotIntegrable(format!("non-finite gradient at x = {x:?}")));
        }
        if gnorm <= 1e-12 * (1.0 + z.iter().fold(0.0f64, |a, v| a.max(v.abs()))) {
            break;
        }
        // Newton direction with |eigenvalues| floored so it always descends
        let eig = SymEigen::new(&hz);
        let step = eig.map(|v| 1.0 / v.abs().max(1e-8)) * &g;
        let mut alpha = 1.0;
        let mut trial = vec![0.0; r];
        let mut accepted = false;
        for _ in 0..60 {
            for a in 0..r {
                trial[a] = z[a] - alpha * step[a];
            }
            let f1 = objective(&trial, &mut p)?;
            if f1.is_finite() && f1 <= f0 - 1e-4 * alpha * g.dot(&step) {
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
        let moved = (0..r).map(|a| (trial[a] - z[a]).abs()).fold(0.0, f64::max);
        z.copy_from_slice(&trial);
        if moved <= 1e-15 * (1.0 + z.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))) {
            break;
        }
    }
    point(&z, &mut p);
    base.eval(&p, None, Some(&mut hess_u))?;
    let hu = DMatrix::from_row_slice(d, d, &hess_u);
    hz = m.transpose() * hu * m + DMatrix::identity(r, r);
    Ok((z, (&hz + hz.transpose()) * 0.5))
}

/// Rise of `f` above its minimum that fixes the node scale along each axis.
const SECANT_RISE: f64 = 18.0;

/// Linear map `u ↦ L u` placing the quadrature nodes around the mode.
///
/// Along each principal axis of the Hessian at the mode, the scale is chosen so
/// that `f(z* ± a v) − f(z*) = u₀²/2` with `a = u₀ s` and `u₀ = 6`, averaged
/// over both sides. For a Gaussian this is exactly the Laplace scale; for
/// flat-topped or bimodal tilts it follows the true extent of the mass instead
/// of the local curvature at the mode.
fn node_map(
    base: &dyn Potential,
    m: &DMatrix<f64>,
    x: &[f64],
    z_star: &[f64],
    h_z: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let d = x.len();
    let r = z_star.len();
    let u0 = (2.0 * SECANT_RISE).sqrt();
    let eig = SymEigen::new(h_z);
    let mut p = vec![0.0; d];
    let mut z = vec![0.0; r];
    let mut f = |z: &[f64]| -> Result<f64> {
        for i in 0..d {
            let mut s = x[i];
            for a in 0..r {
                s += m[(i, a)] * z[a];
            }
            p[i] = s;
        }
        let v = base.value(&p)? + 0.5 * z.iter().map(|v| v * v).sum::<f64>();
        Ok(if v.is_nan() { f64::INFINITY } else { v })
    };
    let f0 = f(z_star)?;
    let mut l = DMatrix::zeros(r, r);
    for a in 0..r {
        let dir = eig.vectors.column(a);
        let laplace = u0 / eig.values[a].max(CURVATURE_FLOOR).sqrt();
        let mut reach = 0.0;
        for sign in [1.0, -1.0] {
            let mut rise = |t: f64| -> Result<f64> {
                for b in 0..r {
                    z[b] = z_star[b] + sign * t * dir[b];
                }
                Ok(f(&z)? - f0 - SECANT_RISE)
            };
            let (mut lo, mut hi) = (0.0, laplace);
            let mut grown = 0;
            while rise(hi)? < 0.0 {
                lo = hi;
                hi *= 2.0;
                grown += 1;
                if grown > 60 {
                    return Err(Error::NotIntegrable(format!("tilted density does not decay at x = {x:?}")));
                }
            }
            if lo == 0.0 {
                while hi > 1e-12 * laplace && rise(0.5 * hi)? >= 0.0 {
                    hi *= 0.5;
                }
                lo = 0.5 * hi;
            }
            for _ in 0..30 {
                let mid = 0.5 * (lo + hi);
                if rise(mid)? < 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if hi - lo <= 1e-4 * hi {
                    break;
                }
            }
            reach += 0.5 * (lo + hi);
        }
        let scale = reach / (2.0 * u0);
        for b in 0..r {
            l[(b, a)] = dir[b] * scale;
        }
    }
    Ok(l)
}

/// Closed form of the renormalized quadratic potential.
#[derive(Debug, Clone)]
struct QuadraticFlow {
    /// `(I + BC)⁻¹ B`.
    hess: DMatrix<f64>,
    half_log_det: f64,
}

impl QuadraticFlow {
    fn new(b: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<Self> {
        let d = b.nrows();
        let root = linalg::sqrt_psd(c);
        let s = DMatrix::identity(d, d) + &root * b * &root;
        let eig = SymEigen::new(&s);
        if eig.min() <= 0.0 {
            return Err(Error::NotIntegrable(format!(
                "I + C^1/2 B C^1/2 has eigenvalue {:.3e}",
                eig.min()
            )));
        }
        let half_log_det = 0.5 * eig.values.iter().map(|v| v.ln()).sum::<f64>();
        let m = DMatrix::identity(d, d) + b * c;
        let hess = m
            .lu()
            .solve(b)
            .ok_or_else(|| Error::NotIntegrable("I + BC is singular".into()))?;
        Ok(Self {
            hess: (&hess + hess.transpose()) * 0.5,
            half_log_det,
        })
    }
}

/// `V_t = −log(γ_C ∗ e^{−U})` for a base potential `U` (which may itself be renormalized).
pub struct Renormalized<'a> {
    base: &'a dyn Potential,
    kernel: GaussianKernel,
    rule: &'a QuadratureRule,
    closed: Option<QuadraticFlow>,
}

impl<'a> Renormalized<'a> {
    pub fn new(base: &'a dyn Potential, c: &DMatrix<f64>, rule: &'a QuadratureRule) -> Result<Self> {
        let kernel = GaussianKernel::new(c)?;
        if kernel.dim() != base.dim() {
            return Err(Error::DimensionMismatch {
                expected: base.dim(),
                found: kernel.dim(),
            });
        }
        let closed = match base.as_quadratic() {
            Some(b) => Some(QuadraticFlow::new(b, kernel.covariance())?),
            None => None,
        };
        Ok(Self {
            base,
            kernel,
            rule,
            closed,
        })
    }

    /// Same construction without the closed-form shortcut for quadratic `U`.
    pub fn by_quadrature(base: &'a dyn Potential, c: &DMatrix<f64>, rule: &'a QuadratureRule) -> Result<Self> {
        let mut r = Self::new(base, c, rule)?;
        r.closed = None;
        Ok(r)
    }

    pub fn kernel(&self) -> &GaussianKernel {
        &self.kernel
    }

    pub fn base(&self) -> &'a dyn Potential {
        self.base
    }

    pub fn rule(&self) -> &'a QuadratureRule {
        self.rule
    }

    /// Tilted measure at `x`.
    pub fn tilted(&self, x: &[f64], need: Derivs) -> Result<TiltedMeasure> {
        TiltedMeasure::build(self.base, &self.kernel, x, self.rule, need)
    }

    /// Value, gradient and Hessian at `x`.
    pub fn derivatives(&self, x: &[f64]) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        let d = self.dim();
        let mut g = vec![0.0; d];
        let mut h = vec![0.0; d * d];
        let v = self.eval(x, Some(&mut g), Some(&mut h))?;
        Ok((v, DVector::from_vec(g), DMatrix::from_row_slice(d, d, &h)))
    }
}

impl Potential for Renormalized<'_> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn eval(&self, x: &[f64], grad: Option<&mut [f64]>, hess: Option<&mut [f64]>) -> Result<f64> {
        let d = self.dim();
        if x.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: x.len(),
            });
        }
        if let Some(q) = &self.closed {
            let xv = DVector::from_column_slice(x);
            let hx = &q.hess * &xv;
            if let Some(g) = grad {
                g.copy_from_slice(hx.as_slice());
            }
            if let Some(h) = hess {
                for i in 0..d {
                    for j in 0..d {
                        h[i * d + j] = q.hess[(i, j)];
                    }
                }
            }
            return Ok(0.5 * xv.dot(&hx) + q.half_log_det);
        }
        let need = if hess.is_some() {
            Derivs::Hessian
        } else if grad.is_some() {
            Derivs::Gradient
        } else {
            Derivs::Value
        };
        let tm = self.tilted(x, need)?;
        if let Some(g) = grad {
            g.copy_from_slice(tm.gradient().as_slice());
        }
        if let Some(h) = hess {
            let hm = tm.hessian();
            for i in 0..d {
                for j in 0..d {
                    h[i * d + j] = hm[(i, j)];
                }
            }
        }
        Ok(tm.value())
    }

    fn as_quadratic(&self) -> Option<&DMatrix<f64>> {
        // the constant ½ log det term keeps it from being a pure quadratic form
        None
    }
}

/// `V_C(x) = −log E_{ζ∼γ_C} e^{−V₀(x+ζ)}`.
pub fn renormalized_value(
    v0: &dyn Potential,
    c: &DMatrix<f64>,
    x: &[f64],
    q: &QuadratureRule,
) -> Result<f64> {
    Renormalized::new(v0, c, q)?.value(x)
}

/// Gradient and Hessian of `V_C` at `x`.
pub fn renormalized_derivatives(
    v0: &dyn Potential,
    c: &DMatrix<f64>,
    x: &[f64],
    q: &QuadratureRule,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (_, g, h) = Renormalized::new(v0, c, q)?.derivatives(x)?;
    Ok((g, h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use linalg::scalar;

    /// Independent oracle: composite trapezoid on a wide interval of the 1D integral
    /// `∫ e^{−V₀(x+√c s) − s²/2} ds / √(2π)`, returning (log E, E[ζ], E[ζ²]).
    fn trapezoid_oracle(v0: impl Fn(f64) -> f64, c: f64, x: f64) -> (f64, f64, f64) {
        let sd = c.sqrt();
        let (lo, hi, n) = (-40.0, 40.0, 160_001);
        let h = (hi - lo) / (n - 1) as f64;
        let vals: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let s = lo + h * i as f64;
                (sd * s, -v0(x + sd * s) - 0.5 * s * s)
            })
            .collect();
        let max = vals.iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max);
        let (mut z0, mut z1, mut z2) = (0.0, 0.0, 0.0);
        for &(zeta, e) in &vals {
            let w = (e - max).exp();
            z0 += w;
            z1 += w * zeta;
            z2 += w * zeta * zeta;
        }
        let log_e = max + (z0 * h).ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        (log_e, z1 / z0, z2 / z0)
    }

    fn quartic(x: f64) -> f64 {
        0.25 * x.powi(4)
    }

    #[test]
    fn zero_potential_is_zero() {
        let q = QuadratureRule::default();
        let v0 = PotentialDescriptor::zero(2);
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.7]);
        let (v, g, h) = Renormalized::new(&v0, &c, &q).unwrap().derivatives(&[0.3, -1.0]).unwrap();
        assert!(v.abs() < 1e-13);
        assert!(g.amax() < 1e-13);
        assert!(h.amax() < 1e-12);
    }

    #[test]
    fn quadratic_closed_form_and_quadrature_agree() {
        let q = QuadratureRule::default();
        let v0 = PotentialDescriptor::quadratic(scalar(1.0)).unwrap();
        let expected = 0.25 + 0.5 * 2f64.ln();
        let fast = Renormalized::new(&v0, &scalar(1.0), &q).unwrap();
        let slow = Renormalized::by_quadrature(&v0, &scalar(1.0), &q).unwrap();
        for r in [&fast, &slow] {
            let (v, g, h) = r.derivatives(&[1.0]).unwrap();
            assert_relative_eq!(v, expected, epsilon = 1e-12);
            assert_relative_eq!(g[0], 0.5, epsilon = 1e-12);
            assert_relative_eq!(h[(0, 0)], 0.5, epsilon = 1e-11);
        }
    }

    #[test]
    fn zero_covariance_returns_base_exactly() {
        let q = QuadratureRule::default();
        let v0 = PotentialDescriptor::phi4(1.0, -0.5, vec![0.1, 0.0]).unwrap();
        let x = [0.7, -1.3];
        let r = Renormalized::new(&v0, &DMatrix::zeros(2, 2), &q).unwrap();
        assert_eq!(r.value(&x).unwrap(), v0.value(&x).unwrap());
    }

    #[test]
    fn single_site_phi4_matches_trapezoid() {
        let q = QuadratureRule::default();
        let v0 = PotentialDescriptor::phi4(1.0, 0.0, vec![0.0]).unwrap();
        for &(c, x) in &[(0.5, 0.0), (0.5, 0.7), (0.5, 3.0), (0.9, -2.0), (1e-3, 1.0), (4.0, 10.0)] {
            let (log_e, m1, m2) = trapezoid_oracle(quartic, c, x);
            let tm = Renormalized::new(&v0, &scalar(c), &q).unwrap().tilted(&[x], Derivs::Hessian).unwrap();
            assert!((tm.value() + log_e).abs() < 1e-10, "c={c} x={x}: {} vs {}", tm.value(), -log_e);
            let var = m2 - m1 * m1;
            assert!((tm.shift_covariance()[(0, 0)] - var).abs() < 1e-10 * var.max(1.0), "c={c} x={x}");
            // Hessian via E U'' − Var U' equals C⁻¹ − C⁻¹ Σ C⁻¹
            let via_sigma = 1.0 / c - var / (c * c);
            assert!((tm.hessian()[(0, 0)] - via_sigma).abs() < 1e-7 * (1.0 / c), "c={c} x={x}");
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let q = QuadratureRule::default();
        let v0 = PotentialDescriptor::new(
            PotentialForm::Polynomial {
                quartic: vec![1.0, 0.5],
                quadratic: vec![-1.0, 0.3],
                linear: vec![0.2, 0.0],
            },
            2,
        )
        .unwrap();
        let c = DMatrix::from_row_slice(2, 2, &[0.6, 0.2, 0.2, 0.4]);
        let r = Renormalized::new(&v0, &c, &q).unwrap();
        let x = [0.4, -0.9];
        let (_, g, h) = r.derivatives(&x).unwrap();
        let eps = 1e-4;
        for i in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += eps;
            xm[i] -= eps;
            let fd = (r.value(&xp).unwrap() - r.value(&xm).unwrap()) / (2.0 * eps);
            assert_relative_eq!(g[i], fd, max_relative = 1e-6);
            let (_, gp, _) = r.derivatives(&xp).unwrap();
            let (_, gm, _) = r.derivatives(&xm).unwrap();
            for j in 0..2 {
                let fdh = (gp[j] - gm[j]) / (2.0 * eps);
                assert!((h[(i, j)] - fdh).abs() < 1e-6 * h.amax(), "{i}{j}");
            }
        }
    }

    #[test]
    fn doubling_order_is_stable() {
        let q40 = QuadratureRule::new(40).unwrap();
        let q80 = QuadratureRule::new(80).unwrap();
        let v0 = PotentialDescriptor::phi4(1.0, -1.0, vec![0.0]).unwrap();
        for &c in &[0.05, 0.5, 0.75] {
            for &x in &[0.0, 0.5, 1.5, 4.0] {
                let a = renormalized_value(&v0, &scalar(c), &[x], &q40).unwrap();
                let b = renormalized_value(&v0, &scalar(c), &[x], &q80).unwrap();
                assert!((a - b).abs() < 1e-10, "c={c} x={x}");
            }
        }
    }

    #[test]
    fn transport_gradient_matches_difference() {
        let q = QuadratureRule::default();
        let v0 = PotentialDescriptor::phi4(1.0, -1.0, vec![0.0]).unwrap();
        let r = Renormalized::new(&v0, &scalar(0.4), &q).unwrap();
        let f = |p: &[f64], g: Option<&mut [f64]>| {
            if let Some(g) = g {
                g[0] = p[0].cos();
            }
            p[0].sin()
        };
        let x = 0.3;
        let (_, grad) = r.tilted(&[x], Derivs::Gradient).unwrap().transport(&f);
        let e = 1e-5;
        let fp = r.tilted(&[x + e], Derivs::Value).unwrap().expect(|p| p[0].sin());
        let fm = r.tilted(&[x - e], Derivs::Value).unwrap().expect(|p| p[0].sin());
        assert_relative_eq!(grad[0], (fp - fm) / (2.0 * e), max_relative = 1e-7);
    }

    #[test]
    fn rejects_bad_descriptors() {
        assert!(PotentialDescriptor::phi4(-1.0, 0.0, vec![0.0]).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(PotentialDescriptor::quadratic(asym).is_err());
        let v0 = PotentialDescriptor::quadratic(scalar(-2.0)).unwrap();
        let q = QuadratureRule::default();
        assert!(matches!(
            Renormalized::new(&v0, &scalar(1.0), &q),
            Err(Error::NotIntegrable(_))
        ));
    }
}
