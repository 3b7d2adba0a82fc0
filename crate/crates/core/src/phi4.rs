//! Lattice φ⁴ measures `∝ exp(−½⟨φ, Aφ⟩ − Σ(¼gφ⁴ + ½νφ²) + ⟨h, φ⟩)` under
//! the Pauli–Villars flow `C_t = (A + 1/t)⁻¹`.
//!
//! Moments come from the adaptive Gauss–Hermite rule for up to three sites
//! and from seeded single-site Metropolis chains otherwise.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::covariance::CovarianceSchedule;
use crate::curvature::{sampled_minimum, SampleSet};
use crate::error::{Error, Result};
use crate::linalg::{self, SymEigen};
use crate::potential::{Derivs, GaussianKernel, PotentialDescriptor, Renormalized, TiltedMeasure};
use crate::quadrature::QuadratureRule;

/// Largest lattice handled by tensor quadrature.
pub const MAX_QUADRATURE_SITES: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Phi4Model {
    a: DMatrix<f64>,
    g: f64,
    nu: f64,
    h: Vec<f64>,
}

impl Phi4Model {
    pub fn new(a: DMatrix<f64>, g: f64, nu: f64, h: Vec<f64>) -> Result<Self> {
        let eig = linalg::require_spd(&a, "A")?;
        if h.len() != a.nrows() {
            return Err(Error::DimensionMismatch {
                expected: a.nrows(),
                found: h.len(),
            });
        }
        if !(g >= 0.0 && g.is_finite() && nu.is_finite()) {
            return Err(Error::InvalidInput(format!("need finite g >= 0 and nu, got g = {g}, nu = {nu}")));
        }
        if g == 0.0 && eig.min() + nu <= 0.0 {
            return Err(Error::NotIntegrable(format!("g = 0 with A + nu not positive (nu = {nu})")));
        }
        Ok(Self { a, g, nu, h })
    }

    /// `A = 2I − (shift + shiftᵀ)` on an open chain of `n` sites.
    pub fn nearest_neighbor(n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                2.0
            } else if i.abs_diff(j) == 1 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn sites(&self) -> usize {
        self.a.nrows()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn g(&self) -> f64 {
        self.g
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn h(&self) -> &[f64] {
        &self.h
    }

    /// `V₀(φ) = Σ(¼gφ⁴ + ½νφ²) − ⟨h, φ⟩`.
    pub fn potential(&self) -> Result<PotentialDescriptor> {
        PotentialDescriptor::phi4(self.g, self.nu, self.h.clone())
    }

    /// `V₀` without the external field.
    pub fn zero_field_potential(&self) -> Result<PotentialDescriptor> {
        PotentialDescriptor::phi4(self.g, self.nu, vec![0.0; self.sites()])
    }

    /// Pauli–Villars schedule with `C_∞ = A⁻¹`.
    pub fn schedule(&self) -> Result<CovarianceSchedule> {
        CovarianceSchedule::pauli_villars(&self.a)
    }

    pub fn lambda_max_a(&self) -> f64 {
        linalg::max_eigenvalue(&self.a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MomentMethod {
    Quadrature,
    Mcmc,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentEstimate<T> {
    pub value: T,
    /// Zero for quadrature.
    pub stderr: f64,
    pub method: MomentMethod,
    pub seed: Option<u64>,
    pub n_samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McmcOptions {
    pub seed: u64,
    pub burn_in: usize,
    pub sweeps: usize,
    pub target_acceptance: f64,
    pub min_ess: f64,
}

impl McmcOptions {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            burn_in: 100_000,
            sweeps: 200_000,
            target_acceptance: 0.4,
            min_ess: 1000.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Estimator {
    /// Quadrature up to three sites, Metropolis with the given seed beyond.
    Auto(u64),
    Quadrature,
    Mcmc(McmcOptions),
}

impl Estimator {
    fn resolve(&self, sites: usize) -> Result<Option<McmcOptions>> {
        match *self {
            Estimator::Auto(seed) if sites > MAX_QUADRATURE_SITES => Ok(Some(McmcOptions::new(seed))),
            Estimator::Auto(_) => Ok(None),
            Estimator::Quadrature if sites > MAX_QUADRATURE_SITES => Err(Error::InvalidInput(format!(
                "quadrature handles at most {MAX_QUADRATURE_SITES} sites, got {sites}"
            ))),
            Estimator::Quadrature => Ok(None),
            Estimator::Mcmc(o) => Ok(Some(o)),
        }
    }
}

/// First and second moments of `∝ exp(−½⟨φ, Kφ⟩ − Σ(¼gφ⁴ + ½νφ²) + ⟨b, φ⟩)`.
struct Moments {
    mean: DVector<f64>,
    /// Raw `E[φφᵀ]`.
    second: DMatrix<f64>,
    stderr_chi: f64,
    stderr_cov: f64,
    seed: Option<u64>,
    n_samples: usize,
}

impl Moments {
    fn covariance(&self) -> DMatrix<f64> {
        let c = &self.second - &self.mean * self.mean.transpose();
        (&c + c.transpose()) * 0.5
    }
}

/// `(max row sum, row index)`.
fn max_row_sum(m: &DMatrix<f64>) -> (f64, usize) {
    (0..m.nrows())
        .map(|i| (m.row(i).sum(), i))
        .fold((f64::NEG_INFINITY, 0), |a, b| if b.0 > a.0 { b } else { a })
}

fn quadrature_moments(
    base: &PotentialDescriptor,
    c_t: &DMatrix<f64>,
    at: &[f64],
    q: &QuadratureRule,
) -> Result<Moments> {
    let kernel = GaussianKernel::new(c_t)?;
    let tm = TiltedMeasure::build(base, &kernel, at, q, Derivs::Value)?;
    let x = DVector::from_column_slice(at);
    let mean = tm.shift_mean() + &x;
    let second = tm.shift_covariance() + &mean * mean.transpose();
    Ok(Moments {
        mean,
        second,
        stderr_chi: 0.0,
        stderr_cov: 0.0,
        seed: None,
        n_samples: tm.len(),
    })
}

/// Integrated autocorrelation time with Sokal's window `M ≥ 5τ`.
pub fn integrated_autocorrelation(series: &[f64]) -> f64 {
    let n = series.len();
    if n < 4 {
        return 1.0;
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = series.iter().map(|v| v - mean).collect();
    let var = centered.iter().map(|v| v * v).sum::<f64>() / n as f64;
    if var == 0.0 {
        return 1.0;
    }
    let mut tau = 1.0;
    for lag in 1..n / 2 {
        let c: f64 = (0..n - lag).map(|i| centered[i] * centered[i + lag]).sum::<f64>() / (n as f64 * var);
        tau += 2.0 * c;
        if lag as f64 >= 5.0 * tau {
            break;
        }
    }
    tau.max(1.0)
}

fn mcmc_moments(model: &Phi4Model, k: &DMatrix<f64>, b: &[f64], opts: &McmcOptions) -> Result<Moments> {
    let n = model.sites();
    let (g, nu) = (model.g, model.nu);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut phi = vec![0.0; n];
    // local field Σ_{j≠i} K_ij φ_j is recomputed per update; n is small
    let log_ratio = |phi: &[f64], i: usize, new: f64| {
        let old = phi[i];
        let off: f64 = (0..n).filter(|&j| j != i).map(|j| k[(i, j)] * phi[j]).sum();
        let (n2, o2) = (new * new, old * old);
        -0.5 * k[(i, i)] * (n2 - o2) - off * (new - old) - 0.25 * g * (n2 * n2 - o2 * o2) - 0.5 * nu * (n2 - o2)
            + b[i] * (new - old)
    };
    let mut scale: Vec<f64> = (0..n).map(|i| 1.0 / (k[(i, i)] + nu.max(0.0)).sqrt()).collect();
    let mut accepted = vec![0usize; n];
    let batch = 100;
    for sweep in 0..opts.burn_in {
        for i in 0..n {
            let new = phi[i] + scale[i] * rng.sample::<f64, _>(StandardNormal);
            if rng.random::<f64>().ln() < log_ratio(&phi, i, new) {
                phi[i] = new;
                accepted[i] += 1;
            }
        }
        if (sweep + 1) % batch == 0 {
            for i in 0..n {
                let rate = accepted[i] as f64 / batch as f64;
                scale[i] *= (rate - opts.target_acceptance).exp();
                accepted[i] = 0;
            }
        }
    }
    let mut sum = DVector::zeros(n);
    let mut second = DMatrix::zeros(n, n);
    let mut trace = Vec::with_capacity(opts.sweeps);
    let mut rows = vec![Vec::with_capacity(opts.sweeps); n];
    for _ in 0..opts.sweeps {
        for i in 0..n {
            let new = phi[i] + scale[i] * rng.sample::<f64, _>(StandardNormal);
            if rng.random::<f64>().ln() < log_ratio(&phi, i, new) {
                phi[i] = new;
            }
        }
        let total: f64 = phi.iter().sum();
        for i in 0..n {
            sum[i] += phi[i];
            rows[i].push(phi[i] * total);
            for j in 0..n {
                second[(i, j)] += phi[i] * phi[j];
            }
        }
        trace.push(phi.iter().map(|v| v * v).sum::<f64>());
    }
    let m = opts.sweeps as f64;
    let mean = sum / m;
    let second = second / m;
    let (_, row) = max_row_sum(&second);
    let stderr_of = |s: &[f64]| {
        let tau = integrated_autocorrelation(s);
        let mu = s.iter().sum::<f64>() / m;
        let var = s.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / (m - 1.0);
        (m / tau, (var * tau / m).sqrt())
    };
    let (ess_chi, stderr_chi) = stderr_of(&rows[row]);
    let (ess_tr, stderr_cov) = stderr_of(&trace);
    let ess = ess_chi.min(ess_tr);
    if ess < opts.min_ess {
        return Err(Error::McmcNotConverged {
            ess,
            required: opts.min_ess,
        });
    }
    Ok(Moments {
        mean,
        second,
        stderr_chi,
        stderr_cov,
        seed: Some(opts.seed),
        n_samples: opts.sweeps,
    })
}

fn check_time(t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::InvalidInput(format!("need t > 0, got {t}")));
    }
    Ok(())
}

/// `χ_t`: the largest row sum of the second-moment matrix of the zero-field
/// measure with mass shifted by `1/t`.
pub fn susceptibility(model: &Phi4Model, t: f64, est: Estimator, q: &QuadratureRule) -> Result<MomentEstimate<f64>> {
    check_time(t)?;
    let n = model.sites();
    let m = match est.resolve(n)? {
        None => {
            let c_t = model.schedule()?.eval(t)?.c;
            quadrature_moments(&model.zero_field_potential()?, &c_t, &vec![0.0; n], q)?
        }
        Some(o) => {
            let k = model.a.clone() + DMatrix::identity(n, n) / t;
            mcmc_moments(model, &k, &vec![0.0; n], &o)?
        }
    };
    Ok(MomentEstimate {
        value: max_row_sum(&m.second).0,
        stderr: m.stderr_chi,
        method: if m.seed.is_some() { MomentMethod::Mcmc } else { MomentMethod::Quadrature },
        seed: m.seed,
        n_samples: m.n_samples,
    })
}

/// `Σ_t(φ)`: covariance of the measure with mass shifted by `1/t` and field `C_t⁻¹φ + h`.
pub fn tilted_covariance(
    model: &Phi4Model,
    t: f64,
    phi: &[f64],
    est: Estimator,
    q: &QuadratureRule,
) -> Result<MomentEstimate<DMatrix<f64>>> {
    check_time(t)?;
    let n = model.sites();
    if phi.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: phi.len(),
        });
    }
    let c_t = model.schedule()?.eval(t)?.c;
    let m = match est.resolve(n)? {
        None => quadrature_moments(&model.potential()?, &c_t, phi, q)?,
        Some(o) => {
            let k = model.a.clone() + DMatrix::identity(n, n) / t;
            let b: Vec<f64> = (&k * DVector::from_column_slice(phi))
                .iter()
                .zip(&model.h)
                .map(|(a, h)| a + h)
                .collect();
            mcmc_moments(model, &k, &b, &o)?
        }
    };
    Ok(MomentEstimate {
        value: m.covariance(),
        stderr: m.stderr_cov,
        method: if m.seed.is_some() { MomentMethod::Mcmc } else { MomentMethod::Quadrature },
        seed: m.seed,
        n_samples: m.n_samples,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phi4SchedulePoint {
    pub t: f64,
    pub chi: f64,
    pub chi_stderr: f64,
    /// Sampled infimum of `λ_min(Σ_t(φ))` (an upper bound on the true infimum).
    pub sigma_min: f64,
    /// `1/t − χ_t/t²`.
    pub lambda_prime: f64,
    /// `1/t − σ_min/t² + λ_max(A)(tλ_max(A) + 1)`.
    pub alpha_prime_bound: f64,
}

/// `λ_t'` from the susceptibility and the upper bound on `α_t'` at each time.
pub fn phi4_schedules(
    model: &Phi4Model,
    t_grid: &[f64],
    phi_samples: &SampleSet,
    est: Estimator,
    q: &QuadratureRule,
) -> Result<Vec<Phi4SchedulePoint>> {
    let amax = model.lambda_max_a();
    t_grid
        .iter()
        .map(|&t| {
            let chi = susceptibility(model, t, est, q)?;
            let sigma = sampled_minimum(phi_samples, &|phi| {
                Ok(SymEigen::new(&tilted_covariance(model, t, phi, est, q)?.value).min())
            })?;
            Ok(Phi4SchedulePoint {
                t,
                chi: chi.value,
                chi_stderr: chi.stderr,
                sigma_min: sigma.value,
                lambda_prime: 1.0 / t - chi.value / (t * t),
                alpha_prime_bound: 1.0 / t - sigma.value / (t * t) + amax * (t * amax + 1.0),
            })
        })
        .collect()
}

/// `∂²f` at `x` by central differences with one Richardson step.
fn difference_hessian(f: &(dyn Fn(&[f64]) -> Result<f64> + Sync), x: &[f64], h: f64) -> Result<DMatrix<f64>> {
    let n = x.len();
    let f0 = f(x)?;
    let at = |steps: &[(usize, f64)]| {
        let mut y = x.to_vec();
        for &(i, s) in steps {
            y[i] += s;
        }
        f(&y)
    };
    let second = |i: usize, j: usize, h: f64| -> Result<f64> {
        if i == j {
            Ok((at(&[(i, h)])? - 2.0 * f0 + at(&[(i, -h)])?) / (h * h))
        } else {
            Ok((at(&[(i, h), (j, h)])? - at(&[(i, h), (j, -h)])? - at(&[(i, -h), (j, h)])? + at(&[(i, -h), (j, -h)])?)
                / (4.0 * h * h))
        }
    };
    let mut out = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = (4.0 * second(i, j, h)? - second(i, j, 2.0 * h)?) / 3.0;
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    Ok(out)
}

/// Step of the difference Hessian used against the covariance identity.
const IDENTITY_STEP: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct HessianIdentityReport {
    pub t: f64,
    /// Per sample, `max|∂²V_t − (C_t⁻¹ − C_t⁻¹Σ_tC_t⁻¹)| / max(1, max|C_t⁻¹ − C_t⁻¹Σ_tC_t⁻¹|)`.
    pub errors: Vec<f64>,
    pub max_error: f64,
}

/// Compares difference Hessians of `V_t` with `C_t⁻¹ − C_t⁻¹Σ_t(φ)C_t⁻¹`.
pub fn hessian_identity_check(
    model: &Phi4Model,
    t: f64,
    phi_samples: &[Vec<f64>],
    q: &QuadratureRule,
) -> Result<HessianIdentityReport> {
    check_time(t)?;
    let n = model.sites();
    if n > MAX_QUADRATURE_SITES {
        return Err(Error::InvalidInput(format!(
            "the Hessian identity check needs at most {MAX_QUADRATURE_SITES} sites"
        )));
    }
    let v0 = model.potential()?;
    let c_t = model.schedule()?.eval(t)?.c;
    let c_inv = linalg::inverse_spd(&c_t, "C_t")?;
    let vt = Renormalized::new(&v0, &c_t, q)?;
    let errors = phi_samples
        .par_iter()
        .map(|phi| {
            let sigma = tilted_covariance(model, t, phi, Estimator::Quadrature, q)?.value;
            let rhs = &c_inv - &c_inv * sigma * &c_inv;
            let fd = difference_hessian(&|x| crate::potential::Potential::value(&vt, x), phi, IDENTITY_STEP)?;
            Ok((fd - &rhs).amax() / rhs.amax().max(1.0))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(HessianIdentityReport {
        t,
        max_error: errors.iter().copied().fold(0.0, f64::max),
        errors,
    })
}

/// `n` seeded field configurations with independent normal entries of scale `sd`.
pub fn seeded_fields(sites: usize, count: usize, sd: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| (0..sites).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curvature::{alpha_prime, multiscale_margin};
    use crate::linalg::scalar;

    /// Second moment of `∝ exp(−¼gx⁴ − ½mx² + bx)` by a 400-point trapezoid on [−12, 12].
    fn trapezoid_moments(g: f64, m: f64, b: f64) -> (f64, f64) {
        let n = 400;
        let h = 24.0 / n as f64;
        let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
        for i in 0..=n {
            let x = -12.0 + i as f64 * h;
            let w = (-0.25 * g * x.powi(4) - 0.5 * m * x * x + b * x).exp() * if i == 0 || i == n { 0.5 } else { 1.0 };
            z += w;
            m1 += w * x;
            m2 += w * x * x;
        }
        let mean = m1 / z;
        (m2 / z, m2 / z - mean * mean)
    }

    #[test]
    fn gaussian_susceptibility() {
        let q = QuadratureRule::default();
        let m = Phi4Model::new(scalar(1.0), 0.0, 0.0, vec![0.0]).unwrap();
        let chi = susceptibility(&m, 1.0, Estimator::Quadrature, &q).unwrap();
        assert!((chi.value - 0.5).abs() < 1e-12);
        assert_eq!(chi.stderr, 0.0);
        let a = DMatrix::from_row_slice(2, 2, &[2.0, -1.0, -1.0, 2.0]);
        let m = Phi4Model::new(a, 0.0, 0.0, vec![0.0; 2]).unwrap();
        let chi = susceptibility(&m, 1.0, Estimator::Quadrature, &q).unwrap();
        assert!((chi.value - 0.5).abs() < 1e-12);
        let s = tilted_covariance(&m, 1.0, &[0.7, -0.3], Estimator::Quadrature, &q).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 3.0]) / 8.0;
        assert!((s.value - expect).amax() < 1e-12);
    }

    #[test]
    fn quartic_site_matches_trapezoid_and_mcmc() {
        let q = QuadratureRule::default();
        let m = Phi4Model::new(scalar(1.0), 1.0, 0.0, vec![0.0]).unwrap();
        let (oracle, _) = trapezoid_moments(1.0, 2.0, 0.0);
        let chi = susceptibility(&m, 1.0, Estimator::Quadrature, &q).unwrap();
        assert!((chi.value - oracle).abs() < 1e-10, "{} vs {oracle}", chi.value);
        let mc = susceptibility(&m, 1.0, Estimator::Mcmc(McmcOptions::new(11)), &q).unwrap();
        assert!(mc.stderr > 0.0);
        assert!((mc.value - oracle).abs() < 3.0 * mc.stderr, "{mc:?} vs {oracle}");
        // field C_t⁻¹φ = 2φ at t = 1
        let phi = 0.4;
        let (_, var) = trapezoid_moments(1.0, 2.0, 2.0 * phi);
        let s = tilted_covariance(&m, 1.0, &[phi], Estimator::Quadrature, &q).unwrap();
        assert!((s.value[(0, 0)] - var).abs() < 1e-10);
    }

    #[test]
    fn two_site_tilted_covariance_matches_tensor_trapezoid() {
        let q = QuadratureRule::default();
        let a = Phi4Model::nearest_neighbor(2);
        let m = Phi4Model::new(a.clone(), 1.0, 0.0, vec![0.0; 2]).unwrap();
        let phi = [0.3, -0.2];
        let k = &a + DMatrix::identity(2, 2);
        let b = &k * DVector::from_column_slice(&phi);
        let n = 600;
        let h = 16.0 / n as f64;
        let mut z = 0.0;
        let mut m1 = [0.0; 2];
        let mut m2 = [[0.0; 2]; 2];
        for i in 0..=n {
            for j in 0..=n {
                let x = [-8.0 + i as f64 * h, -8.0 + j as f64 * h];
                let quad = 0.5 * (k[(0, 0)] * x[0] * x[0] + 2.0 * k[(0, 1)] * x[0] * x[1] + k[(1, 1)] * x[1] * x[1]);
                let w = (-quad - 0.25 * (x[0].powi(4) + x[1].powi(4)) + b[0] * x[0] + b[1] * x[1]).exp();
                z += w;
                for p in 0..2 {
                    m1[p] += w * x[p];
                    for r in 0..2 {
                        m2[p][r] += w * x[p] * x[r];
                    }
                }
            }
        }
        let s = tilted_covariance(&m, 1.0, &phi, Estimator::Quadrature, &q).unwrap().value;
        for p in 0..2 {
            for r in 0..2 {
                let cov = m2[p][r] / z - m1[p] * m1[r] / (z * z);
                assert!((s[(p, r)] - cov).abs() < 1e-6, "{p}{r}: {} vs {cov}", s[(p, r)]);
            }
        }
    }

    #[test]
    fn gaussian_schedules_match_closed_forms() {
        let q = QuadratureRule::default();
        let m = Phi4Model::new(scalar(1.0), 0.0, 0.0, vec![0.0]).unwrap();
        let samples = SampleSet::from_points(vec![vec![0.0], vec![1.0]]).unwrap();
        let p = &phi4_schedules(&m, &[1.0], &samples, Estimator::Quadrature, &q).unwrap()[0];
        assert!((p.lambda_prime - 0.5).abs() < 1e-10);
        assert!((p.alpha_prime_bound - 2.5).abs() < 1e-10);
        let exact = alpha_prime(&m.schedule().unwrap(), &m.potential().unwrap(), 1.0, &samples, &q).unwrap();
        assert!((exact.value - 0.5).abs() < 1e-10);
        let r = hessian_identity_check(&m, 1.0, &[vec![0.0], vec![0.5]], &q).unwrap();
        assert!(r.max_error < 1e-8, "{r:?}");
    }

    #[test]
    fn quartic_identity_and_criterion() {
        let q = QuadratureRule::default();
        for n in [1, 2] {
            let m = Phi4Model::new(Phi4Model::nearest_neighbor(n), 1.0, 0.0, vec![0.0; n]).unwrap();
            let fields = seeded_fields(n, 4, 1.0, 5);
            let samples = SampleSet::standard(n, 3.0, 5).unwrap();
            for t in [0.5, 2.0] {
                let r = hessian_identity_check(&m, t, &fields, &q).unwrap();
                assert!(r.max_error < 1e-5, "n={n} t={t}: {r:?}");
                let lp = 1.0 / t - susceptibility(&m, t, Estimator::Quadrature, &q).unwrap().value / (t * t);
                let margin = multiscale_margin(&m.schedule().unwrap(), &m.potential().unwrap(), t, &samples, &q).unwrap();
                assert!(margin.value >= lp - 1e-6, "n={n} t={t}: {} < {lp}", margin.value);
            }
        }
    }

    #[test]
    fn alpha_bound_dominates_exact_value() {
        let q = QuadratureRule::default();
        let m = Phi4Model::new(scalar(1.0), 1.0, -1.0, vec![0.0]).unwrap();
        let samples = SampleSet::standard(1, 4.0, 2).unwrap();
        let pts = phi4_schedules(&m, &[0.1, 1.0, 3.0], &samples, Estimator::Quadrature, &q).unwrap();
        for p in &pts {
            let exact = alpha_prime(&m.schedule().unwrap(), &m.potential().unwrap(), p.t, &samples, &q).unwrap();
            assert!(p.alpha_prime_bound >= exact.value - 1e-8, "{p:?} vs {exact:?}");
        }
        assert!(pts.windows(2).all(|w| w[1].chi >= w[0].chi));
    }

    #[test]
    fn rejects_bad_models() {
        assert!(Phi4Model::new(scalar(-1.0), 1.0, 0.0, vec![0.0]).is_err());
        assert!(Phi4Model::new(scalar(1.0), -1.0, 0.0, vec![0.0]).is_err());
        assert!(Phi4Model::new(scalar(1.0), 0.0, -2.0, vec![0.0]).is_err());
        let m = Phi4Model::new(scalar(1.0), 1.0, 0.0, vec![0.0]).unwrap();
        let q = QuadratureRule::default();
        assert!(susceptibility(&m, 0.0, Estimator::Quadrature, &q).is_err());
    }
}
