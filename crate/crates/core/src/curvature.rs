//! Multiscale curvature `λ_t'`, the corrective rate `α_t'`, their integrals,
//! and the inequalities built from them.
//!
//! `λ_t'` is the largest value with `C'∇²V_t C' ⪰ ½C'' + λ_t'C'` at every
//! sample point, and `α_t'` the largest eigenvalue of
//! `C'^{1/2}(∇²V_t + (C_∞ − C_t)⁻¹)C'^{1/2}` over the samples. Both extrema
//! are polished by a short compass search from the best sample.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::covariance::{CovarianceAt, CovarianceSchedule};
use crate::error::{Error, Result};
use crate::flow::{Semigroup, TailInput};
use crate::grid::{Field, Grid};
use crate::linalg::{sqrt_psd, SymEigen};
use crate::potential::{Potential, Renormalized};
use crate::quadrature::QuadratureRule;

/// Slack allowed in margins for eigensolver, quadrature and integration error.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
const GRID_POINTS_PER_AXIS: usize = 17;
const RANDOM_POINTS: usize = 100;
const REFINE_STEPS: usize = 20;
/// Relative eigenvalue floor defining the range of `C_t'`.
const RANGE_TOLERANCE: f64 = 1e-12;

/// Points at which the "for all x" conditions are checked.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    points: Vec<Vec<f64>>,
    half_width: f64,
    refine_steps: usize,
    description: String,
}

impl SampleSet {
    /// A `17^d` grid on `[−w, w]^d` plus 100 uniform points drawn from `seed`.
    pub fn standard(dim: usize, half_width: f64, seed: u64) -> Result<Self> {
        if dim == 0 || !(half_width > 0.0) {
            return Err(Error::InvalidInput("sample box needs a positive dimension and width".into()));
        }
        let n = GRID_POINTS_PER_AXIS;
        let mut points = Vec::with_capacity(n.pow(dim as u32) + RANDOM_POINTS);
        let mut idx = vec![0usize; dim];
        for _ in 0..n.pow(dim as u32) {
            points.push(idx.iter().map(|&i| -half_width + 2.0 * half_width * i as f64 / (n - 1) as f64).collect());
            for a in (0..dim).rev() {
                idx[a] += 1;
                if idx[a] < n {
                    break;
                }
                idx[a] = 0;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..RANDOM_POINTS {
            points.push((0..dim).map(|_| rng.random_range(-half_width..=half_width)).collect());
        }
        Ok(Self {
            points,
            half_width,
            refine_steps: REFINE_STEPS,
            description: format!(
                "{n}^{dim} grid on [-{half_width}, {half_width}]^{dim} + {RANDOM_POINTS} uniform (seed {seed}) + {REFINE_STEPS} compass steps"
            ),
        })
    }

    /// Exactly these points, without refinement.
    pub fn from_points(points: Vec<Vec<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptySamples);
        }
        let half_width = points.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
        let description = format!("{} explicit points", points.len());
        Ok(Self {
            points,
            half_width,
            refine_steps: 0,
            description,
        })
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn description(&self) -> &str {
        &self.description
    }
}

/// An extremum over a sample set and where it was found.
#[derive(Debug, Clone, PartialEq)]
pub struct Extremum {
    pub value: f64,
    pub at: Vec<f64>,
    pub evaluations: usize,
}

/// Orthonormal basis of the range of `C'` and `C'^{-1/2}` on it.
fn range_factor(c_prime: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymEigen::new(c_prime);
    let max = eig.max().max(0.0);
    let cols: Vec<_> = (0..eig.values.len())
        .filter(|&i| eig.values[i] > RANGE_TOLERANCE * max)
        .map(|i| eig.vectors.column(i) / eig.values[i].sqrt())
        .collect();
    DMatrix::from_columns(&cols)
}

/// Largest `λ` with `C'HC' − ½C'' − λC' ⪰ 0` on the range of `C'`.
pub fn pointwise_curvature(at: &CovarianceAt, hess: &DMatrix<f64>) -> f64 {
    let p = range_factor(&at.c_prime);
    if p.ncols() == 0 {
        return f64::INFINITY;
    }
    let m = &at.c_prime * hess * &at.c_prime - &at.c_second * 0.5;
    let reduced = p.transpose() * m * &p;
    SymEigen::new(&((&reduced + reduced.transpose()) * 0.5)).min()
}

/// Largest eigenvalue of `C'^{1/2}(H + (C_∞ − C_t)⁻¹)C'^{1/2}`.
pub fn pointwise_alpha(at: &CovarianceAt, gap_inv: &DMatrix<f64>, hess: &DMatrix<f64>) -> f64 {
    let root = sqrt_psd(&at.c_prime);
    let m = &root * (hess + gap_inv) * &root;
    SymEigen::new(&((&m + m.transpose()) * 0.5)).max()
}

/// Minimizes `f` over the samples and polishes the minimizer by compass search.
pub(crate) fn sampled_minimum(samples: &SampleSet, f: &(dyn Fn(&[f64]) -> Result<f64> + Sync)) -> Result<Extremum> {
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    let values = samples
        .points
        .par_iter()
        .map(|x| f(x))
        .collect::<Result<Vec<f64>>>()?;
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[best] {
            best = i;
        }
    }
    let mut x = samples.points[best].clone();
    let mut value = values[best];
    let mut evaluations = values.len();
    let limit = 2.0 * samples.half_width;
    let mut step = samples.half_width / 8.0;
    for _ in 0..samples.refine_steps {
        let trials: Vec<Vec<f64>> = (0..x.len())
            .flat_map(|a| {
                [-1.0, 1.0].into_iter().map({
                    let x = x.clone();
                    move |sign| {
                        let mut y = x.clone();
                        y[a] = (y[a] + sign * step).clamp(-limit, limit);
                        y
                    }
                })
            })
            .collect();
        let tv = trials.par_iter().map(|y| f(y)).collect::<Result<Vec<f64>>>()?;
        evaluations += tv.len();
        match tv.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)) {
            Some((i, &v)) if v < value => {
                value = v;
                x = trials[i].clone();
                step = (2.0 * step).min(samples.half_width);
            }
            _ => step *= 0.5,
        }
    }
    Ok(Extremum {
        value,
        at: x,
        evaluations,
    })
}

fn check_dims(schedule: &CovarianceSchedule, v0: &dyn Potential, samples: &SampleSet) -> Result<()> {
    let d = schedule.dim();
    if v0.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: v0.dim(),
        });
    }
    if let Some(p) = samples.points.iter().find(|p| p.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: p.len(),
        });
    }
    Ok(())
}

/// Maximal admissible `λ_t'` over the sample set.
pub fn multiscale_margin(
    schedule: &CovarianceSchedule,
    v0: &dyn Potential,
    t: f64,
    samples: &SampleSet,
    q: &QuadratureRule,
) -> Result<Extremum> {
    check_dims(schedule, v0, samples)?;
    let at = schedule.eval(t)?;
    let vt = Renormalized::new(v0, &at.c, q)?;
    sampled_minimum(samples, &|x| Ok(pointwise_curvature(&at, &vt.derivatives(x)?.2)))
}

/// `α_t'` as the supremum over the sample set.
pub fn alpha_prime(
    schedule: &CovarianceSchedule,
    v0: &dyn Potential,
    t: f64,
    samples: &SampleSet,
    q: &QuadratureRule,
) -> Result<Extremum> {
    check_dims(schedule, v0, samples)?;
    let at = schedule.eval(t)?;
    let gap_inv = schedule.gap_inverse(&at)?;
    let vt = Renormalized::new(v0, &at.c, q)?;
    let e = sampled_minimum(samples, &|x| Ok(-pointwise_alpha(&at, &gap_inv, &vt.derivatives(x)?.2)))?;
    Ok(Extremum { value: -e.value, ..e })
}

/// Sampled `t ↦ (λ_t', α_t')` with cumulative integrals.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvatureSchedule {
    pub t_grid: Vec<f64>,
    pub lambda_prime: Vec<f64>,
    pub alpha_prime: Vec<f64>,
    /// `λ_t = ∫₀ᵗ λ'`.
    pub lambda_integral: Vec<f64>,
    /// `α_t = ∫₀ᵗ α'`.
    pub alpha_integral: Vec<f64>,
    pub samples_used: Vec<usize>,
    pub sample_spec: String,
}

fn cumulative(t: &[f64], f: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(t.len());
    // constant extension of the first value down to 0
    let mut acc = t[0] * f[0];
    out.push(acc);
    for i in 1..t.len() {
        acc += 0.5 * (t[i] - t[i - 1]) * (f[i] + f[i - 1]);
        out.push(acc);
    }
    out
}

/// Cumulative trapezoid integrals. A grid starting at `t₀ > 0` is extended
/// to 0 by the first value.
pub fn integrate_schedules(
    t_grid: Vec<f64>,
    lambda_prime: Vec<f64>,
    alpha_prime: Vec<f64>,
    samples_used: Vec<usize>,
    sample_spec: String,
) -> Result<CurvatureSchedule> {
    if t_grid.is_empty() {
        return Err(Error::InvalidInput("empty time grid".into()));
    }
    if lambda_prime.len() != t_grid.len() || alpha_prime.len() != t_grid.len() {
        return Err(Error::DimensionMismatch {
            expected: t_grid.len(),
            found: lambda_prime.len().min(alpha_prime.len()),
        });
    }
    if t_grid[0] < 0.0 {
        return Err(Error::NegativeTime(t_grid[0]));
    }
    if let Some(i) = (1..t_grid.len()).find(|&i| t_grid[i] <= t_grid[i - 1]) {
        return Err(Error::NonMonotoneGrid(i));
    }
    let lambda_integral = cumulative(&t_grid, &lambda_prime);
    let alpha_integral = cumulative(&t_grid, &alpha_prime);
    Ok(CurvatureSchedule {
        t_grid,
        lambda_prime,
        alpha_prime,
        lambda_integral,
        alpha_integral,
        samples_used,
        sample_spec,
    })
}

/// `λ'` and `α'` at every time of `t_grid`, integrated.
pub fn curvature_schedule(
    schedule: &CovarianceSchedule,
    v0: &dyn Potential,
    t_grid: &[f64],
    samples: &SampleSet,
    q: &QuadratureRule,
) -> Result<CurvatureSchedule> {
    let mut lp = Vec::with_capacity(t_grid.len());
    let mut ap = Vec::with_capacity(t_grid.len());
    let mut used = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let l = multiscale_margin(schedule, v0, t, samples, q)?;
        let a = alpha_prime(schedule, v0, t, samples, q)?;
        lp.push(l.value);
        ap.push(a.value);
        used.push(l.evaluations.max(a.evaluations));
    }
    integrate_schedules(t_grid.to_vec(), lp, ap, used, samples.description().to_string())
}

impl CurvatureSchedule {
    fn locate(&self, t: f64) -> Result<(usize, f64)> {
        let g = &self.t_grid;
        let last = g[g.len() - 1];
        if t < 0.0 || t > last * (1.0 + 1e-12) {
            return Err(Error::OutsideTableRange { t, lo: 0.0, hi: last });
        }
        if t <= g[0] || g.len() == 1 {
            return Ok((0, 0.0));
        }
        let i = g.partition_point(|&s| s <= t).clamp(1, g.len() - 1) - 1;
        Ok((i, ((t - g[i]) / (g[i + 1] - g[i])).clamp(0.0, 1.0)))
    }

    fn integral_at(&self, prime: &[f64], integral: &[f64], t: f64) -> Result<f64> {
        let (i, f) = self.locate(t)?;
        if t <= self.t_grid[0] {
            return Ok(t * prime[0]);
        }
        if i + 1 >= self.t_grid.len() {
            return Ok(integral[i]);
        }
        let h = self.t_grid[i + 1] - self.t_grid[i];
        let slope = (prime[i + 1] - prime[i]) / h;
        let dt = f * h;
        Ok(integral[i] + prime[i] * dt + 0.5 * slope * dt * dt)
    }

    fn prime_at(&self, prime: &[f64], t: f64) -> Result<f64> {
        let (i, f) = self.locate(t)?;
        if i + 1 >= prime.len() {
            return Ok(prime[i]);
        }
        Ok((1.0 - f) * prime[i] + f * prime[i + 1])
    }

    /// `λ_t`, integrating the piecewise-linear `λ'` (exact at grid times).
    pub fn lambda_at(&self, t: f64) -> Result<f64> {
        self.integral_at(&self.lambda_prime, &self.lambda_integral, t)
    }

    pub fn alpha_at(&self, t: f64) -> Result<f64> {
        self.integral_at(&self.alpha_prime, &self.alpha_integral, t)
    }

    pub fn lambda_prime_at(&self, t: f64) -> Result<f64> {
        self.prime_at(&self.lambda_prime, t)
    }

    pub fn alpha_prime_at(&self, t: f64) -> Result<f64> {
        self.prime_at(&self.alpha_prime, t)
    }

    pub fn end_time(&self) -> f64 {
        self.t_grid[self.t_grid.len() - 1]
    }

    /// `max |λ_T(h) − λ_T(2h)|, |α_T(h) − α_T(2h)|` from the even-indexed subgrid
    /// (`None` when the grid length is even).
    pub fn refinement_change(&self) -> Option<f64> {
        let n = self.t_grid.len();
        if n < 3 || n % 2 == 0 {
            return None;
        }
        let pick = |v: &[f64]| v.iter().step_by(2).copied().collect::<Vec<f64>>();
        let t = pick(&self.t_grid);
        let l = cumulative(&t, &pick(&self.lambda_prime));
        let a = cumulative(&t, &pick(&self.alpha_prime));
        Some(
            (l[l.len() - 1] - self.lambda_integral[n - 1])
                .abs()
                .max((a[a.len() - 1] - self.alpha_integral[n - 1]).abs()),
        )
    }

    /// Smallest `min-eig(C'∇²V_tC' − ½C'' − λ_t'C')` over the samples at grid time `i`.
    pub fn admissibility(
        &self,
        schedule: &CovarianceSchedule,
        v0: &dyn Potential,
        i: usize,
        samples: &SampleSet,
        q: &QuadratureRule,
    ) -> Result<f64> {
        let at = schedule.eval(self.t_grid[i])?;
        let vt = Renormalized::new(v0, &at.c, q)?;
        let lp = self.lambda_prime[i];
        let vals = samples
            .points
            .par_iter()
            .map(|x| {
                let h = vt.derivatives(x)?.2;
                let m = &at.c_prime * h * &at.c_prime - &at.c_second * 0.5 - &at.c_prime * lp;
                Ok(SymEigen::new(&((&m + m.transpose()) * 0.5)).min())
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(vals.into_iter().fold(f64::INFINITY, f64::min))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairMargin {
    pub s: f64,
    pub t: f64,
    /// Eigenvalue index (1 for the Poincaré constant).
    pub k: usize,
    pub margin: f64,
}

fn trace_index(times: &[f64], t: f64) -> Result<usize> {
    times
        .iter()
        .position(|&s| (s - t).abs() <= 1e-12 * t.abs().max(1.0))
        .ok_or(Error::MissingTracePoint(t))
}

/// All pairs `s < t` from a list of times.
pub fn ordered_pairs(times: &[f64]) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for (i, &s) in times.iter().enumerate() {
        for &t in &times[i + 1..] {
            if s < t {
                out.push((s, t));
            }
        }
    }
    out
}

fn exponent(curv: &CurvatureSchedule, s: f64, t: f64) -> Result<f64> {
    Ok((curv.alpha_at(t)? - curv.alpha_at(s)?) - 2.0 * (curv.lambda_at(t)? - curv.lambda_at(s)?))
}

/// `(α_t−α_s) − 2(λ_t−λ_s) + log C_P(ν_t) − log C_P(ν_s)` per pair.
pub fn theorem_margin(trace: &[(f64, f64)], curv: &CurvatureSchedule, pairs: &[(f64, f64)]) -> Result<Vec<PairMargin>> {
    let times: Vec<f64> = trace.iter().map(|p| p.0).collect();
    pairs
        .iter()
        .map(|&(s, t)| {
            if s > t {
                return Err(Error::TimesOutOfOrder { s, t });
            }
            let cs = trace[trace_index(&times, s)?].1;
            let ct = trace[trace_index(&times, t)?].1;
            Ok(PairMargin {
                s,
                t,
                k: 1,
                margin: exponent(curv, s, t)? + ct.ln() - cs.ln(),
            })
        })
        .collect()
}

/// `(α_t−α_s) − 2(λ_t−λ_s) + log μ_k(ν_s) − log μ_k(ν_t)` for `k = 1..=k_max`;
/// `trace` holds `(t, [μ₀, μ₁, …])`.
pub fn higher_eigenvalue_margin(
    trace: &[(f64, Vec<f64>)],
    curv: &CurvatureSchedule,
    pairs: &[(f64, f64)],
    k_max: usize,
) -> Result<Vec<PairMargin>> {
    let times: Vec<f64> = trace.iter().map(|p| p.0).collect();
    let mut out = Vec::new();
    for &(s, t) in pairs {
        if s > t {
            return Err(Error::TimesOutOfOrder { s, t });
        }
        let ms = &trace[trace_index(&times, s)?].1;
        let mt = &trace[trace_index(&times, t)?].1;
        let e = exponent(curv, s, t)?;
        for k in 1..=k_max {
            let (Some(a), Some(b)) = (ms.get(k), mt.get(k)) else {
                return Err(Error::InvalidInput(format!("trace lacks eigenvalue {k}")));
            };
            out.push(PairMargin {
                s,
                t,
                k,
                margin: e + a.ln() - b.ln(),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoincareBound {
    pub s: f64,
    /// `|C_s'| ∫_s^T e^{−2(λ_t−λ_s)} dt`.
    pub integral: f64,
    /// `|C_s'|` times the bound on `∫_T^∞`.
    pub tail: f64,
    pub bound: f64,
    /// The same with `e^{−2λ_t}` not rebased at `s`.
    pub unrebased: f64,
}

/// Upper bound on the Euclidean Poincaré constant of `ν_s`.
pub fn poincare_upper_bound(curv: &CurvatureSchedule, c_prime_norm: f64, s: f64) -> Result<PoincareBound> {
    let end = curv.end_time();
    if s > end {
        return Err(Error::OutsideTableRange { t: s, lo: 0.0, hi: end });
    }
    let ls = curv.lambda_at(s)?;
    let mut times = vec![s];
    times.extend(curv.t_grid.iter().copied().filter(|&t| t > s));
    let vals = times
        .iter()
        .map(|&t| Ok((-2.0 * (curv.lambda_at(t)? - ls)).exp()))
        .collect::<Result<Vec<f64>>>()?;
    let integral: f64 = (1..times.len())
        .map(|i| 0.5 * (times[i] - times[i - 1]) * (vals[i] + vals[i - 1]))
        .sum();
    let n = curv.t_grid.len();
    let tail = TailInput {
        lambda: curv.lambda_integral[n - 1] - ls,
        lambda_prime: curv.lambda_prime[n - 1],
        c0_radius: 1.0,
    }
    .bound(end, 1.0)?;
    let bound = c_prime_norm * (integral + tail);
    Ok(PoincareBound {
        s,
        integral: c_prime_norm * integral,
        tail: c_prime_norm * tail,
        bound,
        unrebased: bound * (-2.0 * ls).exp(),
    })
}

/// `|∇F|²` as a field.
struct GradSquared<'a>(&'a dyn Field);

impl Field for GradSquared<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn eval(&self, x: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let mut g = vec![0.0; x.len()];
        self.0.eval(x, Some(&mut g));
        if let Some(out) = grad {
            out.fill(f64::NAN);
        }
        g.iter().map(|v| v * v).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntertwiningReport {
    pub t: f64,
    /// `max (|∇P_{0t}F|²_{C_t'} − |C_0'|e^{−2λ_t}P_{0t}|∇F|²)` over the nodes.
    pub max_violation: f64,
    /// Largest left side, for scale.
    pub max_lhs: f64,
}

/// Checks `|∇P_{0t}F|²_{C_t'} ≤ |C_0'|e^{−2λ_t}P_{0t}(|∇F|²)` on the nodes of `grid`.
#[allow(clippy::too_many_arguments)]
pub fn intertwining_check(
    schedule: &CovarianceSchedule,
    v0: &dyn Potential,
    f: &dyn Field,
    t: f64,
    curv: &CurvatureSchedule,
    grid: &Grid,
    q: &QuadratureRule,
) -> Result<IntertwiningReport> {
    let sg = Semigroup::new(schedule, v0, 0.0, t, q)?;
    let cp = schedule.eval(t)?.c_prime;
    let factor = schedule.initial_radius()? * (-2.0 * curv.lambda_at(t)?).exp();
    let grad_sq = GradSquared(f);
    let rows = (0..grid.len())
        .into_par_iter()
        .map(|k| {
            let x = grid.node(k);
            let (_, g) = sg.at_with_gradient(f, &x)?;
            let lhs = (&cp * &g).dot(&g);
            let rhs = factor * sg.at(&grad_sq, &x)?;
            Ok((lhs - rhs, lhs))
        })
        .collect::<Result<Vec<(f64, f64)>>>()?;
    Ok(IntertwiningReport {
        t,
        max_violation: rows.iter().map(|r| r.0).fold(f64::NEG_INFINITY, f64::max),
        max_lhs: rows.iter().map(|r| r.1).fold(0.0, f64::max),
    })
}

/// `max_i [log R(t_{i+1}) − log R(t_i) − ((α−2λ)(t_{i+1}) − (α−2λ)(t_i))] / Δt`
/// along a Rayleigh trace `(t, R)`.
pub fn rayleigh_decay_violation(trace: &[(f64, f64)], curv: &CurvatureSchedule) -> Result<f64> {
    let mut worst = f64::NEG_INFINITY;
    for w in trace.windows(2) {
        let (s, rs) = w[0];
        let (t, rt) = w[1];
        if t <= s {
            return Err(Error::TimesOutOfOrder { s, t });
        }
        worst = worst.max((rt.ln() - rs.ln() - exponent(curv, s, t)?) / (t - s));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TestFunction;
    use crate::linalg::scalar;
    use crate::potential::PotentialDescriptor;

    fn heat() -> (CovarianceSchedule, PotentialDescriptor, QuadratureRule) {
        (
            CovarianceSchedule::heat_kernel(scalar(1.0)).unwrap(),
            PotentialDescriptor::zero(1),
            QuadratureRule::default(),
        )
    }

    #[test]
    fn gaussian_heat_kernel_constants() {
        let (s, v0, q) = heat();
        let samples = SampleSet::standard(1, 4.0, 1).unwrap();
        for t in [0.0, 0.3, 2.0] {
            let l = multiscale_margin(&s, &v0, t, &samples, &q).unwrap();
            let a = alpha_prime(&s, &v0, t, &samples, &q).unwrap();
            assert!((l.value - 0.5).abs() < 1e-12, "{t}: {l:?}");
            assert!((a.value - 1.0).abs() < 1e-12, "{t}: {a:?}");
        }
    }

    #[test]
    fn pauli_villars_closed_forms() {
        let s = CovarianceSchedule::pauli_villars(&scalar(1.0)).unwrap();
        let v0 = PotentialDescriptor::zero(1);
        let q = QuadratureRule::default();
        let samples = SampleSet::from_points(vec![vec![0.0], vec![1.5]]).unwrap();
        for t in [0.2, 1.0, 3.0] {
            let l = multiscale_margin(&s, &v0, t, &samples, &q).unwrap().value;
            assert!((l - 1.0 / (t + 1.0)).abs() < 1e-12);
        }
        let a = alpha_prime(&s, &v0, 1.0, &samples, &q).unwrap().value;
        assert!((a - 0.5).abs() < 1e-12);
    }

    #[test]
    fn schedules_integrate_exactly() {
        let t: Vec<f64> = (0..=200).map(|i| i as f64 / 100.0).collect();
        let c = integrate_schedules(t.clone(), vec![0.5; 201], vec![1.0; 201], vec![1; 201], String::new()).unwrap();
        assert!((c.lambda_integral[200] - 1.0).abs() < 1e-12);
        assert_eq!(c.lambda_integral[0], 0.0);
        assert!((c.lambda_at(1.234).unwrap() - 0.617).abs() < 1e-12);
        let lp: Vec<f64> = t.iter().map(|t| 1.0 / (t + 1.0)).collect();
        let c = integrate_schedules(t, lp.clone(), lp, vec![1; 201], String::new()).unwrap();
        assert!((c.lambda_at(1.0).unwrap() - 2f64.ln()).abs() < 1e-5);
        assert!(c.refinement_change().unwrap() < 1e-4);
        assert!(matches!(
            integrate_schedules(vec![0.0, 1.0, 1.0], vec![0.0; 3], vec![0.0; 3], vec![], String::new()),
            Err(Error::NonMonotoneGrid(2))
        ));
    }

    #[test]
    fn gaussian_chain_margins_vanish() {
        let t: Vec<f64> = (0..=8).map(|i| 0.25 * i as f64).collect();
        let c = integrate_schedules(t.clone(), vec![0.5; 9], vec![1.0; 9], vec![1; 9], String::new()).unwrap();
        let trace: Vec<(f64, f64)> = t.iter().map(|&t| (t, 1.0)).collect();
        let m = theorem_margin(&trace, &c, &ordered_pairs(&t)).unwrap();
        assert_eq!(m.len(), 36);
        assert!(m.iter().all(|p| p.margin.abs() < 1e-12));
        assert_eq!(theorem_margin(&trace, &c, &[(0.5, 0.5)]).unwrap()[0].margin, 0.0);
        assert!(matches!(theorem_margin(&trace, &c, &[(0.1, 0.5)]), Err(Error::MissingTracePoint(_))));
        // OU eigenvalues μ_k = k at every time scale like k = 1
        let ou: Vec<(f64, Vec<f64>)> = t.iter().map(|&t| (t, vec![0.0, 1.0, 2.0, 3.0])).collect();
        let h = higher_eigenvalue_margin(&ou, &c, &ordered_pairs(&t), 3).unwrap();
        assert!(h.iter().all(|p| p.margin.abs() < 1e-12));
    }

    #[test]
    fn gaussian_poincare_bound_is_tight() {
        let t: Vec<f64> = (0..=4000).map(|i| i as f64 / 100.0).collect();
        let n = t.len();
        let c = integrate_schedules(t, vec![0.5; n], vec![1.0; n], vec![1; n], String::new()).unwrap();
        let b0 = poincare_upper_bound(&c, 1.0, 0.0).unwrap();
        assert!((b0.bound - 1.0).abs() < 1e-4, "{b0:?}");
        let b1 = poincare_upper_bound(&c, (-1f64).exp(), 1.0).unwrap();
        assert!(b1.bound < b0.bound);
        assert!((b1.bound - (-1f64).exp()).abs() < 1e-4);
        let flat = integrate_schedules(vec![0.0, 1.0], vec![0.0; 2], vec![0.0; 2], vec![1; 2], String::new()).unwrap();
        assert!(matches!(poincare_upper_bound(&flat, 1.0, 0.0), Err(Error::BoundDivergent(_))));
    }

    #[test]
    fn intertwining_is_equality_for_linear_gaussian() {
        let (s, v0, q) = heat();
        let t: Vec<f64> = (0..=20).map(|i| 0.1 * i as f64).collect();
        let c = integrate_schedules(t, vec![0.5; 21], vec![1.0; 21], vec![1; 21], String::new()).unwrap();
        let grid = Grid::aligned(vec![3.0], vec![13]).unwrap();
        for tt in [0.5, 1.0, 2.0] {
            let r = intertwining_check(&s, &v0, &TestFunction::Linear(vec![1.0]), tt, &c, &grid, &q).unwrap();
            assert!(r.max_violation.abs() < 1e-12, "{r:?}");
            let r = intertwining_check(&s, &v0, &TestFunction::Constant(2.0), tt, &c, &grid, &q).unwrap();
            assert_eq!(r.max_violation, 0.0);
        }
    }

    #[test]
    fn phi4_site_curvature_beats_susceptibility_formula() {
        // single site g = 1, ν = 0, A = 1: λ_t' ≥ 1/t − χ_t/t² with χ_t the
        // second moment of e^{−φ⁴/4 − φ²(1 + 1/t)/2}, by trapezoid.
        let s = CovarianceSchedule::pauli_villars(&scalar(1.0)).unwrap();
        let v0 = PotentialDescriptor::phi4(1.0, 0.0, vec![0.0]).unwrap();
        let q = QuadratureRule::default();
        let samples = SampleSet::standard(1, 4.0, 3).unwrap();
        let t = 1.0;
        let mass = 1.0 + 1.0 / t;
        let (mut z, mut m2) = (0.0, 0.0);
        for i in 0..=20000 {
            let x = -10.0 + i as f64 * 1e-3;
            let w = (-0.25 * x.powi(4) - 0.5 * mass * x * x).exp();
            z += w;
            m2 += w * x * x;
        }
        let chi = m2 / z;
        let l = multiscale_margin(&s, &v0, t, &samples, &q).unwrap().value;
        assert!(l >= 1.0 / t - chi / (t * t) - 1e-6, "{l} vs {}", 1.0 / t - chi / (t * t));
    }
}
