//! Variance decomposition `Var_{ν₀}F = ∫₀^∞ E_{ν_t}|∇P_{0t}F|²_{C_t'} dt`.

use nalgebra::DVector;

use super::{FlowMeasure, FlowOptions, Semigroup};
use crate::covariance::CovarianceSchedule;
use crate::error::{Error, Result};
use crate::grid::Field;
use crate::potential::Potential;
use crate::quadrature::QuadratureRule;

/// Curvature data at the end of the time grid used to bound the neglected tail.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailInput {
    /// `λ_T`.
    pub lambda: f64,
    /// `λ_T'`.
    pub lambda_prime: f64,
    /// `|C_0'|`.
    pub c0_radius: f64,
}

impl TailInput {
    /// Bound on `∫_T^∞ |C_0'| e^{−2λ_t} sup|∇F|² dt`, assuming `t λ_t'` stays
    /// above `T λ_T'`, or when that is not integrable, that `λ'` stays above `λ_T'`.
    pub fn bound(&self, t_end: f64, sup_grad_sq: f64) -> Result<f64> {
        let exp_tail = if self.lambda_prime > 0.0 {
            1.0 / (2.0 * self.lambda_prime)
        } else {
            f64::INFINITY
        };
        let p = 2.0 * self.lambda_prime * t_end;
        let power_tail = if p > 1.0 { t_end / (p - 1.0) } else { f64::INFINITY };
        let factor = if power_tail.is_finite() { power_tail } else { exp_tail };
        if !factor.is_finite() {
            return Err(Error::BoundDivergent(self.lambda_prime));
        }
        Ok(self.c0_radius * sup_grad_sq * (-2.0 * self.lambda).exp() * factor)
    }
}

#[derive(Debug, Clone)]
pub struct ConservationReport {
    pub variance: f64,
    /// Trapezoid integral of the energy over the time grid.
    pub integral: f64,
    pub tail: f64,
    /// `|Var − ∫| / Var` (absolute when the variance vanishes).
    pub mismatch: f64,
    /// Tail bound exceeded `1e−4`.
    pub t_too_small: bool,
    /// `max_t |E_{ν_t} P_{0t}F − E_{ν₀}F|`.
    pub martingale_deviation: f64,
    /// `(t, E_{ν_t}|∇P_{0t}F|²_{C_t'})`.
    pub integrand: Vec<(f64, f64)>,
    /// `(t, E_{ν_t} P_{0t}F)`.
    pub means: Vec<(f64, f64)>,
}

pub fn conservation_check(
    schedule: &CovarianceSchedule,
    v0: &dyn Potential,
    f: &dyn Field,
    t_grid: &[f64],
    rule: &QuadratureRule,
    opts: &FlowOptions,
    tail: TailInput,
) -> Result<ConservationReport> {
    if t_grid.len() < 2 || t_grid[0] != 0.0 {
        return Err(Error::InvalidInput("time grid must start at 0 and have at least two points".into()));
    }
    if let Some(i) = (1..t_grid.len()).find(|&i| t_grid[i] <= t_grid[i - 1]) {
        return Err(Error::NonMonotoneGrid(i));
    }
    let nu0 = FlowMeasure::new(schedule, v0, 0.0, rule, opts)?;
    let d = schedule.dim();
    let mut grad = vec![0.0; d];
    let mut sup_grad_sq: f64 = 0.0;
    let mut vals = Vec::with_capacity(nu0.grid().len());
    for k in 0..nu0.grid().len() {
        let v = f.eval(&nu0.grid().node(k), Some(&mut grad));
        sup_grad_sq = sup_grad_sq.max(grad.iter().map(|g| g * g).sum());
        vals.push(v);
    }
    let mean0 = nu0.expect(&vals);
    let variance = nu0.expect(&vals.iter().map(|v| (v - mean0) * (v - mean0)).collect::<Vec<_>>());

    let mut integrand = Vec::with_capacity(t_grid.len());
    let mut means = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let nu = FlowMeasure::new(schedule, v0, t, rule, opts)?;
        let semigroup = Semigroup::new(schedule, v0, 0.0, t, rule)?;
        let (pf, grads) = semigroup.apply_with_gradient(f, nu.grid().clone())?;
        let cp = nu.mobility();
        let energy: Vec<f64> = grads.iter().map(|g: &DVector<f64>| (cp * g).dot(g)).collect();
        integrand.push((t, nu.expect(&energy)));
        means.push((t, nu.expect(pf.values())));
    }
    let integral: f64 = integrand
        .windows(2)
        .map(|w| 0.5 * (w[1].0 - w[0].0) * (w[0].1 + w[1].1))
        .sum();
    let t_end = t_grid[t_grid.len() - 1];
    let tail = tail.bound(t_end, sup_grad_sq)?;
    let mismatch = if variance > 1e-300 {
        (variance - integral).abs() / variance
    } else {
        (variance - integral).abs()
    };
    let martingale_deviation = means.iter().map(|(_, m)| (m - mean0).abs()).fold(0.0, f64::max);
    Ok(ConservationReport {
        variance,
        integral,
        tail,
        mismatch,
        t_too_small: tail > 1e-4,
        martingale_deviation,
        integrand,
        means,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TestFunction;
    use crate::linalg::scalar;
    use crate::potential::PotentialDescriptor;

    #[test]
    fn constant_has_no_variance() {
        let s = CovarianceSchedule::heat_kernel(scalar(1.0)).unwrap();
        let q = QuadratureRule::default();
        let v0 = PotentialDescriptor::zero(1);
        let tail = TailInput {
            lambda: 1.0,
            lambda_prime: 0.5,
            c0_radius: 1.0,
        };
        let r = conservation_check(
            &s,
            &v0,
            &TestFunction::Constant(2.0),
            &[0.0, 1.0, 2.0],
            &q,
            &FlowOptions::new(vec![65]),
            tail,
        )
        .unwrap();
        assert!(r.variance.abs() < 1e-14);
        assert!(r.integrand.iter().all(|(_, v)| v.abs() < 1e-20));
        assert_eq!(r.tail, 0.0);
    }

    #[test]
    fn gaussian_linear_integrand_is_exponential() {
        let s = CovarianceSchedule::heat_kernel(scalar(1.0)).unwrap();
        let q = QuadratureRule::default();
        let v0 = PotentialDescriptor::zero(1);
        let grid: Vec<f64> = (0..=50).map(|i| 0.02 * i as f64).collect();
        let tail = TailInput {
            lambda: 0.5,
            lambda_prime: 0.5,
            c0_radius: 1.0,
        };
        let r = conservation_check(
            &s,
            &v0,
            &TestFunction::Linear(vec![1.0]),
            &grid,
            &q,
            &FlowOptions::new(vec![129]),
            tail,
        )
        .unwrap();
        assert!((r.variance - 1.0).abs() < 1e-12);
        for &(t, v) in &r.integrand {
            assert!((v - (-t).exp()).abs() < 1e-10, "t={t}: {v}");
        }
        assert!(r.martingale_deviation < 1e-12);
    }

    #[test]
    fn tail_bound_diverges_without_curvature() {
        let tail = TailInput {
            lambda: 0.0,
            lambda_prime: 0.0,
            c0_radius: 1.0,
        };
        assert!(matches!(tail.bound(10.0, 1.0), Err(Error::BoundDivergent(_))));
    }
}
