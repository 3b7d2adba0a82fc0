//! Pointwise `Γ₂` by operator composition against its closed form.
//!
//! With `A = κΔ_{C'} − ⟨∇W, C'∇⟩` and `Γ(f, g) = ⟨∇f, C'∇g⟩`, the composed
//! `½AΓ(φ) − Γ(φ, Aφ)` is evaluated with fourth-order central differences in
//! the grid frame, and compared with `κ‖∇²φ‖²_{C'} + ∇φᵀC'∇²W C'∇φ`. Here
//! `κ = ½` for `L` and 1 otherwise, and `W = V_t + ½⟨x, (C_∞−C_t)⁻¹x⟩` for
//! `𝓛` and `V_t` otherwise.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::Drift;
use crate::error::{Error, Result};
use crate::flow::FlowMeasure;
use crate::grid::Field;

/// Weighted mass of `φ²` allowed outside the interior region.
const BOUNDARY_MASS_LIMIT: f64 = 1e-8;
/// Nodes needed between the interior region and the faces by the stencils.
const STENCIL_MARGIN: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct PointGamma {
    pub x: Vec<f64>,
    pub composed: f64,
    pub explicit: f64,
    /// `Γ(φ) = |∇φ|²_{C'}`.
    pub gamma: f64,
}

#[derive(Debug, Clone)]
pub struct GammaReport {
    pub t: f64,
    pub drift: Drift,
    /// `sup|composed − explicit| / sup|explicit|` over interior nodes.
    pub relative_error: f64,
    pub boundary_mass: f64,
    pub points: Vec<PointGamma>,
}

struct NodeData {
    value: f64,
    /// `∇φ` in frame coordinates.
    grad: Vec<f64>,
    /// `∇W` in frame coordinates.
    drift_grad: Vec<f64>,
    /// `∇²W` in frame coordinates.
    drift_hess: DMatrix<f64>,
}

/// `Γ₂(φ)` both ways on the interior nodes of the flow grid (at least
/// `margin` nodes from every face).
pub fn gamma_operators(flow: &FlowMeasure<'_>, drift: Drift, phi: &dyn Field, margin: usize) -> Result<GammaReport> {
    let grid = flow.grid();
    let d = grid.dim();
    let n = grid.len();
    if phi.dim() != 0 && phi.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: phi.dim(),
        });
    }
    let margin = margin.max(STENCIL_MARGIN);
    if grid.shape().iter().any(|&s| s <= 2 * margin) {
        return Err(Error::InvalidInput(format!("grid too small for interior margin {margin}")));
    }
    let frame = grid.frame();
    let c_frame = frame.transpose() * flow.mobility() * frame;
    let mob: Vec<f64> = (0..d).map(|a| c_frame[(a, a)]).collect();
    let kappa = if drift == Drift::L { 0.5 } else { 1.0 };
    let gap_inv = flow.gap_inverse();

    let data = (0..n)
        .into_par_iter()
        .map(|k| -> Result<NodeData> {
            let x = grid.node(k);
            let mut g = vec![0.0; d];
            let value = phi.eval(&x, Some(&mut g));
            let (_, mut vg, mut vh) = flow.potential().derivatives(&x)?;
            if drift == Drift::ScriptL {
                vg += gap_inv * DVector::from_column_slice(&x);
                vh += gap_inv;
            }
            Ok(NodeData {
                value,
                grad: (frame.transpose() * DVector::from_vec(g)).as_slice().to_vec(),
                drift_grad: (frame.transpose() * vg).as_slice().to_vec(),
                drift_hess: frame.transpose() * vh * frame,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let total: f64 = (0..n).map(|k| flow.probabilities()[k] * data[k].value.powi(2)).sum();
    let outside: f64 = (0..n)
        .filter(|&k| !grid.is_interior(k, margin))
        .map(|k| flow.probabilities()[k] * data[k].value.powi(2))
        .sum();
    let boundary_mass = if total > 0.0 { outside / total } else { 0.0 };
    if boundary_mass > BOUNDARY_MASS_LIMIT {
        return Err(Error::SupportTooLarge(boundary_mass));
    }

    let d1 = |f: &dyn Fn(usize) -> f64, k: usize, a: usize| {
        let s = grid.stride(a);
        (-f(k + 2 * s) + 8.0 * f(k + s) - 8.0 * f(k - s) + f(k - 2 * s)) / (12.0 * grid.spacing(a))
    };
    let d2 = |f: &dyn Fn(usize) -> f64, k: usize, a: usize| {
        let s = grid.stride(a);
        let h = grid.spacing(a);
        (-f(k + 2 * s) + 16.0 * f(k + s) - 30.0 * f(k) + 16.0 * f(k - s) - f(k - 2 * s)) / (12.0 * h * h)
    };

    let gamma: Vec<f64> = data
        .iter()
        .map(|nd| (0..d).map(|a| mob[a] * nd.grad[a] * nd.grad[a]).sum())
        .collect();
    // A f at nodes two away from the faces; first derivatives of f are supplied.
    let apply = |vals: &dyn Fn(usize) -> f64, grads: &dyn Fn(usize, usize) -> f64, k: usize| -> f64 {
        (0..d)
            .map(|a| mob[a] * (kappa * d2(vals, k, a) - data[k].drift_grad[a] * grads(k, a)))
            .sum()
    };
    let phi_vals = |k: usize| data[k].value;
    let a_phi: Vec<f64> = (0..n)
        .map(|k| {
            if grid.is_interior(k, 2) {
                apply(&phi_vals, &|k, a| data[k].grad[a], k)
            } else {
                f64::NAN
            }
        })
        .collect();

    let mut points = Vec::new();
    let mut max_diff = 0.0f64;
    let mut max_ref = 0.0f64;
    for k in (0..n).filter(|&k| grid.is_interior(k, margin)) {
        let gamma_vals = |j: usize| gamma[j];
        let a_gamma = apply(&gamma_vals, &|j, a| d1(&gamma_vals, j, a), k);
        let a_phi_vals = |j: usize| a_phi[j];
        let cross: f64 = (0..d).map(|a| mob[a] * data[k].grad[a] * d1(&a_phi_vals, k, a)).sum();
        let composed = 0.5 * a_gamma - cross;

        let mut hess = DMatrix::zeros(d, d);
        for a in 0..d {
            for b in 0..d {
                hess[(a, b)] = d1(&|j: usize| data[j].grad[b], k, a);
            }
        }
        let hess = (&hess + hess.transpose()) * 0.5;
        let mut hs = 0.0;
        let mut drift_term = 0.0;
        for a in 0..d {
            for b in 0..d {
                hs += mob[a] * mob[b] * hess[(a, b)].powi(2);
                drift_term += mob[a] * data[k].grad[a] * data[k].drift_hess[(a, b)] * mob[b] * data[k].grad[b];
            }
        }
        let explicit = kappa * hs + drift_term;
        max_diff = max_diff.max((composed - explicit).abs());
        max_ref = max_ref.max(explicit.abs());
        points.push(PointGamma {
            x: grid.node(k),
            composed,
            explicit,
            gamma: gamma[k],
        });
    }
    let relative_error = if max_ref > 0.0 { max_diff / max_ref } else { max_diff };
    Ok(GammaReport {
        t: flow.t(),
        drift,
        relative_error,
        boundary_mass,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::CovarianceSchedule;
    use crate::flow::FlowOptions;
    use crate::grid::TestFunction;
    use crate::linalg::scalar;
    use crate::potential::PotentialDescriptor;
    use crate::quadrature::QuadratureRule;

    #[test]
    fn ou_linear_function_has_constant_gamma_two() {
        // V = 0, heat kernel at t: W = e^t x²/2 for 𝓛, C' = e^{−t}.
        let s = CovarianceSchedule::heat_kernel(scalar(1.0)).unwrap();
        let v0 = PotentialDescriptor::zero(1);
        let q = QuadratureRule::default();
        let t: f64 = 0.7;
        let nu = FlowMeasure::new(&s, &v0, t, &q, &FlowOptions::new(vec![513])).unwrap();
        let r = gamma_operators(&nu, Drift::ScriptL, &TestFunction::Linear(vec![1.0]), 5).unwrap();
        let cp = (-t).exp();
        let expect = cp;
        for p in &r.points {
            assert!((p.explicit - expect).abs() < 1e-9 * expect);
        }
        assert!(r.relative_error < 1e-8, "{}", r.relative_error);
        let r = gamma_operators(&nu, Drift::L, &TestFunction::Linear(vec![1.0]), 5).unwrap();
        assert!(r.points.iter().all(|p| p.explicit.abs() < 1e-12));
    }

    #[test]
    fn double_well_composition_matches_closed_form() {
        let s = CovarianceSchedule::pauli_villars(&scalar(1.0)).unwrap();
        let v0 = PotentialDescriptor::phi4(1.0, -1.0, vec![0.0]).unwrap();
        let q = QuadratureRule::default();
        let nu = FlowMeasure::new(&s, &v0, 1.0, &q, &FlowOptions::new(vec![1025])).unwrap();
        for drift in [Drift::ScriptL, Drift::L, Drift::Lambda] {
            for phi in [
                TestFunction::Cosine(vec![0.8]),
                TestFunction::Monomial { dim: 1, axis: 0, power: 3 },
            ] {
                let r = gamma_operators(&nu, drift, &phi, 5).unwrap();
                assert!(r.relative_error < 1e-5, "{drift} {phi:?}: {}", r.relative_error);
            }
        }
    }

    #[test]
    fn wide_functions_are_rejected() {
        let s = CovarianceSchedule::heat_kernel(scalar(1.0)).unwrap();
        let v0 = PotentialDescriptor::zero(1);
        let q = QuadratureRule::default();
        let opts = FlowOptions {
            sd_multiple: 2.0,
            ..FlowOptions::new(vec![129])
        };
        let nu = FlowMeasure::new(&s, &v0, 0.5, &q, &opts).unwrap();
        assert!(matches!(
            gamma_operators(&nu, Drift::ScriptL, &TestFunction::Constant(1.0), 5),
            Err(Error::SupportTooLarge(_))
        ));
    }
}
