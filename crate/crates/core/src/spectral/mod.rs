//! Finite-volume discretization of the generators of `ν_t` and their spectra.
//!
//! The generator `𝓐f = w⁻¹ div(w D ∇f)` is assembled in divergence form on a
//! grid whose axes diagonalise the mobility `D`. Each node carries the mass
//! `m_k = w_k vol_k`, each edge the conductance `D_a w_mid area / h_a` with
//! the weight evaluated at the edge midpoint, and `−𝓐 = M⁻¹K` with `K` the
//! weighted graph Laplacian. This is exactly reversible and kills constants
//! for any weights. The reflecting (zero-flux) boundary is implicit.
//! Everything is carried in log-space, so weights that underflow in linear
//! scale do not break the assembly.

mod eigen;
mod gamma;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::covariance::CovarianceSchedule;
use crate::error::{Error, Result};
use crate::flow::{FlowMeasure, FlowOptions, Semigroup};
use crate::grid::{Field, Grid, GridFunction};
use crate::linalg::SymEigen;
use crate::potential::Potential;
use crate::quadrature::QuadratureRule;

pub use eigen::{clusters, smallest_eigenpairs, BandedSym, EigenPairs};
pub use gamma::{gamma_operators, GammaReport, PointGamma};

/// Which generator to assemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Drift {
    /// `𝓛_t = Δ_{C'} − ⟨∇V_t + (C_∞−C_t)⁻¹x, ∇⟩_{C'}`, reversible for `ν_t`.
    ScriptL,
    /// `L_t = ½Δ_{C'} − ⟨∇V_t, ∇⟩_{C'}`, reversible for `e^{−2V_t}`.
    L,
    /// `Λ_t = Δ_{C'} − ⟨∇V_t, ∇⟩_{C'}`, reversible for `e^{−V_t}`.
    Lambda,
}

impl fmt::Display for Drift {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Drift::ScriptL => "script-L",
            Drift::L => "L",
            Drift::Lambda => "Lambda",
        })
    }
}

impl FromStr for Drift {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "script-L" => Ok(Drift::ScriptL),
            "L" => Ok(Drift::L),
            "Lambda" => Ok(Drift::Lambda),
            other => Err(Error::InvalidInput(format!("unknown drift '{other}'"))),
        }
    }
}

/// Fraction of nodes allowed to have weights below the double-precision range.
const MAX_UNDERFLOW_FRACTION: f64 = 0.2;
/// Relative change of `μ₁` under coarsening beyond which a spectrum is flagged.
pub const RICHARDSON_TOLERANCE: f64 = 0.005;

#[derive(Debug, Clone)]
pub struct GeneratorDiscretization {
    t: f64,
    drift: Drift,
    grid: Arc<Grid>,
    /// Mobility in physical coordinates (already halved for `L`).
    mobility: DMatrix<f64>,
    axis_mobility: Vec<f64>,
    /// Unnormalized log-weights at the nodes.
    node_log_weight: Vec<f64>,
    /// Log of normalized node masses (`Σ exp = 1`).
    log_mass: Vec<f64>,
    /// Per axis, log-conductance of the edge from node `k` to `k + stride`.
    log_cond: Vec<Vec<f64>>,
    matrix: BandedSym,
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

impl GeneratorDiscretization {
    /// Assembles from log-weights at the nodes and at edge midpoints
    /// (`mid_log_weight[a][k]` for the edge from `k` along axis `a`; ignored
    /// where no such edge exists).
    pub fn from_log_weights(
        t: f64,
        drift: Drift,
        grid: Arc<Grid>,
        axis_mobility: Vec<f64>,
        node_log_weight: Vec<f64>,
        mid_log_weight: &[Vec<f64>],
    ) -> Result<Self> {
        let d = grid.dim();
        let n = grid.len();
        if node_log_weight.len() != n || mid_log_weight.len() != d || axis_mobility.len() != d {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: node_log_weight.len(),
            });
        }
        if axis_mobility.iter().any(|&m| !(m > 0.0)) {
            return Err(Error::InvalidInput("mobility must be positive definite".into()));
        }
        let max = node_log_weight.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::InvalidInput("node weights are not finite".into()));
        }
        let underflow = node_log_weight.iter().filter(|&&v| v - max < -708.0).count();
        let fraction = underflow as f64 / n as f64;
        if fraction > MAX_UNDERFLOW_FRACTION {
            return Err(Error::WeightUnderflow {
                fraction: 100.0 * fraction,
            });
        }
        let log_vol: Vec<f64> = (0..n).map(|k| grid.volume(k).ln()).collect();
        let raw_mass: Vec<f64> = (0..n).map(|k| node_log_weight[k] + log_vol[k]).collect();
        let log_z = log_sum_exp(&raw_mass);
        let log_mass: Vec<f64> = raw_mass.iter().map(|m| m - log_z).collect();

        let mut log_cond = vec![vec![f64::NEG_INFINITY; n]; d];
        for a in 0..d {
            let h = grid.spacing(a);
            for k in 0..n {
                let idx = grid.multi_index(k);
                if idx[a] + 1 >= grid.shape()[a] {
                    continue;
                }
                let mut area = 1.0;
                for b in 0..d {
                    if b != a {
                        let hb = grid.spacing(b);
                        area *= if idx[b] == 0 || idx[b] + 1 == grid.shape()[b] { 0.5 * hb } else { hb };
                    }
                }
                let mid = mid_log_weight[a][k];
                if mid.is_nan() {
                    return Err(Error::InvalidInput(format!("missing midpoint weight at node {k}, axis {a}")));
                }
                log_cond[a][k] = axis_mobility[a].ln() + mid - log_z + area.ln() - h.ln();
            }
        }

        let bw = grid.stride(0);
        let mut matrix = BandedSym::zeros(n, if d == 1 { 1 } else { bw });
        for a in 0..d {
            let s = grid.stride(a);
            for k in 0..n {
                let lc = log_cond[a][k];
                if lc == f64::NEG_INFINITY {
                    continue;
                }
                let j = k + s;
                matrix.add(k, k, (lc - log_mass[k]).exp());
                matrix.add(j, j, (lc - log_mass[j]).exp());
                matrix.add(j, k, -(lc - 0.5 * (log_mass[k] + log_mass[j])).exp());
            }
        }
        let frame = grid.frame();
        let mobility = frame * DMatrix::from_diagonal(&DVector::from_vec(axis_mobility.clone())) * frame.transpose();
        Ok(Self {
            t,
            drift,
            grid,
            mobility,
            axis_mobility,
            node_log_weight,
            log_mass,
            log_cond,
            matrix,
        })
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn drift(&self) -> Drift {
        self.drift
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    /// The mobility matrix of the assembled operator (for `L`, half of `C_t'`).
    pub fn mobility(&self) -> &DMatrix<f64> {
        &self.mobility
    }

    /// Normalized node masses.
    pub fn masses(&self) -> Vec<f64> {
        self.log_mass.iter().map(|m| m.exp()).collect()
    }

    /// Node weights normalized to a probability density on the box.
    pub fn density(&self, k: usize) -> f64 {
        (self.log_mass[k] - self.grid.volume(k).ln()).exp()
    }

    /// `S = M^{-1/2} K M^{-1/2}`.
    pub fn symmetric_matrix(&self) -> &BandedSym {
        &self.matrix
    }

    /// `𝓐f` at every node.
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; f.len()];
        for (a, conds) in self.log_cond.iter().enumerate() {
            let s = self.grid.stride(a);
            for (k, &lc) in conds.iter().enumerate() {
                if lc == f64::NEG_INFINITY {
                    continue;
                }
                let j = k + s;
                let diff = f[j] - f[k];
                out[k] += (lc - self.log_mass[k]).exp() * diff;
                out[j] -= (lc - self.log_mass[j]).exp() * diff;
            }
        }
        out
    }

    /// `Σ_edges κ (f_j − f_k)(g_j − g_k) = −⟨f, 𝓐g⟩_m`.
    pub fn dirichlet(&self, f: &[f64], g: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (a, conds) in self.log_cond.iter().enumerate() {
            let s = self.grid.stride(a);
            for (k, &lc) in conds.iter().enumerate() {
                if lc == f64::NEG_INFINITY {
                    continue;
                }
                acc += lc.exp() * (f[k + s] - f[k]) * (g[k + s] - g[k]);
            }
        }
        acc
    }

    /// `Σ m_k f_k g_k`.
    pub fn inner(&self, f: &[f64], g: &[f64]) -> f64 {
        self.log_mass.iter().zip(f.iter().zip(g)).map(|(m, (a, b))| m.exp() * a * b).sum()
    }

    pub fn mean(&self, f: &[f64]) -> f64 {
        self.log_mass.iter().zip(f).map(|(m, a)| m.exp() * a).sum()
    }

    /// Operator on every other node, with the skipped nodes as edge midpoints.
    pub fn coarsened(&self) -> Result<Self> {
        let coarse = Arc::new(self.grid.coarsen()?);
        let d = coarse.dim();
        let n = coarse.len();
        let fine_index = |cidx: &[usize], bump: Option<usize>| {
            let idx: Vec<usize> = cidx
                .iter()
                .enumerate()
                .map(|(a, &i)| 2 * i + usize::from(bump == Some(a)))
                .collect();
            self.grid.linear_index(&idx)
        };
        let mut node = vec![0.0; n];
        let mut mids = vec![vec![f64::NAN; n]; d];
        for k in 0..n {
            let cidx = coarse.multi_index(k);
            node[k] = self.node_log_weight[fine_index(&cidx, None)];
            for a in 0..d {
                if cidx[a] + 1 < coarse.shape()[a] {
                    mids[a][k] = self.node_log_weight[fine_index(&cidx, Some(a))];
                }
            }
        }
        Self::from_log_weights(self.t, self.drift, coarse, self.axis_mobility.clone(), node, &mids)
    }
}

/// Assembles `𝓛_t`, `L_t` or `Λ_t` for the flow measure, with the given mobility
/// (`C_t'` for the weighted problem, the identity for the Euclidean one).
pub fn build_generator(
    flow: &FlowMeasure<'_>,
    mobility: &DMatrix<f64>,
    drift: Drift,
) -> Result<GeneratorDiscretization> {
    let grid = flow.grid().clone();
    let d = grid.dim();
    let frame = grid.frame();
    let in_frame = frame.transpose() * mobility * frame;
    let scale = in_frame.amax().max(f64::MIN_POSITIVE);
    for a in 0..d {
        for b in 0..d {
            if a != b && in_frame[(a, b)].abs() > 1e-10 * scale {
                return Err(Error::InvalidInput(
                    "mobility is not diagonal in the grid frame".into(),
                ));
            }
        }
    }
    let factor = if drift == Drift::L { 0.5 } else { 1.0 };
    let axis_mobility: Vec<f64> = (0..d).map(|a| factor * in_frame[(a, a)]).collect();

    let gap_inv = flow.gap_inverse().clone();
    let quad = |x: &[f64]| {
        let xv = DVector::from_column_slice(x);
        0.5 * (&gap_inv * &xv).dot(&xv)
    };
    let weight_at = |x: &[f64]| -> Result<f64> {
        match drift {
            Drift::ScriptL => flow.log_density_at(x),
            Drift::Lambda => Ok(-flow.potential().value(x)?),
            Drift::L => Ok(-2.0 * flow.potential().value(x)?),
        }
    };
    let node: Vec<f64> = (0..grid.len())
        .map(|k| {
            let ld = flow.log_density()[k];
            match drift {
                Drift::ScriptL => ld,
                Drift::Lambda => ld + quad(&grid.node(k)),
                Drift::L => 2.0 * (ld + quad(&grid.node(k))),
            }
        })
        .collect();
    let mut mids = Vec::with_capacity(d);
    for a in 0..d {
        let vals = (0..grid.len())
            .into_par_iter()
            .map(|k| {
                let mut local = grid.local(k);
                if grid.multi_index(k)[a] + 1 >= grid.shape()[a] {
                    return Ok(f64::NAN);
                }
                local[a] += 0.5 * grid.spacing(a);
                weight_at(&grid.to_physical(&local))
            })
            .collect::<Result<Vec<f64>>>()?;
        mids.push(vals);
    }
    GeneratorDiscretization::from_log_weights(flow.t(), drift, grid, axis_mobility, node, &mids)
}

#[derive(Debug, Clone)]
pub struct SpectralResult {
    pub t: f64,
    /// `μ₀ ≤ μ₁ ≤ … ≤ μ_k` of `−𝓐`.
    pub eigenvalues: Vec<f64>,
    /// Mass-orthonormal eigenfunctions.
    pub eigenvectors: Vec<GridFunction>,
    pub poincare_constant: f64,
    /// Richardson-extrapolated eigenvalues `(4μ_h − μ_{2h})/3`.
    pub extrapolated: Option<Vec<f64>>,
    /// `|μ₁(h) − μ₁(2h)| / μ₁(h)`.
    pub richardson_change: Option<f64>,
    pub converged: bool,
    pub clusters: Vec<Vec<usize>>,
    pub residuals: Vec<f64>,
}

fn eigen_only(gen: &GeneratorDiscretization, k: usize) -> Result<(Vec<f64>, EigenPairs)> {
    let pairs = smallest_eigenpairs(gen.symmetric_matrix(), k + 1)?;
    Ok((pairs.values.clone(), pairs))
}

/// The `k + 1` smallest eigenpairs of `−𝓐`, with a Richardson check on `μ₁`.
pub fn spectrum(gen: &GeneratorDiscretization, k: usize) -> Result<SpectralResult> {
    if k < 1 || k + 1 >= gen.grid.len() {
        return Err(Error::InvalidInput(format!("need 1 <= k < {} - 1, got {k}", gen.grid.len())));
    }
    let (values, pairs) = eigen_only(gen, k)?;
    let eigenvectors = (0..=k)
        .map(|i| {
            let y = pairs.vectors.column(i);
            let f: Vec<f64> = (0..gen.grid.len()).map(|j| y[j] * (-0.5 * gen.log_mass[j]).exp()).collect();
            GridFunction::new(gen.grid.clone(), f, format!("eigenvector {i}"))
        })
        .collect::<Result<Vec<_>>>()?;
    let coarse = gen.coarsened().ok().map(|c| eigen_only(&c, k)).transpose()?;
    let (extrapolated, richardson_change) = match &coarse {
        Some((cv, _)) => (
            Some(values.iter().zip(cv).map(|(f, c)| (4.0 * f - c) / 3.0).collect()),
            Some((values[1] - cv[1]).abs() / values[1]),
        ),
        None => (None, None),
    };
    let converged = richardson_change.is_some_and(|c| c <= RICHARDSON_TOLERANCE);
    let clusters = clusters(&values, 1e-8);
    Ok(SpectralResult {
        t: gen.t,
        poincare_constant: 1.0 / values[1],
        eigenvalues: values,
        eigenvectors,
        extrapolated,
        richardson_change,
        converged,
        clusters,
        residuals: pairs.residuals,
    })
}

/// Discrete Rayleigh quotient `E(φ, φ) / Var_m(φ)`.
pub fn rayleigh_quotient(gen: &GeneratorDiscretization, phi: &[f64]) -> Result<f64> {
    let mean = gen.mean(phi);
    let centered: Vec<f64> = phi.iter().map(|v| v - mean).collect();
    let var = gen.inner(&centered, &centered);
    if !(var > 1e-14) {
        return Err(Error::DegenerateTestFunction(var));
    }
    Ok(gen.dirichlet(&centered, &centered) / var)
}

/// Ritz values of `−𝓐` on the span of `family` (sorted ascending). By min-max
/// the largest is at least `μ_{len−1}`.
pub fn ritz_values(gen: &GeneratorDiscretization, family: &[Vec<f64>]) -> Result<Vec<f64>> {
    let p = family.len();
    let k = DMatrix::from_fn(p, p, |i, j| gen.dirichlet(&family[i], &family[j]));
    let m = DMatrix::from_fn(p, p, |i, j| gen.inner(&family[i], &family[j]));
    let eig = SymEigen::new(&m);
    if eig.min() <= 1e-14 * eig.max() {
        return Err(Error::InvalidInput("trial family is linearly dependent".into()));
    }
    let root_inv = eig.map(|v| 1.0 / v.sqrt());
    Ok(SymEigen::new(&(&root_inv * k * &root_inv)).values.as_slice().to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayleighPoint {
    pub t: f64,
    /// `E_{ν_t}|∇φ_t|²_{C_t'}`.
    pub energy: f64,
    /// `Var_{ν_t} φ_t`.
    pub variance: f64,
    pub quotient: f64,
}

/// `R_φ(t)` for `φ_t = P_{0t} φ₀`, with gradients taken through the semigroup.
pub fn rayleigh_flow_trace(
    schedule: &CovarianceSchedule,
    v0: &dyn Potential,
    phi0: &dyn Field,
    t_grid: &[f64],
    rule: &QuadratureRule,
    opts: &FlowOptions,
) -> Result<Vec<RayleighPoint>> {
    if let Some(i) = (1..t_grid.len()).find(|&i| t_grid[i] <= t_grid[i - 1]) {
        return Err(Error::NonMonotoneGrid(i));
    }
    let mut out = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let nu = FlowMeasure::new(schedule, v0, t, rule, opts)?;
        let sg = Semigroup::new(schedule, v0, 0.0, t, rule)?;
        let (vals, grads) = sg.apply_with_gradient(phi0, nu.grid().clone())?;
        let mean = nu.expect(vals.values());
        let centered: Vec<f64> = vals.values().iter().map(|v| (v - mean) * (v - mean)).collect();
        let variance = nu.expect(&centered);
        if !(variance > 1e-14) {
            return Err(Error::DegenerateTestFunction(variance));
        }
        let cp = nu.mobility();
        let energy_nodes: Vec<f64> = grads.iter().map(|g| (cp * g).dot(g)).collect();
        let energy = nu.expect(&energy_nodes);
        out.push(RayleighPoint {
            t,
            energy,
            variance,
            quotient: energy / variance,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TestFunction;
    use crate::linalg::scalar;
    use crate::potential::PotentialDescriptor;

    fn ou(points: usize) -> (CovarianceSchedule, PotentialDescriptor, QuadratureRule, FlowOptions) {
        (
            CovarianceSchedule::heat_kernel(scalar(1.0)).unwrap(),
            PotentialDescriptor::zero(1),
            QuadratureRule::default(),
            FlowOptions::new(vec![points]),
        )
    }

    #[test]
    fn ou_spectrum_is_integers() {
        let (s, v0, q, opts) = ou(1025);
        let nu = FlowMeasure::new(&s, &v0, 0.0, &q, &opts).unwrap();
        let gen = build_generator(&nu, nu.mobility(), Drift::ScriptL).unwrap();
        let res = spectrum(&gen, 4).unwrap();
        assert!(res.eigenvalues[0].abs() < 1e-8);
        for k in 1..=4 {
            assert!((res.eigenvalues[k] - k as f64).abs() < 3e-3 * k as f64, "k={k}: {}", res.eigenvalues[k]);
        }
        assert!(res.converged);
        // mass-orthonormal eigenvectors
        for i in 0..=4 {
            for j in 0..=4 {
                let ip = gen.inner(res.eigenvectors[i].values(), res.eigenvectors[j].values());
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((ip - expect).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn reversibility_kernel_and_positivity() {
        let (s, _, q, opts) = ou(129);
        let v0 = PotentialDescriptor::phi4(1.0, -1.0, vec![0.0]).unwrap();
        let nu = FlowMeasure::new(&s, &v0, 0.3, &q, &opts).unwrap();
        for drift in [Drift::ScriptL, Drift::L, Drift::Lambda] {
            let gen = build_generator(&nu, nu.mobility(), drift).unwrap();
            let n = gen.grid().len();
            let f: Vec<f64> = (0..n).map(|i| (0.37 * i as f64).sin()).collect();
            let g: Vec<f64> = (0..n).map(|i| (0.11 * i as f64).cos()).collect();
            let lhs = gen.inner(&gen.apply(&f), &g);
            let rhs = gen.inner(&f, &gen.apply(&g));
            assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0), "{drift}");
            let ones = vec![1.0; n];
            assert!(gen.apply(&ones).iter().all(|v| v.abs() < 1e-10));
            assert!(gen.dirichlet(&f, &f) >= -1e-10);
        }
    }

    #[test]
    fn rayleigh_quotients() {
        let (s, v0, q, opts) = ou(513);
        let nu = FlowMeasure::new(&s, &v0, 0.0, &q, &opts).unwrap();
        let gen = build_generator(&nu, nu.mobility(), Drift::ScriptL).unwrap();
        let res = spectrum(&gen, 3).unwrap();
        let e1 = res.eigenvectors[1].values();
        assert!((rayleigh_quotient(&gen, e1).unwrap() - res.eigenvalues[1]).abs() < 1e-8);
        let e2 = res.eigenvectors[2].values();
        let sum: Vec<f64> = e1.iter().zip(e2).map(|(a, b)| a + b).collect();
        let mid = 0.5 * (res.eigenvalues[1] + res.eigenvalues[2]);
        assert!((rayleigh_quotient(&gen, &sum).unwrap() - mid).abs() < 1e-6);
        let x: Vec<f64> = (0..gen.grid().len()).map(|k| gen.grid().node(k)[0]).collect();
        assert!((rayleigh_quotient(&gen, &x).unwrap() - 1.0).abs() < 1e-3);
        assert!(matches!(
            rayleigh_quotient(&gen, &vec![2.0; x.len()]),
            Err(Error::DegenerateTestFunction(_))
        ));
    }

    #[test]
    fn gaussian_flow_rayleigh_is_one() {
        let (s, v0, q, opts) = ou(129);
        let trace = rayleigh_flow_trace(&s, &v0, &TestFunction::Linear(vec![1.0]), &[0.0, 0.5, 1.0, 2.0], &q, &opts).unwrap();
        for p in trace {
            assert!((p.quotient - 1.0).abs() < 1e-8, "{p:?}");
            assert!((p.energy - (-p.t).exp()).abs() < 1e-8);
        }
        assert!(matches!(
            rayleigh_flow_trace(&s, &v0, &TestFunction::Constant(1.0), &[0.0, 1.0], &q, &opts),
            Err(Error::DegenerateTestFunction(_))
        ));
    }

    #[test]
    fn ritz_values_bound_eigenvalues() {
        let (s, v0, q, opts) = ou(257);
        let nu = FlowMeasure::new(&s, &v0, 0.0, &q, &opts).unwrap();
        let gen = build_generator(&nu, nu.mobility(), Drift::ScriptL).unwrap();
        let res = spectrum(&gen, 3).unwrap();
        let family: Vec<Vec<f64>> = (0..4)
            .map(|p| (0..gen.grid().len()).map(|k| gen.grid().node(k)[0].powi(p)).collect())
            .collect();
        let ritz = ritz_values(&gen, &family).unwrap();
        assert!(ritz[3] >= res.eigenvalues[3] - 1e-8);
    }
}
