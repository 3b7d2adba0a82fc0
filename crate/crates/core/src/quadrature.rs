//! Gauss–Hermite rules for expectations against the standard Gaussian.
//!
//! Nodes are seeded by the Golub–Welsch eigenvalues and polished by Newton
//! iteration on the orthonormal Hermite recurrence, so weights keep full
//! relative accuracy in the tails. The adaptive integrator in
//! [`crate::potential`] multiplies each weight by `exp(u²/2)`; the log of that
//! product is stored alongside the weights.

use std::sync::OnceLock;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::SymEigen;

/// Default points per axis.
pub const DEFAULT_ORDER: usize = 40;
const MAX_ORDER: usize = 300;
const MAX_TENSOR_DIM: usize = 3;

/// One-dimensional Gauss–Hermite rule with tensor products cached per dimension.
#[derive(Debug)]
pub struct QuadratureRule {
    order: usize,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    log_scaled: Vec<f64>,
    tensors: [OnceLock<TensorRule>; MAX_TENSOR_DIM],
}

impl Clone for QuadratureRule {
    fn clone(&self) -> Self {
        Self {
            order: self.order,
            nodes: self.nodes.clone(),
            weights: self.weights.clone(),
            log_scaled: self.log_scaled.clone(),
            tensors: Default::default(),
        }
    }
}

/// Tensor product of a 1D rule: `dim`-tuples of nodes with log of the scaled weight.
#[derive(Debug, Clone)]
pub struct TensorRule {
    pub dim: usize,
    /// Flat `len × dim`.
    pub nodes: Vec<f64>,
    /// `log(w) + |u|²/2` per tuple.
    pub log_scaled: Vec<f64>,
}

impl TensorRule {
    pub fn len(&self) -> usize {
        self.log_scaled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_scaled.is_empty()
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.nodes[i * self.dim..(i + 1) * self.dim]
    }
}

fn orthonormal_hermite(n: usize, x: f64) -> (f64, f64, f64) {
    // returns (p_n, p_{n-1}, sum_{k<n} p_k^2)
    let mut prev = 0.0;
    let mut cur = 1.0;
    let mut sum = 0.0;
    for k in 0..n {
        sum += cur * cur;
        let next = (x * cur - (k as f64).sqrt() * prev) / ((k + 1) as f64).sqrt();
        prev = cur;
        cur = next;
    }
    (cur, prev, sum)
}

impl QuadratureRule {
    pub fn new(order: usize) -> Result<Self> {
        if order == 0 || order > MAX_ORDER {
            return Err(Error::InvalidInput(format!(
                "quadrature order must be in 1..={MAX_ORDER}, got {order}"
            )));
        }
        let mut jacobi = DMatrix::zeros(order, order);
        for k in 1..order {
            let b = (k as f64).sqrt();
            jacobi[(k, k - 1)] = b;
            jacobi[(k - 1, k)] = b;
        }
        let guesses = SymEigen::new(&jacobi).values;
        let mut nodes = Vec::with_capacity(order);
        let mut weights = Vec::with_capacity(order);
        let mut log_scaled = Vec::with_capacity(order);
        for &x0 in guesses.iter() {
            let mut x = x0;
            for _ in 0..8 {
                let (pn, pn1, _) = orthonormal_hermite(order, x);
                let deriv = (order as f64).sqrt() * pn1;
                if deriv == 0.0 {
                    break;
                }
                let step = pn / deriv;
                x -= step;
                if step.abs() <= 1e-16 * x.abs().max(1.0) {
                    break;
                }
            }
            let (_, _, sum) = orthonormal_hermite(order, x);
            nodes.push(x);
            weights.push(1.0 / sum);
            log_scaled.push(-sum.ln() + 0.5 * x * x);
        }
        // exact symmetry
        for i in 0..order / 2 {
            let j = order - 1 - i;
            let x = 0.5 * (nodes[j] - nodes[i]);
            nodes[i] = -x;
            nodes[j] = x;
            let w = 0.5 * (weights[i] + weights[j]);
            weights[i] = w;
            weights[j] = w;
            let l = 0.5 * (log_scaled[i] + log_scaled[j]);
            log_scaled[i] = l;
            log_scaled[j] = l;
        }
        if order % 2 == 1 {
            nodes[order / 2] = 0.0;
        }
        Ok(Self {
            order,
            nodes,
            weights,
            log_scaled,
            tensors: Default::default(),
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `E[f(Z)]` for a standard normal `Z`.
    pub fn expect(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }

    /// Cached tensor rule; `dim` in `1..=3`.
    pub fn tensor(&self, dim: usize) -> Result<&TensorRule> {
        if dim == 0 || dim > MAX_TENSOR_DIM {
            return Err(Error::InvalidInput(format!(
                "tensor quadrature supports dimensions 1..={MAX_TENSOR_DIM}, got {dim}"
            )));
        }
        Ok(self.tensors[dim - 1].get_or_init(|| self.build_tensor(dim)))
    }

    fn build_tensor(&self, dim: usize) -> TensorRule {
        let n = self.order;
        let len = n.pow(dim as u32);
        let mut nodes = Vec::with_capacity(len * dim);
        let mut log_scaled = Vec::with_capacity(len);
        let mut idx = vec![0usize; dim];
        for _ in 0..len {
            let mut lw = 0.0;
            for &i in &idx {
                nodes.push(self.nodes[i]);
                lw += self.log_scaled[i];
            }
            log_scaled.push(lw);
            for a in (0..dim).rev() {
                idx[a] += 1;
                if idx[a] < n {
                    break;
                }
                idx[a] = 0;
            }
        }
        TensorRule {
            dim,
            nodes,
            log_scaled,
        }
    }
}

impl Default for QuadratureRule {
    fn default() -> Self {
        Self::new(DEFAULT_ORDER).expect("default order is valid")
    }
}

/// `E[Z^k]` for a standard normal: `(k-1)!!` for even `k`, 0 for odd.
pub fn gaussian_moment(k: u32) -> f64 {
    if k % 2 == 1 {
        return 0.0;
    }
    (1..k).step_by(2).map(|j| j as f64).product()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_one_and_symmetric() {
        for order in [1, 2, 5, 40, 80, 160] {
            let q = QuadratureRule::new(order).unwrap();
            let s: f64 = q.weights().iter().sum();
            assert!((s - 1.0).abs() < 1e-13, "order {order}: {s}");
            for i in 0..order {
                assert!((q.nodes()[i] + q.nodes()[order - 1 - i]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn monomials_exact_up_to_degree_six() {
        for order in [4, 7, 40] {
            let q = QuadratureRule::new(order).unwrap();
            for k in 0..=6u32 {
                if k as usize > 2 * order - 1 {
                    continue;
                }
                let got = q.expect(|x| x.powi(k as i32));
                assert!(
                    (got - gaussian_moment(k)).abs() < 1e-11,
                    "order {order} degree {k}: {got}"
                );
            }
        }
    }

    #[test]
    fn degree_limit_is_sharp() {
        // A 2-point rule integrates x^3 but not x^4.
        let q = QuadratureRule::new(2).unwrap();
        assert!((q.expect(|x| x.powi(3))).abs() < 1e-14);
        assert!((q.expect(|x| x.powi(4)) - 3.0).abs() > 0.5);
    }

    #[test]
    fn scaled_weights_stay_accurate_in_tails() {
        let q = QuadratureRule::new(80).unwrap();
        for i in 0..80 {
            let x = q.nodes()[i];
            let direct = q.weights()[i].ln() + 0.5 * x * x;
            assert!((direct - q.log_scaled[i]).abs() < 1e-9 * direct.abs().max(1.0));
        }
        // sum_i w_i e^{x_i^2/2} h(x_i) ~ ∫ h dx / sqrt(2π); h = e^{-x^2/4} gives sqrt(2).
        let approx: f64 = (0..80)
            .map(|i| (q.log_scaled[i] - 0.25 * q.nodes()[i].powi(2)).exp())
            .sum();
        assert!((approx - 2f64.sqrt()).abs() < 1e-10, "{approx}");
    }

    #[test]
    fn tensor_rule_integrates_products() {
        let q = QuadratureRule::new(6).unwrap();
        let t = q.tensor(3).unwrap();
        assert_eq!(t.len(), 216);
        let mut acc = 0.0;
        for i in 0..t.len() {
            let u = t.node(i);
            let w = (t.log_scaled[i] - 0.5 * u.iter().map(|v| v * v).sum::<f64>()).exp();
            acc += w * u[0].powi(2) * u[1].powi(4) * u[2].powi(2);
        }
        assert!((acc - 3.0).abs() < 1e-11);
        assert!(q.tensor(4).is_err());
    }
}
