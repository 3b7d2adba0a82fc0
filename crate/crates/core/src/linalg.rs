//! Small dense symmetric-matrix helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted ascending.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

impl SymEigen {
    pub fn new(m: &DMatrix<f64>) -> Self {
        let n = m.nrows();
        if n == 0 {
            return Self {
                values: DVector::zeros(0),
                vectors: DMatrix::zeros(0, 0),
            };
        }
        let sym = (m + m.transpose()) * 0.5;
        let eig = sym.symmetric_eigen();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
        let mut vectors = DMatrix::zeros(n, n);
        for (dst, &src) in order.iter().enumerate() {
            vectors.set_column(dst, &eig.eigenvectors.column(src));
        }
        Self { values, vectors }
    }

    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn max(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    /// `U f(Λ) Uᵀ`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let n = self.values.len();
        let mut scaled = self.vectors.clone();
        for j in 0..n {
            let fj = f(self.values[j]);
            scaled.column_mut(j).scale_mut(fj);
        }
        scaled * self.vectors.transpose()
    }
}

pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..m.nrows() {
        for j in 0..i {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn require_square(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::InvalidInput(format!(
            "{what} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

/// Rejects non-symmetric or non-positive-definite input, naming the offending eigenvalue.
pub fn require_spd(m: &DMatrix<f64>, what: &str) -> Result<SymEigen> {
    require_square(m, what)?;
    let scale = m.amax().max(1.0);
    let asym = max_asymmetry(m);
    if asym > 1e-12 * scale {
        return Err(Error::NotSymmetric {
            what: what.to_string(),
            asymmetry: asym,
        });
    }
    let eig = SymEigen::new(m);
    for (index, &ev) in eig.values.iter().enumerate() {
        if ev <= 0.0 || !ev.is_finite() {
            return Err(Error::NotPositiveDefinite {
                what: what.to_string(),
                index,
                eigenvalue: ev,
            });
        }
    }
    Ok(eig)
}

/// Square root of a positive-semidefinite matrix, eigenvalues clamped at zero.
pub fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    SymEigen::new(m).map(|v| v.max(0.0).sqrt())
}

pub fn inverse_spd(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = require_spd(m, what)?;
    Ok(eig.map(|v| 1.0 / v))
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymEigen::new(m).min()
}

pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymEigen::new(m).max()
}

/// Spectral radius of a symmetric matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    let eig = SymEigen::new(m);
    eig.min().abs().max(eig.max().abs())
}

pub fn operator_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.max()
}

pub fn scalar(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigen_sorted_and_reconstructs() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 1.0]);
        let eig = SymEigen::new(&m);
        assert!(eig.values[0] <= eig.values[1] && eig.values[1] <= eig.values[2]);
        let back = eig.map(|v| v);
        assert!((back - m).amax() < 1e-12);
    }

    #[test]
    fn spd_rejection_names_eigenvalue() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        match require_spd(&m, "C_inf") {
            Err(Error::NotPositiveDefinite { index, eigenvalue, .. }) => {
                assert_eq!(index, 0);
                assert!((eigenvalue + 1.0).abs() < 1e-12);
            }
            other => panic!("unexpected {other:?}"),
        }
        let skew = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(require_spd(&skew, "C"), Err(Error::NotSymmetric { .. })));
    }

    #[test]
    fn sqrt_clamps_roundoff_negatives() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0 - 1e-17]);
        let r = sqrt_psd(&m);
        assert!(r.iter().all(|v| v.is_finite()));
        assert!((&r * &r - &m).amax() < 1e-8);
    }
}
