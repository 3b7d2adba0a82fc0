//! Smallest eigenpairs of a symmetric positive-semidefinite banded matrix by
//! shift-and-invert subspace iteration with Rayleigh–Ritz extraction.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::SymEigen;

const START_SEED: u64 = 0x5eed_0f_f10e;
const EXTRA_VECTORS: usize = 6;
const MAX_ITERATIONS: usize = 5000;

/// Symmetric matrix stored as its lower band: `band[i * (bw + 1) + j] = A[i, i − j]`.
#[derive(Debug, Clone)]
pub struct BandedSym {
    n: usize,
    bw: usize,
    band: Vec<f64>,
}

impl BandedSym {
    pub fn zeros(n: usize, bw: usize) -> Self {
        Self {
            n,
            bw,
            band: vec![0.0; n * (bw + 1)],
        }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        if i - j > self.bw {
            0.0
        } else {
            self.band[i * (self.bw + 1) + (i - j)]
        }
    }

    /// Adds `v` to `A[i, j]` (and its mirror).
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        assert!(i - j <= self.bw, "entry outside band");
        self.band[i * (self.bw + 1) + (i - j)] += v;
    }

    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        let w = self.bw + 1;
        y.fill(0.0);
        for i in 0..self.n {
            let row = &self.band[i * w..(i + 1) * w];
            y[i] += row[0] * x[i];
            for j in 1..=self.bw.min(i) {
                let a = row[j];
                if a != 0.0 {
                    y[i] += a * x[i - j];
                    y[i - j] += a * x[i];
                }
            }
        }
    }

    /// Largest absolute row sum, an upper bound on the spectral radius.
    pub fn norm_bound(&self) -> f64 {
        let mut sums = vec![0.0; self.n];
        let w = self.bw + 1;
        for i in 0..self.n {
            sums[i] += self.band[i * w].abs();
            for j in 1..=self.bw.min(i) {
                let a = self.band[i * w + j].abs();
                sums[i] += a;
                sums[i - j] += a;
            }
        }
        sums.into_iter().fold(0.0, f64::max)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| self.get(i, j))
    }

    /// Cholesky factor of `A + shift I`.
    fn cholesky(&self, shift: f64) -> Result<BandedCholesky> {
        let w = self.bw + 1;
        let mut l = self.band.clone();
        for i in 0..self.n {
            l[i * w] += shift;
        }
        for i in 0..self.n {
            let jmin = i.saturating_sub(self.bw);
            for j in jmin..=i {
                // L[i,j] = (A[i,j] − Σ_k L[i,k] L[j,k]) / L[j,j]
                let mut s = l[i * w + (i - j)];
                let kmin = jmin.max(j.saturating_sub(self.bw));
                for k in kmin..j {
                    s -= l[i * w + (i - k)] * l[j * w + (j - k)];
                }
                if i == j {
                    if s <= 0.0 {
                        return Err(Error::InvalidInput(format!(
                            "shifted matrix is not positive definite at row {i}"
                        )));
                    }
                    l[i * w] = s.sqrt();
                } else {
                    l[i * w + (i - j)] = s / l[j * w];
                }
            }
        }
        Ok(BandedCholesky {
            n: self.n,
            bw: self.bw,
            l,
        })
    }
}

struct BandedCholesky {
    n: usize,
    bw: usize,
    l: Vec<f64>,
}

impl BandedCholesky {
    fn solve_in_place(&self, x: &mut [f64]) {
        let w = self.bw + 1;
        for i in 0..self.n {
            let mut s = x[i];
            for j in i.saturating_sub(self.bw)..i {
                s -= self.l[i * w + (i - j)] * x[j];
            }
            x[i] = s / self.l[i * w];
        }
        for i in (0..self.n).rev() {
            let mut s = x[i];
            for j in i + 1..(i + self.bw + 1).min(self.n) {
                s -= self.l[j * w + (j - i)] * x[j];
            }
            x[i] = s / self.l[i * w];
        }
    }
}

#[derive(Debug, Clone)]
pub struct EigenPairs {
    pub values: Vec<f64>,
    /// Orthonormal columns.
    pub vectors: DMatrix<f64>,
    pub residuals: Vec<f64>,
    pub iterations: usize,
}

/// The `count` smallest eigenpairs of `a`, which must be positive-semidefinite.
pub fn smallest_eigenpairs(a: &BandedSym, count: usize) -> Result<EigenPairs> {
    let n = a.size();
    if count == 0 || count >= n {
        return Err(Error::InvalidInput(format!(
            "requested {count} eigenpairs of a {n}×{n} matrix"
        )));
    }
    let norm = a.norm_bound().max(f64::MIN_POSITIVE);
    if n <= 4 * (count + EXTRA_VECTORS) {
        return dense_fallback(a, count, norm);
    }
    let p = (count + EXTRA_VECTORS).min(n);
    let shift = 1e-6 * norm;
    let chol = a.cholesky(shift)?;
    let tol = 1e-10 * norm;

    let mut rng = ChaCha8Rng::seed_from_u64(START_SEED);
    let mut y = DMatrix::from_fn(n, p, |_, _| rng.random::<f64>() - 0.5);
    let mut col = vec![0.0; n];
    let mut sy = vec![0.0; n];
    let mut residuals = vec![f64::INFINITY; count];
    for iter in 1..=MAX_ITERATIONS {
        for j in 0..p {
            col.copy_from_slice(y.column(j).as_slice());
            chol.solve_in_place(&mut col);
            y.set_column(j, &DVector::from_column_slice(&col));
        }
        let q = y.clone().qr().q();
        let mut aq = DMatrix::zeros(n, p);
        for j in 0..p {
            a.mul_vec(q.column(j).as_slice(), &mut sy);
            aq.set_column(j, &DVector::from_column_slice(&sy));
        }
        let h = q.transpose() * &aq;
        let eig = SymEigen::new(&h);
        y = &q * &eig.vectors;
        let ay = &aq * &eig.vectors;
        for i in 0..count {
            let r = ay.column(i) - y.column(i) * eig.values[i];
            residuals[i] = r.norm();
        }
        if residuals.iter().all(|&r| r <= tol) {
            return Ok(finish(eig.values.as_slice()[..count].to_vec(), y.columns(0, count).into_owned(), residuals, iter));
        }
    }
    Err(Error::EigenNotConverged {
        iterations: MAX_ITERATIONS,
        residuals,
    })
}

fn dense_fallback(a: &BandedSym, count: usize, norm: f64) -> Result<EigenPairs> {
    let dense = a.to_dense();
    let eig = SymEigen::new(&dense);
    let vectors = eig.vectors.columns(0, count).into_owned();
    let residuals = (0..count)
        .map(|i| (&dense * vectors.column(i) - vectors.column(i) * eig.values[i]).norm())
        .collect::<Vec<_>>();
    if residuals.iter().any(|&r| r > 1e-10 * norm) {
        return Err(Error::EigenNotConverged {
            iterations: 1,
            residuals,
        });
    }
    Ok(finish(eig.values.as_slice()[..count].to_vec(), vectors, residuals, 1))
}

/// Fixes signs: the first component larger than `1e−8·max` is made positive.
fn finish(values: Vec<f64>, mut vectors: DMatrix<f64>, residuals: Vec<f64>, iterations: usize) -> EigenPairs {
    for j in 0..vectors.ncols() {
        let big = vectors.column(j).amax();
        if let Some(first) = vectors.column(j).iter().copied().find(|v| v.abs() > 1e-8 * big) {
            if first < 0.0 {
                vectors.column_mut(j).neg_mut();
            }
        }
    }
    EigenPairs {
        values,
        vectors,
        residuals,
        iterations,
    }
}

/// Groups indices of (sorted) eigenvalues closer than `rel · max(|μ|, 1)`.
pub fn clusters(values: &[f64], rel: f64) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = Vec::new();
    for (i, &v) in values.iter().enumerate() {
        match out.last_mut() {
            Some(last) if (v - values[*last.last().unwrap()]).abs() <= rel * v.abs().max(1.0) => last.push(i),
            _ => out.push(vec![i]),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path_laplacian(n: usize) -> BandedSym {
        let mut a = BandedSym::zeros(n, 1);
        for i in 0..n - 1 {
            a.add(i, i, 1.0);
            a.add(i + 1, i + 1, 1.0);
            a.add(i + 1, i, -1.0);
        }
        a
    }

    #[test]
    fn path_laplacian_spectrum() {
        // Neumann path: eigenvalues 2 − 2cos(πk/n)
        let n = 200;
        let a = path_laplacian(n);
        let pairs = smallest_eigenpairs(&a, 5).unwrap();
        for k in 0..5 {
            let exact = 2.0 - 2.0 * (std::f64::consts::PI * k as f64 / n as f64).cos();
            assert!((pairs.values[k] - exact).abs() < 1e-12, "k={k}");
        }
        let gram = pairs.vectors.transpose() * &pairs.vectors;
        assert!((gram - DMatrix::<f64>::identity(5, 5)).amax() < 1e-10);
        for j in 0..5 {
            let first = pairs.vectors.column(j).iter().copied().find(|v| v.abs() > 1e-9).unwrap();
            assert!(first > 0.0);
        }
    }

    #[test]
    fn banded_cholesky_solves() {
        let n = 30;
        let mut a = BandedSym::zeros(n, 3);
        for i in 0..n {
            a.add(i, i, 6.0);
            for j in 1..=3 {
                if i >= j {
                    a.add(i, i - j, -1.0 / j as f64);
                }
            }
        }
        let chol = a.cholesky(0.0).unwrap();
        let x: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let mut b = vec![0.0; n];
        a.mul_vec(&x, &mut b);
        chol.solve_in_place(&mut b);
        for i in 0..n {
            assert!((b[i] - x[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn two_dimensional_band_matches_dense() {
        let m = 12;
        let n = m * m;
        let mut a = BandedSym::zeros(n, m);
        for i in 0..m {
            for j in 0..m {
                let k = i * m + j;
                if j + 1 < m {
                    a.add(k, k, 1.0);
                    a.add(k + 1, k + 1, 1.0);
                    a.add(k + 1, k, -1.0);
                }
                if i + 1 < m {
                    a.add(k, k, 2.0);
                    a.add(k + m, k + m, 2.0);
                    a.add(k + m, k, -2.0);
                }
            }
        }
        let pairs = smallest_eigenpairs(&a, 6).unwrap();
        let dense = SymEigen::new(&a.to_dense());
        for k in 0..6 {
            assert!((pairs.values[k] - dense.values[k]).abs() < 1e-10);
        }
    }

    #[test]
    fn cluster_grouping() {
        let c = clusters(&[0.0, 1.0, 1.0 + 1e-12, 2.0], 1e-8);
        assert_eq!(c, vec![vec![0], vec![1, 2], vec![3]]);
    }
}
