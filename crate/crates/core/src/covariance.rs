//! Covariance decompositions `t ↦ C_t` from `C_0 = 0` to `C_∞`, with first and
//! second time derivatives.
//!
//! Both built-in families are diagonal in a fixed orthonormal basis (the
//! eigenbasis of `C_∞`), so every evaluation is a scalar formula per
//! eigenvalue followed by a change of basis.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, SymEigen};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    /// `C_t = C_∞ − C_∞ e^{−t C_∞⁻¹}`.
    HeatKernel,
    /// `C_t = (A + 1/t)⁻¹` with `A = C_∞⁻¹`.
    PauliVillars,
    /// Sampled `(t, C_t, C_t', C_t'')` rows; queries snap to the nearest node.
    CustomTable,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::HeatKernel => "heat-kernel",
            ScheduleKind::PauliVillars => "pauli-villars",
            ScheduleKind::CustomTable => "custom-table",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "heat-kernel" => Ok(Self::HeatKernel),
            "pauli-villars" => Ok(Self::PauliVillars),
            "custom-table" => Ok(Self::CustomTable),
            other => Err(Error::InvalidInput(format!("unknown schedule kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TableRow {
    pub t: f64,
    pub c: DMatrix<f64>,
    pub c_prime: DMatrix<f64>,
    pub c_second: DMatrix<f64>,
}

/// The schedule evaluated at one time.
#[derive(Debug, Clone)]
pub struct CovarianceAt {
    pub t: f64,
    pub c: DMatrix<f64>,
    pub c_prime: DMatrix<f64>,
    pub c_second: DMatrix<f64>,
    /// `C_∞ − C_t`, computed without cancellation for the built-ins.
    pub gap: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct CovarianceSchedule {
    kind: ScheduleKind,
    c_infinity: DMatrix<f64>,
    /// Eigenbasis of `C_∞` (columns) and its eigenvalues.
    basis: DMatrix<f64>,
    c_inf_eigs: DVector<f64>,
    table: Option<Vec<TableRow>>,
}

impl CovarianceSchedule {
    /// Builds a built-in schedule. For Pauli–Villars, `aux` (if given) must equal `C_∞⁻¹`.
    pub fn new(kind: ScheduleKind, c_infinity: DMatrix<f64>, aux: Option<&DMatrix<f64>>) -> Result<Self> {
        let eig = linalg::require_spd(&c_infinity, "C_inf")?;
        if kind == ScheduleKind::CustomTable {
            return Err(Error::InvalidInput(
                "custom-table schedules are built with CovarianceSchedule::custom".into(),
            ));
        }
        if let (ScheduleKind::PauliVillars, Some(a)) = (kind, aux) {
            let a_expected = eig.map(|v| 1.0 / v);
            if a.shape() != a_expected.shape()
                || (a - &a_expected).amax() > 1e-10 * a_expected.amax().max(1.0)
            {
                return Err(Error::InvalidInput(
                    "Pauli-Villars auxiliary matrix A must equal C_inf^-1".into(),
                ));
            }
        }
        Ok(Self {
            kind,
            c_infinity,
            basis: eig.vectors,
            c_inf_eigs: eig.values,
            table: None,
        })
    }

    pub fn heat_kernel(c_infinity: DMatrix<f64>) -> Result<Self> {
        Self::new(ScheduleKind::HeatKernel, c_infinity, None)
    }

    /// Pauli–Villars schedule from the precision matrix `A` (so `C_∞ = A⁻¹`).
    pub fn pauli_villars(a: &DMatrix<f64>) -> Result<Self> {
        let c_inf = linalg::inverse_spd(a, "A")?;
        Self::new(ScheduleKind::PauliVillars, c_inf, Some(a))
    }

    /// Custom schedule from sampled rows sorted by `t`.
    pub fn custom(c_infinity: DMatrix<f64>, rows: Vec<TableRow>) -> Result<Self> {
        let eig = linalg::require_spd(&c_infinity, "C_inf")?;
        let d = c_infinity.nrows();
        if rows.is_empty() {
            return Err(Error::InvalidInput("custom table has no rows".into()));
        }
        for (i, row) in rows.iter().enumerate() {
            for (m, name) in [(&row.c, "C"), (&row.c_prime, "C'"), (&row.c_second, "C''")] {
                if m.shape() != (d, d) {
                    return Err(Error::DimensionMismatch { expected: d, found: m.nrows() });
                }
                if linalg::max_asymmetry(m) > 1e-10 * m.amax().max(1.0) {
                    return Err(Error::NotSymmetric {
                        what: format!("{name} at row {i}"),
                        asymmetry: linalg::max_asymmetry(m),
                    });
                }
            }
            if i > 0 && row.t <= rows[i - 1].t {
                return Err(Error::NonMonotoneGrid(i));
            }
            if row.t < 0.0 {
                return Err(Error::NegativeTime(row.t));
            }
            if linalg::min_eigenvalue(&row.c) < -1e-10 {
                return Err(Error::InvalidInput(format!("C at row {i} is not positive semidefinite")));
            }
            if linalg::min_eigenvalue(&row.c_prime) < -1e-10 {
                return Err(Error::InvalidInput(format!("C' at row {i} is not positive semidefinite")));
            }
            if i > 0 && linalg::min_eigenvalue(&(&row.c - &rows[i - 1].c)) < -1e-10 {
                return Err(Error::InvalidInput(format!("C_t decreases between rows {} and {i}", i - 1)));
            }
        }
        if rows[0].t == 0.0 && rows[0].c.amax() > 1e-12 {
            return Err(Error::InvalidInput("custom table must have C_0 = 0".into()));
        }
        Ok(Self {
            kind: ScheduleKind::CustomTable,
            c_infinity,
            basis: eig.vectors,
            c_inf_eigs: eig.values,
            table: Some(rows),
        })
    }

    pub fn from_table_file(path: impl AsRef<Path>, c_infinity: DMatrix<f64>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let rows = parse_table(&text, c_infinity.nrows())?;
        Self::custom(c_infinity, rows)
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.c_infinity.nrows()
    }

    pub fn c_infinity(&self) -> &DMatrix<f64> {
        &self.c_infinity
    }

    /// Orthonormal basis diagonalising every `C_t` of a built-in schedule.
    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn table(&self) -> Option<&[TableRow]> {
        self.table.as_deref()
    }

    fn from_diag(&self, diag: impl Iterator<Item = f64>) -> DMatrix<f64> {
        let d = self.dim();
        let mut scaled = self.basis.clone();
        for (j, v) in diag.enumerate().take(d) {
            scaled.column_mut(j).scale_mut(v);
        }
        let m = scaled * self.basis.transpose();
        (&m + m.transpose()) * 0.5
    }

    pub fn eval(&self, t: f64) -> Result<CovarianceAt> {
        if t < 0.0 || t.is_nan() {
            return Err(Error::NegativeTime(t));
        }
        match self.kind {
            ScheduleKind::HeatKernel => {
                let e = &self.c_inf_eigs;
                let decay: Vec<f64> = e.iter().map(|&l| (-t / l).exp()).collect();
                Ok(CovarianceAt {
                    t,
                    c: self.from_diag(e.iter().map(|&l| -l * (-t / l).exp_m1())),
                    c_prime: self.from_diag(decay.iter().copied()),
                    c_second: self.from_diag(e.iter().zip(&decay).map(|(&l, &k)| -k / l)),
                    gap: self.from_diag(e.iter().zip(&decay).map(|(&l, &k)| l * k)),
                })
            }
            ScheduleKind::PauliVillars => {
                // eigenvalues a of A are 1 / eig(C_inf); t = 0 gives the t → 0⁺ limits.
                let a: Vec<f64> = self.c_inf_eigs.iter().map(|&l| 1.0 / l).collect();
                let s: Vec<f64> = a.iter().map(|&ai| 1.0 / (t * ai + 1.0)).collect();
                Ok(CovarianceAt {
                    t,
                    c: self.from_diag(s.iter().map(|&si| t * si)),
                    c_prime: self.from_diag(s.iter().map(|&si| si * si)),
                    c_second: self.from_diag(a.iter().zip(&s).map(|(&ai, &si)| -2.0 * ai * si.powi(3))),
                    gap: self.from_diag(a.iter().zip(&s).map(|(&ai, &si)| si / ai)),
                })
            }
            ScheduleKind::CustomTable => {
                let rows = self.table.as_ref().expect("custom schedule has a table");
                let (lo, hi) = (rows[0].t, rows[rows.len() - 1].t);
                if t < lo || t > hi {
                    return Err(Error::OutsideTableRange { t, lo, hi });
                }
                let idx = rows.partition_point(|r| r.t < t);
                let pick = if idx == 0 {
                    0
                } else if idx == rows.len() || (t - rows[idx - 1].t) <= (rows[idx].t - t) {
                    idx - 1
                } else {
                    idx
                };
                let row = &rows[pick];
                Ok(CovarianceAt {
                    t: row.t,
                    c: row.c.clone(),
                    c_prime: row.c_prime.clone(),
                    c_second: row.c_second.clone(),
                    gap: &self.c_infinity - &row.c,
                })
            }
        }
    }

    /// `(C_∞ − C_t)⁻¹`; fails when the gap is numerically singular.
    pub fn gap_inverse(&self, at: &CovarianceAt) -> Result<DMatrix<f64>> {
        let eig = SymEigen::new(&at.gap);
        if eig.min() < 1e-12 {
            return Err(Error::FlowTimeTooLarge {
                t: at.t,
                eigenvalue: eig.min(),
            });
        }
        match self.kind {
            ScheduleKind::HeatKernel => {
                let e = &self.c_inf_eigs;
                Ok(self.from_diag(e.iter().map(|&l| (at.t / l).exp() / l)))
            }
            ScheduleKind::PauliVillars => {
                let a = self.c_inf_eigs.iter().map(|&l| 1.0 / l);
                Ok(self.from_diag(a.map(|ai| ai * (at.t * ai + 1.0))))
            }
            ScheduleKind::CustomTable => Ok(eig.map(|v| 1.0 / v)),
        }
    }

    /// Spectral radius `|C_t'|`.
    pub fn c_prime_radius(&self, t: f64) -> Result<f64> {
        Ok(linalg::spectral_radius(&self.eval(t)?.c_prime))
    }

    /// `|C_0'|`; equals 1 for both built-in kinds.
    pub fn initial_radius(&self) -> Result<f64> {
        match self.kind {
            ScheduleKind::HeatKernel | ScheduleKind::PauliVillars => Ok(1.0),
            ScheduleKind::CustomTable => {
                let rows = self.table.as_ref().expect("table");
                if rows[0].t != 0.0 {
                    return Err(Error::OutsideTableRange {
                        t: 0.0,
                        lo: rows[0].t,
                        hi: rows[rows.len() - 1].t,
                    });
                }
                Ok(linalg::spectral_radius(&rows[0].c_prime))
            }
        }
    }

    /// Largest time the table (if any) covers.
    pub fn max_time(&self) -> f64 {
        match &self.table {
            Some(rows) => rows[rows.len() - 1].t,
            None => f64::INFINITY,
        }
    }
}

/// Parses the columnar table format: header `t c[i,j]... cp[i,j]... cpp[i,j]...`,
/// row-major flattening, whitespace or comma separated, `#` comments.
pub fn parse_table(text: &str, dim: usize) -> Result<Vec<TableRow>> {
    let mut header: Option<Vec<String>> = None;
    let mut rows = Vec::new();
    let n = dim * dim;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields = split_fields(line);
        if header.is_none() {
            let mut expected = vec!["t".to_string()];
            for prefix in ["c", "cp", "cpp"] {
                for i in 0..dim {
                    for j in 0..dim {
                        expected.push(format!("{prefix}[{i},{j}]"));
                    }
                }
            }
            let got: Vec<String> = fields.iter().map(|s| s.to_string()).collect();
            if got != expected {
                return Err(Error::Parse {
                    line: lineno + 1,
                    message: format!("expected header '{}'", expected.join(" ")),
                });
            }
            header = Some(got);
            continue;
        }
        if fields.len() != 1 + 3 * n {
            return Err(Error::Parse {
                line: lineno + 1,
                message: format!("expected {} columns, found {}", 1 + 3 * n, fields.len()),
            });
        }
        let values: Vec<f64> = fields
            .iter()
            .map(|s| {
                s.parse::<f64>().map_err(|e| Error::Parse {
                    line: lineno + 1,
                    message: format!("'{s}': {e}"),
                })
            })
            .collect::<Result<_>>()?;
        rows.push(TableRow {
            t: values[0],
            c: DMatrix::from_row_slice(dim, dim, &values[1..1 + n]),
            c_prime: DMatrix::from_row_slice(dim, dim, &values[1 + n..1 + 2 * n]),
            c_second: DMatrix::from_row_slice(dim, dim, &values[1 + 2 * n..1 + 3 * n]),
        });
    }
    if header.is_none() {
        return Err(Error::Parse {
            line: 0,
            message: "missing header".into(),
        });
    }
    Ok(rows)
}

/// Splits on whitespace and on commas that are not inside `[...]`.
fn split_fields(line: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut depth = 0usize;
    let mut start = None;
    for (i, ch) in line.char_indices() {
        let sep = ch.is_whitespace() || (ch == ',' && depth == 0);
        match ch {
            '[' => depth += 1,
            ']' => depth = depth.saturating_sub(1),
            _ => {}
        }
        if sep {
            if let Some(s) = start.take() {
                out.push(&line[s..i]);
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push(&line[s..]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use linalg::scalar;

    fn log_grid() -> Vec<f64> {
        (0..=24).map(|i| 10f64.powf(-3.0 + 0.25 * i as f64)).collect()
    }

    #[test]
    fn heat_kernel_scalar_at_ln2() {
        let s = CovarianceSchedule::heat_kernel(scalar(1.0)).unwrap();
        let at = s.eval(2f64.ln()).unwrap();
        assert_relative_eq!(at.c[(0, 0)], 0.5, epsilon = 1e-15);
        assert_relative_eq!(at.c_prime[(0, 0)], 0.5, epsilon = 1e-15);
        assert_relative_eq!(at.c_second[(0, 0)], -0.5, epsilon = 1e-15);
    }

    #[test]
    fn pauli_villars_scalar_at_one() {
        let s = CovarianceSchedule::pauli_villars(&scalar(2.0)).unwrap();
        let at = s.eval(1.0).unwrap();
        assert_relative_eq!(at.c[(0, 0)], 1.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(at.c_prime[(0, 0)], 1.0 / 9.0, epsilon = 1e-15);
        assert_relative_eq!(at.c_second[(0, 0)], -4.0 / 27.0, epsilon = 1e-15);
    }

    #[test]
    fn heat_kernel_starts_at_zero() {
        let s = CovarianceSchedule::heat_kernel(DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0]))).unwrap();
        let at = s.eval(0.0).unwrap();
        assert_eq!(at.c.amax(), 0.0);
        let at1 = s.eval(1.0).unwrap();
        assert_relative_eq!(at1.c_prime[(0, 0)], (-1f64).exp(), epsilon = 1e-15);
        assert_relative_eq!(at1.c_prime[(1, 1)], (-0.5f64).exp(), epsilon = 1e-15);
        assert!(at1.c_prime[(0, 1)].abs() < 1e-15);
    }

    #[test]
    fn pauli_villars_small_time_limit() {
        let s = CovarianceSchedule::pauli_villars(&scalar(2.0)).unwrap();
        let at0 = s.eval(0.0).unwrap();
        assert_eq!(at0.c[(0, 0)], 0.0);
        assert_eq!(at0.c_prime[(0, 0)], 1.0);
        assert_eq!(at0.c_second[(0, 0)], -4.0);
        // closed form at 1e-6 agrees with the series t - A t^2 + A^2 t^3
        let t = 1e-6;
        let at = s.eval(t).unwrap();
        let series = t - 2.0 * t * t + 4.0 * t.powi(3);
        assert_relative_eq!(at.c[(0, 0)], series, max_relative = 1e-12);
        assert_relative_eq!(at.c_prime[(0, 0)], 1.0, epsilon = 1e-5);
    }

    #[test]
    fn pauli_villars_rejects_wrong_aux() {
        let err = CovarianceSchedule::new(ScheduleKind::PauliVillars, scalar(0.5), Some(&scalar(3.0)));
        assert!(err.is_err());
        assert!(CovarianceSchedule::new(ScheduleKind::PauliVillars, scalar(0.5), Some(&scalar(2.0))).is_ok());
    }

    #[test]
    fn rejects_indefinite_c_infinity() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.25]);
        let err = CovarianceSchedule::heat_kernel(m).unwrap_err();
        assert!(err.to_string().contains("-2.5"), "{err}");
    }

    fn schedules() -> Vec<CovarianceSchedule> {
        let c_inf = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]);
        let a = DMatrix::from_row_slice(2, 2, &[2.0, -1.0, -1.0, 2.0]);
        vec![
            CovarianceSchedule::heat_kernel(c_inf).unwrap(),
            CovarianceSchedule::pauli_villars(&a).unwrap(),
        ]
    }

    #[test]
    fn first_order_difference_consistency() {
        for s in schedules() {
            for &t in &log_grid() {
                let at = s.eval(t).unwrap();
                let at2 = s.eval(t).unwrap();
                assert!((at.c_prime.clone() - at2.c_prime).amax() == 0.0);
                for h in [1e-4, 1e-5] {
                    let fwd = s.eval(t + h).unwrap();
                    let fd = (&fwd.c - &at.c) / h;
                    let err = linalg::operator_norm(&(fd - &at.c_prime));
                    let bound = linalg::operator_norm(&at.c_second) * h + 1e-9;
                    assert!(err <= bound, "{:?} t={t} h={h}: {err} > {bound}", s.kind());
                }
                // central differences of C match C' to 1e-6 relative
                let h = 1e-4 * t.max(1e-2);
                let cd = (&s.eval(t + h).unwrap().c - &s.eval(t - h.min(t)).unwrap().c) / (h + h.min(t));
                if t > h {
                    // round-off in the difference quotient is about eps |C| / h
                    let err = (cd - &at.c_prime).amax();
                    let tol = 1e-6 * at.c_prime.amax() + 1e-15 * at.c.amax() / h;
                    assert!(err < tol, "{:?} t={t}: {err} vs {tol}", s.kind());
                }
            }
        }
    }

    #[test]
    fn monotone_and_converging() {
        for s in schedules() {
            let grid = log_grid();
            let mut prev = s.eval(0.0).unwrap().c;
            let mut prev_err = f64::INFINITY;
            for &t in &grid {
                let at = s.eval(t).unwrap();
                assert!(linalg::min_eigenvalue(&(&at.c - &prev)) >= -1e-10);
                assert!(linalg::min_eigenvalue(&at.c_prime) >= -1e-12);
                let err = linalg::operator_norm(&(s.c_infinity() - &at.c));
                assert!(err <= prev_err + 1e-15);
                prev_err = err;
                prev = at.c;
            }
            assert!(prev_err < 2e-3, "{:?}: {prev_err}", s.kind());
            assert_eq!(s.initial_radius().unwrap(), 1.0);
            assert!((s.c_prime_radius(0.0).unwrap() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn pauli_villars_identities() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, -1.0, -1.0, 2.0]);
        let s = CovarianceSchedule::pauli_villars(&a).unwrap();
        let id = DMatrix::<f64>::identity(2, 2);
        for &t in &log_grid() {
            let at = s.eval(t).unwrap();
            let root = linalg::sqrt_psd(&at.c_prime);
            assert!((&root - &at.c / t).amax() < 1e-10, "t={t}");
            let lhs = linalg::inverse_spd(&at.gap, "gap").unwrap();
            let rhs = &a * (&a * t + &id);
            assert!((&lhs - &rhs).amax() <= 1e-10 * rhs.amax(), "t={t}");
            let g = s.gap_inverse(&at).unwrap();
            assert!((&g - &rhs).amax() <= 1e-12 * rhs.amax());
            // C' = C (1/t²) C
            assert!((&at.c_prime - &at.c * &at.c / (t * t)).amax() < 1e-12);
        }
    }

    #[test]
    fn table_parse_and_snap() {
        let text = "# custom\nt c[0,0] cp[0,0] cpp[0,0]\n0 0 1 -1\n0.5, 0.39, 0.6, -0.6\n1 0.63 0.37 -0.37\n";
        let s = CovarianceSchedule::custom(scalar(1.0), parse_table(text, 1).unwrap()).unwrap();
        assert_eq!(s.eval(0.6).unwrap().t, 0.5);
        assert_eq!(s.eval(0.8).unwrap().t, 1.0);
        assert!(matches!(s.eval(1.5), Err(Error::OutsideTableRange { .. })));
        let single = "t c[0,0] cp[0,0] cpp[0,0]\n1 0.5 0.5 -0.5\n";
        let s1 = CovarianceSchedule::custom(scalar(1.0), parse_table(single, 1).unwrap()).unwrap();
        let err = s1.eval(2.0).unwrap_err();
        assert!(err.to_string().contains("outside table range"));
        assert!(parse_table("t c[0,0]\n", 1).is_err());
        assert!(matches!(s.eval(-1.0), Err(Error::NegativeTime(_))));
    }
}
