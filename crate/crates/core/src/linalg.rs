//! Dense linear-algebra helpers on top of `faer`.

use faer::linalg::solvers::Llt;
use faer::{Mat, MatRef, Side};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative diagonal jitter added once when a covariance factorization fails.
pub const JITTER_SCALE: f64 = 1e-10;

/// Condition-number threshold above which design columns count as aliased.
pub const ALIAS_CONDITION: f64 = 1e10;

/// Cholesky factorization of a symmetric positive definite matrix (only the
/// lower triangle is read). On failure, `1e-10 * trace / n` is added to the
/// diagonal and the factorization retried once.
pub fn cholesky(mut m: Mat<f64>, what: &str) -> Result<Llt<f64>> {
    if let Ok(llt) = m.llt(Side::Lower) {
        return Ok(llt);
    }
    let n = m.nrows();
    if n == 0 {
        return Err(Error::singular(format!("{what}: empty matrix")));
    }
    let trace: f64 = (0..n).map(|i| m[(i, i)]).sum();
    let jitter = JITTER_SCALE * trace / n as f64;
    if !(jitter > 0.0) {
        return Err(Error::singular(format!("{what}: non-positive trace")));
    }
    for i in 0..n {
        m[(i, i)] += jitter;
    }
    m.llt(Side::Lower)
        .map_err(|_| Error::singular(format!("{what}: Cholesky failed after diagonal jitter {jitter:e}")))
}

/// `log|A|` from a Cholesky factor of `A`.
pub fn llt_log_det(llt: &Llt<f64>) -> f64 {
    let l = llt.L();
    2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
}

/// Solves `L x = b` in place for the lower Cholesky factor.
pub fn whiten_in_place(llt: &Llt<f64>, b: &mut Mat<f64>) {
    llt.L().solve_lower_triangular_in_place(b.as_mut());
}

/// 2-norm condition number of `x` after scaling every column to unit length.
/// A zero column gives `f64::INFINITY`.
pub fn scaled_condition_number(x: MatRef<'_, f64>) -> f64 {
    let (n, k) = (x.nrows(), x.ncols());
    if k == 0 {
        return 1.0;
    }
    if n < k {
        return f64::INFINITY;
    }
    let mut scaled = x.to_owned();
    for j in 0..k {
        let norm = scaled.col(j).norm_l2();
        if norm == 0.0 || !norm.is_finite() {
            return f64::INFINITY;
        }
        for i in 0..n {
            scaled[(i, j)] /= norm;
        }
    }
    match scaled.singular_values() {
        Ok(sv) => {
            let max = sv.iter().cloned().fold(0.0_f64, f64::max);
            let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
            if min <= 0.0 {
                f64::INFINITY
            } else {
                max / min
            }
        }
        Err(_) => f64::INFINITY,
    }
}

/// Indices of columns kept when scanning left to right and skipping every
/// column that would push the scaled condition number above
/// [`ALIAS_CONDITION`]. Aliased sets therefore lose their rightmost members.
pub fn non_aliased_columns(x: MatRef<'_, f64>) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::with_capacity(x.ncols());
    for j in 0..x.ncols() {
        let mut trial = kept.clone();
        trial.push(j);
        if scaled_condition_number(select_columns(x, &trial).as_ref()) <= ALIAS_CONDITION {
            kept = trial;
        }
    }
    kept
}

pub fn select_columns(x: MatRef<'_, f64>, cols: &[usize]) -> Mat<f64> {
    Mat::from_fn(x.nrows(), cols.len(), |i, j| x[(i, cols[j])])
}

pub fn select_rows(x: MatRef<'_, f64>, rows: &[usize]) -> Mat<f64> {
    Mat::from_fn(rows.len(), x.ncols(), |i, j| x[(rows[i], j)])
}

pub fn column_vector(v: &[f64]) -> Mat<f64> {
    Mat::from_fn(v.len(), 1, |i, _| v[i])
}

pub fn column_to_vec(m: &Mat<f64>, j: usize) -> Vec<f64> {
    (0..m.nrows()).map(|i| m[(i, j)]).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-major matrix used for (de)serialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub data: Vec<f64>,
}

impl DenseMatrix {
    pub fn from_mat(m: MatRef<'_, f64>) -> Self {
        let mut data = Vec::with_capacity(m.nrows() * m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        DenseMatrix {
            nrows: m.nrows(),
            ncols: m.ncols(),
            data,
        }
    }

    pub fn to_mat(&self) -> Mat<f64> {
        Mat::from_fn(self.nrows, self.ncols, |i, j| self.data[i * self.ncols + j])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.ncols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.ncols..(i + 1) * self.ncols]
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.data.len() != self.nrows * self.ncols {
            return Err(Error::ModelFormat(format!(
                "matrix declares {}x{} but holds {} values",
                self.nrows,
                self.ncols,
                self.data.len()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_log_det_matches_product_of_pivots() {
        let m = Mat::from_fn(2, 2, |i, j| if i == j { 4.0 } else { 1.0 });
        let llt = cholesky(m, "test").unwrap();
        assert!((llt_log_det(&llt) - 15.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn singular_matrix_survives_only_with_jitter() {
        // rank one: [[1,1],[1,1]]; jitter makes it barely positive definite
        let m = Mat::from_fn(2, 2, |_, _| 1.0);
        assert!(cholesky(m, "rank one").is_ok());
        let neg = Mat::from_fn(2, 2, |i, j| if i == j { -1.0 } else { 0.0 });
        assert!(matches!(cholesky(neg, "negative"), Err(Error::Singular(_))));
    }

    #[test]
    fn duplicate_column_is_dropped_rightmost() {
        let x = Mat::from_fn(5, 3, |i, j| match j {
            0 => 1.0,
            _ => i as f64,
        });
        assert_eq!(non_aliased_columns(x.as_ref()), vec![0, 1]);
    }

    #[test]
    fn dense_matrix_round_trip() {
        let m = Mat::from_fn(2, 3, |i, j| (i * 3 + j) as f64);
        let d = DenseMatrix::from_mat(m.as_ref());
        assert_eq!(d.data, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(d.to_mat(), m);
    }
}
