//! Ordinary least squares with Gaussian AIC, used by the transformation
//! search, stepwise selection and the non-spatial LM baseline.

use faer::linalg::solvers::{Qr, SolveLstsq};
use faer::{Mat, MatRef};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{column_vector, scaled_condition_number, ALIAS_CONDITION};

/// Relative floor applied to the residual sum of squares before taking logs.
pub const RSS_FLOOR: f64 = 1e-12;

/// Gaussian log-likelihood AIC of a least-squares fit with `k` coefficients:
/// `n (log 2π + 1) + n log(RSS/n) + 2 (k + 1)`, the `+1` counting the error
/// variance. RSS is floored at `1e-12 · var(y) · n`.
pub fn gaussian_aic(rss: f64, n: usize, k: usize, var_y: f64) -> f64 {
    let nf = n as f64;
    let floor = RSS_FLOOR * var_y * nf;
    let rss = if rss > floor { rss } else { floor.max(f64::MIN_POSITIVE) };
    nf * ((2.0 * std::f64::consts::PI).ln() + 1.0) + nf * (rss / nf).ln() + 2.0 * (k as f64 + 1.0)
}

/// Population variance (divisor n).
pub fn variance(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsFit {
    pub beta: Vec<f64>,
    pub rss: f64,
    pub n: usize,
    /// `(X'X)⁻¹`, row-major `k x k`.
    pub xtx_inv: Vec<f64>,
    pub var_y: f64,
}

impl OlsFit {
    /// Least squares via QR. Fails when the column-scaled design has
    /// condition number above `1e10` or fewer rows than columns.
    pub fn fit(x: MatRef<'_, f64>, y: &[f64]) -> Result<Self> {
        let (n, k) = (x.nrows(), x.ncols());
        if y.len() != n {
            return Err(Error::input(format!("{} responses for a {n}-row design", y.len())));
        }
        if k == 0 {
            return Ok(OlsFit {
                beta: vec![],
                rss: y.iter().map(|v| v * v).sum(),
                n,
                xtx_inv: vec![],
                var_y: variance(y),
            });
        }
        if n < k || scaled_condition_number(x) > ALIAS_CONDITION {
            return Err(Error::singular(format!("design ({n} x {k}) is rank deficient")));
        }
        let qr = Qr::new(x);
        let beta_m = qr.solve_lstsq(column_vector(y));
        let beta: Vec<f64> = (0..k).map(|j| beta_m[(j, 0)]).collect();
        let fitted = x * beta_m.as_ref();
        let rss = (0..n).map(|i| (y[i] - fitted[(i, 0)]).powi(2)).sum();

        let r = qr.thin_R();
        let mut rinv = Mat::<f64>::identity(k, k);
        r.solve_upper_triangular_in_place(rinv.as_mut());
        let cov = rinv.as_ref() * rinv.transpose();
        let mut xtx_inv = Vec::with_capacity(k * k);
        for i in 0..k {
            for j in 0..k {
                xtx_inv.push(cov[(i, j)]);
            }
        }
        Ok(OlsFit {
            beta,
            rss,
            n,
            xtx_inv,
            var_y: variance(y),
        })
    }

    pub fn k(&self) -> usize {
        self.beta.len()
    }

    pub fn aic(&self) -> f64 {
        gaussian_aic(self.rss, self.n, self.k(), self.var_y)
    }

    /// Unbiased residual variance `RSS / (n − k)`.
    pub fn sigma2(&self) -> f64 {
        let df = self.n.saturating_sub(self.k()).max(1);
        self.rss / df as f64
    }

    pub fn predict_mean(&self, x0: &[f64]) -> f64 {
        x0.iter().zip(&self.beta).map(|(a, b)| a * b).sum()
    }

    /// Leverage term `x0' (X'X)⁻¹ x0`.
    pub fn leverage(&self, x0: &[f64]) -> f64 {
        let k = self.k();
        let mut acc = 0.0;
        for i in 0..k {
            for j in 0..k {
                acc += x0[i] * self.xtx_inv[i * k + j] * x0[j];
            }
        }
        acc
    }

    /// Predictive variance for a new observation, `σ̂² (1 + x0'(X'X)⁻¹x0)`.
    pub fn predict_variance(&self, x0: &[f64]) -> f64 {
        self.sigma2() * (1.0 + self.leverage(x0))
    }

    pub fn t_stats(&self) -> Vec<f64> {
        let k = self.k();
        let s2 = self.sigma2();
        (0..k)
            .map(|j| self.beta[j] / (s2 * self.xtx_inv[j * k + j]).sqrt())
            .collect()
    }
}
