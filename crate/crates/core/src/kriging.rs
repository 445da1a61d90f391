//! Universal kriging from a fitted spatial linear model.
//!
//! Mean `x₀'β̂ + c₀'Σ⁻¹(Y − Xβ̂)` and variance
//! `C(s₀,s₀) − c₀'Σ⁻¹c₀ + t'(X'Σ⁻¹X)⁻¹t` with `t = x₀ − X'Σ⁻¹c₀`. The
//! variance targets a new noisy observation, so `C(s₀,s₀)` includes the
//! nugget. Ordinary kriging is the intercept-only case and simple kriging the
//! zero-column case.

use faer::linalg::solvers::Solve;
use faer::{Mat, MatRef};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{cross_distances, exp_cov, pairwise_distances, CovarianceSolver};
use crate::data::{Location, Sites};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, column_vector};
use crate::slm::{covariance_solver, CovarianceForm, FittedSlm};

/// Variances below this are reported; anything negative is clamped to zero.
pub const NEGATIVE_VARIANCE_TOLERANCE: f64 = -1e-10;

const CHUNK: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IntervalLevel {
    P90,
    P95,
}

impl IntervalLevel {
    pub fn z(&self) -> f64 {
        match self {
            IntervalLevel::P90 => 1.645,
            IntervalLevel::P95 => 1.960,
        }
    }

    pub fn level(&self) -> f64 {
        match self {
            IntervalLevel::P90 => 0.90,
            IntervalLevel::P95 => 0.95,
        }
    }

    /// Lower and upper quantile probabilities of the central interval.
    pub fn tails(&self) -> (f64, f64) {
        match self {
            IntervalLevel::P90 => (0.05, 0.95),
            IntervalLevel::P95 => (0.025, 0.975),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionResult {
    pub mean: f64,
    pub variance: f64,
}

impl PredictionResult {
    pub fn se(&self) -> f64 {
        self.variance.sqrt()
    }

    /// `mean ± z · se`.
    pub fn interval(&self, level: IntervalLevel) -> (f64, f64) {
        let h = level.z() * self.se();
        (self.mean - h, self.mean + h)
    }
}

/// Factorizations shared by every prediction from one model.
pub struct KrigingSystem<'a> {
    model: &'a FittedSlm,
    solver: CovarianceSolver,
    x: Mat<f64>,
    beta_cov: Mat<f64>,
    /// `Σ⁻¹(Y − Xβ̂)`.
    weights: Vec<f64>,
    /// `K⁻¹S'` for reduced-rank models.
    kinv_st: Option<Mat<f64>>,
}

impl<'a> KrigingSystem<'a> {
    pub fn new(model: &'a FittedSlm) -> Result<Self> {
        let n = model.n();
        let solver = covariance_solver(&model.locations, &model.form, &model.params)?;
        let x = model.design.to_mat();
        let resid: Vec<f64> = (0..n)
            .map(|i| model.response[i] - (0..model.k()).map(|j| x[(i, j)] * model.beta[j]).sum::<f64>())
            .collect();
        let w = solver.solve(column_vector(&resid).as_ref());
        let kinv_st = match &model.form {
            CovarianceForm::Full => None,
            CovarianceForm::Reduced(knots) => {
                let p = &model.params;
                let d_sk = cross_distances(&model.locations, &knots.knots);
                let d_kk = pairwise_distances(&knots.knots);
                let k = Mat::from_fn(d_kk.nrows(), d_kk.ncols(), |i, j| p.spatial(d_kk[(i, j)]));
                let s_t = Mat::from_fn(d_sk.ncols(), d_sk.nrows(), |i, j| p.spatial(d_sk[(j, i)]));
                Some(cholesky(k, "knot covariance K")?.solve(s_t.as_ref()))
            }
        };
        Ok(KrigingSystem {
            model,
            solver,
            x,
            beta_cov: model.beta_cov.to_mat(),
            weights: (0..n).map(|i| w[(i, 0)]).collect(),
            kinv_st,
        })
    }

    /// Cross covariances `c(s₀)` as columns (n × m) and prior variances `C(s₀,s₀)`.
    fn cross_covariance(&self, targets: &[Location]) -> (Mat<f64>, Vec<f64>) {
        let p = &self.model.params;
        match (&self.kinv_st, &self.model.form) {
            (Some(kinv_st), CovarianceForm::Reduced(knots)) => {
                let s0 = Mat::from_fn(targets.len(), knots.len(), |i, j| p.spatial(targets[i].distance(&knots.knots[j])));
                // c₀ = S K⁻¹ s₀; the prior variance stays at the full sill
                let c = kinv_st.transpose() * s0.transpose();
                let c00 = vec![p.sill(); targets.len()];
                (c, c00)
            }
            _ => {
                let locs = &self.model.locations;
                let c = Mat::from_fn(locs.len(), targets.len(), |i, m| exp_cov(locs[i].distance(&targets[m]), p));
                (c, vec![p.sill(); targets.len()])
            }
        }
    }

    fn predict_chunk(&self, targets: &[Location], x0: MatRef<'_, f64>) -> Vec<PredictionResult> {
        let k = self.model.k();
        let (c, c00) = self.cross_covariance(targets);
        let a = self.solver.solve(c.as_ref());
        let xt_a = self.x.transpose() * a.as_ref();
        (0..targets.len())
            .map(|m| {
                let n = c.nrows();
                let mut mean = (0..k).map(|j| x0[(m, j)] * self.model.beta[j]).sum::<f64>();
                let mut quad = 0.0;
                for i in 0..n {
                    mean += c[(i, m)] * self.weights[i];
                    quad += c[(i, m)] * a[(i, m)];
                }
                let t: Vec<f64> = (0..k).map(|j| x0[(m, j)] - xt_a[(j, m)]).collect();
                let mut lev = 0.0;
                for i in 0..k {
                    for j in 0..k {
                        lev += t[i] * self.beta_cov[(i, j)] * t[j];
                    }
                }
                let mut variance = c00[m] - quad + lev.max(0.0);
                if variance < NEGATIVE_VARIANCE_TOLERANCE {
                    log::warn!("kriging variance {variance:e} below tolerance; clamped to 0");
                }
                if variance < 0.0 {
                    variance = 0.0;
                }
                PredictionResult { mean, variance }
            })
            .collect()
    }

    /// Predictions for each target row given its design row in `x0`.
    pub fn predict(&self, targets: &[Location], x0: MatRef<'_, f64>) -> Result<Vec<PredictionResult>> {
        if x0.nrows() != targets.len() || x0.ncols() != self.model.k() {
            return Err(Error::input(format!(
                "prediction design is {} x {}, expected {} x {}",
                x0.nrows(),
                x0.ncols(),
                targets.len(),
                self.model.k()
            )));
        }
        if let Some(i) = targets.iter().position(|l| !l.is_finite()) {
            return Err(Error::input(format!("prediction row {}: non-finite coordinates", i + 1)));
        }
        let starts: Vec<usize> = (0..targets.len()).step_by(CHUNK).collect();
        let parts: Vec<Vec<PredictionResult>> = starts
            .par_iter()
            .map(|&s| {
                let e = (s + CHUNK).min(targets.len());
                self.predict_chunk(&targets[s..e], x0.subrows(s, e - s))
            })
            .collect();
        Ok(parts.into_iter().flatten().collect())
    }
}

/// Universal-kriging prediction at one site with design row `x0`.
pub fn uk_predict(model: &FittedSlm, location: Location, x0: &[f64]) -> Result<PredictionResult> {
    let row = Mat::from_fn(1, x0.len(), |_, j| x0[j]);
    Ok(KrigingSystem::new(model)?.predict(&[location], row.as_ref())?[0])
}

/// Ordinary kriging; the model must be intercept-only.
pub fn ok_predict(model: &FittedSlm, location: Location) -> Result<PredictionResult> {
    if !model.recipe.is_intercept_only() {
        return Err(Error::input("ordinary kriging requires an intercept-only model"));
    }
    uk_predict(model, location, &[1.0])
}

/// Predictions at every site of `sites`, with the design built from the
/// model's recipe. Factorizations are shared across rows.
pub fn batch_predict(model: &FittedSlm, sites: &Sites) -> Result<Vec<PredictionResult>> {
    let x0 = model.recipe.build(sites)?;
    KrigingSystem::new(model)?.predict(&sites.locations, x0.as_ref())
}
