//! Random forest regression kriging: forest mean plus simple kriging of the
//! forest residuals under a zero-mean exponential model fitted by ML.
//!
//! Interval variances are the simple-kriging variances of the residual field
//! and ignore forest uncertainty.

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::data::{Location, Sites, SpatialDataset};
use crate::error::{Error, Result};
use crate::forest::{fit_forest, oob_predictions, rf_predict, rf_predict_all, ForestModel, ForestOptions, Features};
use crate::kriging::{KrigingSystem, PredictionResult};
use crate::slm::{estimate_covariance, FitOptions, FittedSlm, Method, RankMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    /// `y − rf_predict(x)` using every tree.
    #[default]
    InSample,
    /// `y` minus the out-of-bag prediction; rows never out of bag fall back
    /// to the in-sample residual.
    OutOfBag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RfrkOptions {
    pub forest: ForestOptions,
    pub residuals: ResidualMode,
    /// Residual covariance fit; method and rank are forced to ML, full rank.
    pub fit: FitOptions,
}

impl Default for RfrkOptions {
    fn default() -> Self {
        RfrkOptions {
            forest: ForestOptions::default(),
            residuals: ResidualMode::InSample,
            fit: FitOptions::ml(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RfrkModel {
    pub forest: ForestModel,
    /// Zero-mean model of the residuals; its `response` holds the residuals.
    pub residual_model: FittedSlm,
    pub residual_mode: ResidualMode,
    pub converged: bool,
}

impl RfrkModel {
    pub fn residuals(&self) -> &[f64] {
        &self.residual_model.response
    }
}

pub fn fit_rfrk(dataset: &SpatialDataset, options: &RfrkOptions) -> Result<RfrkModel> {
    let x = Features::from_sites(&dataset.sites);
    let forest = fit_forest(&x, &dataset.response, &options.forest)?;
    fit_rfrk_with_forest(forest, dataset, options)
}

/// Residual kriging on top of an already fitted forest.
pub fn fit_rfrk_with_forest(forest: ForestModel, dataset: &SpatialDataset, options: &RfrkOptions) -> Result<RfrkModel> {
    let fitted = rf_predict_all(&forest, &forest.features)?;
    let prediction = match options.residuals {
        ResidualMode::InSample => fitted,
        ResidualMode::OutOfBag => oob_predictions(&forest)
            .into_iter()
            .zip(fitted)
            .map(|(o, f)| if o.is_nan() { f } else { o })
            .collect(),
    };
    let residuals: Vec<f64> = dataset.response.iter().zip(&prediction).map(|(y, p)| y - p).collect();
    let opts = FitOptions {
        method: Method::Ml,
        rank_mode: RankMode::Full,
        knots: None,
        ..options.fit.clone()
    };
    let (fit, converged) = match estimate_covariance(&residuals, dataset.locations(), &opts) {
        Ok(f) => (f, true),
        Err(Error::NonConvergence { best, .. }) => {
            log::warn!("residual covariance fit did not converge; keeping best-so-far parameters");
            (*best, false)
        }
        Err(e) => return Err(e),
    };
    Ok(RfrkModel {
        forest,
        residual_model: fit.model,
        residual_mode: options.residuals,
        converged,
    })
}

/// `rf(x₀) + c₀'Σ⁻¹e` with simple-kriging variance `C(s₀,s₀) − c₀'Σ⁻¹c₀`.
pub fn rfrk_predict(model: &RfrkModel, location: Location, row: &[f64]) -> Result<PredictionResult> {
    let rf = rf_predict(&model.forest, row)?;
    let sk = KrigingSystem::new(&model.residual_model)?.predict(&[location], Mat::zeros(1, 0).as_ref())?[0];
    Ok(PredictionResult {
        mean: rf + sk.mean,
        variance: sk.variance,
    })
}

pub fn rfrk_predict_batch(model: &RfrkModel, sites: &Sites) -> Result<Vec<PredictionResult>> {
    let x = model.forest.features.conform(sites)?;
    let rf = rf_predict_all(&model.forest, &x)?;
    let sk = KrigingSystem::new(&model.residual_model)?.predict(&sites.locations, Mat::zeros(sites.len(), 0).as_ref())?;
    Ok(rf
        .into_iter()
        .zip(sk)
        .map(|(m, s)| PredictionResult {
            mean: m + s.mean,
            variance: s.variance,
        })
        .collect())
}
