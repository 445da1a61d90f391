//! The model families compared by cross-validation and the CLI, each as a
//! fit-then-predict pipeline producing means and 90%/95% intervals.

use std::fmt;
use std::str::FromStr;

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::data::{Sites, SpatialDataset};
use crate::design::DesignRecipe;
use crate::error::{Error, Result};
use crate::forest::{fit_forest, qrf_intervals, ForestModel, ForestOptions, Features};
use crate::kriging::{batch_predict, IntervalLevel, PredictionResult};
use crate::lm::{variance, OlsFit};
use crate::rfrk::{fit_rfrk_with_forest, rfrk_predict_batch, ResidualMode, RfrkModel, RfrkOptions};
use crate::selection::{prune_slm, stepwise_lm, PruneOptions, SelectionTrace};
use crate::slm::{accept_nonconverged, fit_slm, FitOptions, Method, RankMode, SlmFit};
use crate::transform::{select_all, TransformOptions, TransformSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Training mean with a Gaussian interval; a reference baseline.
    Mean,
    Ok,
    Lm,
    Slm,
    LmTf,
    SlmTf,
    Rf,
    Rfrk,
}

impl ModelKind {
    pub const TABLE: [ModelKind; 7] = [
        ModelKind::Ok,
        ModelKind::Lm,
        ModelKind::Slm,
        ModelKind::LmTf,
        ModelKind::SlmTf,
        ModelKind::Rf,
        ModelKind::Rfrk,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            ModelKind::Mean => "Mean",
            ModelKind::Ok => "OK",
            ModelKind::Lm => "LM",
            ModelKind::Slm => "SLM",
            ModelKind::LmTf => "LM-TF",
            ModelKind::SlmTf => "SLM-TF",
            ModelKind::Rf => "RF",
            ModelKind::Rfrk => "RFRK",
        }
    }

    fn transforms(&self) -> bool {
        matches!(self, ModelKind::LmTf | ModelKind::SlmTf)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "mean" => ModelKind::Mean,
            "ok" => ModelKind::Ok,
            "lm" => ModelKind::Lm,
            "slm" => ModelKind::Slm,
            "lm-tf" => ModelKind::LmTf,
            "slm-tf" => ModelKind::SlmTf,
            "rf" => ModelKind::Rf,
            "rfrk" => ModelKind::Rfrk,
            other => return Err(Error::input(format!("unknown model `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOptions {
    pub seed: u64,
    pub transform: TransformOptions,
    /// Knots for the reduced-rank pruning phase.
    pub knots: Option<usize>,
    pub literal_tstat: bool,
    pub fit: FitOptions,
    pub forest: ForestOptions,
    pub residuals: ResidualMode,
    /// Skip transformation search and selection and fit this recipe as is.
    pub fixed_recipe: Option<DesignRecipe>,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            seed: 0,
            transform: TransformOptions::default(),
            knots: None,
            literal_tstat: false,
            fit: FitOptions::default(),
            forest: ForestOptions::default(),
            residuals: ResidualMode::InSample,
            fixed_recipe: None,
        }
    }
}

impl PipelineOptions {
    fn fit_options(&self) -> FitOptions {
        FitOptions {
            seed: self.seed,
            ..self.fit.clone()
        }
    }

    fn forest_options(&self) -> ForestOptions {
        ForestOptions {
            seed: self.seed,
            ..self.forest.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FittedModel {
    Mean { mean: f64, variance: f64, n: usize },
    Lm { recipe: DesignRecipe, fit: OlsFit },
    Slm(Box<SlmFit>),
    Rf(Box<ForestModel>),
    Rfrk(Box<RfrkModel>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineFit {
    pub kind: ModelKind,
    pub model: FittedModel,
    pub transforms: Vec<TransformSpec>,
    pub stepwise: SelectionTrace,
    pub pruning: SelectionTrace,
    pub converged: bool,
}

impl PipelineFit {
    /// Parameter count: coefficients plus 3 covariance parameters for the
    /// spatial models, plus the error variance for the LM; none for forests.
    pub fn k_params(&self) -> Option<usize> {
        match &self.model {
            FittedModel::Mean { .. } => Some(2),
            FittedModel::Lm { fit, .. } => Some(fit.k() + 1),
            FittedModel::Slm(f) => Some(f.model.k() + 3),
            FittedModel::Rf(_) | FittedModel::Rfrk(_) => None,
        }
    }

    pub fn recipe(&self) -> Option<&DesignRecipe> {
        match &self.model {
            FittedModel::Lm { recipe, .. } => Some(recipe),
            FittedModel::Slm(f) => Some(&f.model.recipe),
            _ => None,
        }
    }
}

/// Mean, optional variance, and the 90% and 95% intervals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub mean: f64,
    pub variance: Option<f64>,
    pub lower90: f64,
    pub upper90: f64,
    pub lower95: f64,
    pub upper95: f64,
}

impl Prediction {
    pub fn gaussian(p: PredictionResult) -> Self {
        let (lower90, upper90) = p.interval(IntervalLevel::P90);
        let (lower95, upper95) = p.interval(IntervalLevel::P95);
        Prediction {
            mean: p.mean,
            variance: Some(p.variance),
            lower90,
            upper90,
            lower95,
            upper95,
        }
    }

    pub fn interval(&self, level: IntervalLevel) -> (f64, f64) {
        match level {
            IntervalLevel::P90 => (self.lower90, self.upper90),
            IntervalLevel::P95 => (self.lower95, self.upper95),
        }
    }
}

fn slm_fit_with_flag(result: Result<SlmFit>) -> Result<(SlmFit, bool)> {
    match result {
        Ok(f) => Ok((f, true)),
        Err(e @ Error::NonConvergence { .. }) => accept_nonconverged(Err(e)).map(|f| (f, false)),
        Err(e) => Err(e),
    }
}

/// The design recipe the linear pipelines of `kind` arrive at on `dataset`:
/// optional transformation search, then stepwise selection, then (for the
/// spatial kinds) pruning.
pub fn select_recipe(kind: ModelKind, dataset: &SpatialDataset, options: &PipelineOptions) -> Result<DesignRecipe> {
    Ok(fit_pipeline(kind, dataset, options)?
        .recipe()
        .cloned()
        .unwrap_or_else(DesignRecipe::intercept_only))
}

pub fn fit_pipeline(kind: ModelKind, dataset: &SpatialDataset, options: &PipelineOptions) -> Result<PipelineFit> {
    let mut out = PipelineFit {
        kind,
        model: FittedModel::Mean {
            mean: 0.0,
            variance: 0.0,
            n: 0,
        },
        transforms: vec![],
        stepwise: SelectionTrace::default(),
        pruning: SelectionTrace::default(),
        converged: true,
    };
    let y = &dataset.response;
    match kind {
        ModelKind::Mean => {
            let n = y.len();
            let v = variance(y) * n as f64 / (n.max(2) - 1) as f64;
            out.model = FittedModel::Mean {
                mean: y.iter().sum::<f64>() / n as f64,
                variance: v,
                n,
            };
        }
        ModelKind::Ok => {
            let recipe = DesignRecipe::intercept_only();
            let (fit, ok) = slm_fit_with_flag(fit_slm(dataset, &recipe, &full_reml(options)))?;
            out.converged = ok;
            out.model = FittedModel::Slm(Box::new(fit));
        }
        ModelKind::Lm | ModelKind::LmTf => {
            let recipe = match &options.fixed_recipe {
                Some(r) => r.clone(),
                None => {
                    let start = initial_recipe(kind, dataset, options, &mut out);
                    let (r, trace) = stepwise_lm(dataset, &start)?;
                    out.stepwise = trace;
                    r
                }
            };
            let x = recipe.build(&dataset.sites)?;
            let fit = OlsFit::fit(x.as_ref(), y)?;
            out.model = FittedModel::Lm { recipe, fit };
        }
        ModelKind::Slm | ModelKind::SlmTf => {
            let (fit, ok) = match &options.fixed_recipe {
                Some(r) => slm_fit_with_flag(fit_slm(dataset, r, &full_reml(options)))?,
                None => {
                    let start = initial_recipe(kind, dataset, options, &mut out);
                    let (r, trace) = stepwise_lm(dataset, &start)?;
                    out.stepwise = trace;
                    let prune = PruneOptions {
                        literal_tstat: options.literal_tstat,
                        knots: options.knots,
                        fit: full_reml(options),
                    };
                    let (fit, trace) = prune_slm(dataset, &r, &prune)?;
                    out.pruning = trace;
                    (fit.clone(), fit.diagnostics.converged)
                }
            };
            out.converged = ok;
            out.model = FittedModel::Slm(Box::new(fit));
        }
        ModelKind::Rf => {
            let x = Features::from_sites(&dataset.sites);
            out.model = FittedModel::Rf(Box::new(fit_forest(&x, y, &options.forest_options())?));
        }
        ModelKind::Rfrk => {
            let x = Features::from_sites(&dataset.sites);
            let forest = fit_forest(&x, y, &options.forest_options())?;
            let rfrk = fit_rfrk_with_forest(forest, dataset, &rfrk_options(options))?;
            out.converged = rfrk.converged;
            out.model = FittedModel::Rfrk(Box::new(rfrk));
        }
    }
    Ok(out)
}

pub(crate) fn rfrk_options(options: &PipelineOptions) -> RfrkOptions {
    RfrkOptions {
        forest: options.forest_options(),
        residuals: options.residuals,
        fit: FitOptions {
            method: Method::Ml,
            rank_mode: RankMode::Full,
            ..options.fit_options()
        },
    }
}

fn full_reml(options: &PipelineOptions) -> FitOptions {
    FitOptions {
        method: Method::Reml,
        rank_mode: RankMode::Full,
        knots: None,
        ..options.fit_options()
    }
}

fn initial_recipe(kind: ModelKind, dataset: &SpatialDataset, options: &PipelineOptions, out: &mut PipelineFit) -> DesignRecipe {
    if kind.transforms() {
        let (recipe, specs) = select_all(dataset, &options.transform);
        out.transforms = specs;
        recipe
    } else {
        DesignRecipe::untransformed(&dataset.sites)
    }
}

pub fn predict_pipeline(fit: &PipelineFit, sites: &Sites) -> Result<Vec<Prediction>> {
    match &fit.model {
        FittedModel::Mean { mean, variance, n } => {
            let v = variance * (1.0 + 1.0 / *n as f64);
            Ok(vec![
                Prediction::gaussian(PredictionResult {
                    mean: *mean,
                    variance: v
                });
                sites.len()
            ])
        }
        FittedModel::Lm { recipe, fit } => {
            let x: Mat<f64> = recipe.build(sites)?;
            Ok((0..sites.len())
                .map(|i| {
                    let row: Vec<f64> = (0..x.ncols()).map(|j| x[(i, j)]).collect();
                    Prediction::gaussian(PredictionResult {
                        mean: fit.predict_mean(&row),
                        variance: fit.predict_variance(&row),
                    })
                })
                .collect())
        }
        FittedModel::Slm(f) => Ok(batch_predict(&f.model, sites)?.into_iter().map(Prediction::gaussian).collect()),
        FittedModel::Rf(forest) => {
            let x = forest.features.conform(sites)?;
            let p90 = qrf_intervals(forest, &x, IntervalLevel::P90.tails())?;
            let p95 = qrf_intervals(forest, &x, IntervalLevel::P95.tails())?;
            Ok(p90
                .into_iter()
                .zip(p95)
                .map(|((mean, lower90, upper90), (_, lower95, upper95))| Prediction {
                    mean,
                    variance: None,
                    lower90,
                    upper90,
                    lower95,
                    upper95,
                })
                .collect())
        }
        FittedModel::Rfrk(m) => Ok(rfrk_predict_batch(m, sites)?.into_iter().map(Prediction::gaussian).collect()),
    }
}
