//! Spatial linear model `Y = Xβ + z + ε` with exponential covariance,
//! estimated by ML or REML.
//!
//! `β` is profiled out by generalized least squares, and the three covariance
//! parameters are found by a restarted Nelder–Mead search over their logs.

use faer::linalg::solvers::Solve;
use faer::{Mat, MatRef};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::covariance::{
    default_knot_count, pairwise_distances, place_knots, reduced_sigma_inverse, sigma_lower_from_distances, CovarianceParams,
    CovarianceSolver, KnotSet, ReducedRankFactors,
};
use crate::covariance::cross_distances;
use crate::data::{Location, SpatialDataset};
use crate::design::DesignRecipe;
use crate::error::{Error, Result};
use crate::linalg::{cholesky, llt_log_det, non_aliased_columns, select_columns, DenseMatrix};
use crate::lm::OlsFit;
use crate::optim::{nelder_mead, NelderMeadOptions};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ml,
    Reml,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankMode {
    Full,
    /// Reduced rank with this many k-means knots.
    Reduced(usize),
}

/// Resolved covariance structure used to evaluate the likelihood.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceForm {
    Full,
    Reduced(KnotSet),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub method: Method,
    pub rank_mode: RankMode,
    pub restarts: usize,
    /// Absolute tolerance on the spread of negative log-likelihood values in
    /// the simplex. Parameters are resolved to `sqrt(tolerance)` in log units.
    pub tolerance: f64,
    pub max_iter: usize,
    pub seed: u64,
    /// Starting parameters; the default heuristic is used when absent.
    pub initial: Option<CovarianceParams>,
    /// Reuse these knots instead of placing new ones in reduced-rank mode.
    pub knots: Option<KnotSet>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            method: Method::Reml,
            rank_mode: RankMode::Full,
            restarts: 3,
            tolerance: 1e-8,
            max_iter: 5000,
            seed: 0,
            initial: None,
            knots: None,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) || self.restarts < 1 || self.max_iter < 1 {
            return Err(Error::input("fit options need tolerance > 0, restarts >= 1, max_iter >= 1"));
        }
        Ok(())
    }

    pub fn ml() -> Self {
        FitOptions {
            method: Method::Ml,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlmDiagnostics {
    /// Objective at the optimum under the fitting method.
    pub neg_log_lik: f64,
    /// ML negative log-likelihood at the fitted parameters.
    pub ml_neg_log_lik: f64,
    /// `2 · ml_neg_log_lik + 2 (k + 3)`.
    pub aic: f64,
    pub effective_range: f64,
    pub nugget_to_sill: f64,
    pub t_stats: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

/// Everything needed to predict from a fitted spatial linear model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedSlm {
    pub recipe: DesignRecipe,
    pub params: CovarianceParams,
    pub method: Method,
    pub form: CovarianceForm,
    pub beta: Vec<f64>,
    /// `(X'Σ⁻¹X)⁻¹`.
    pub beta_cov: DenseMatrix,
    pub locations: Vec<Location>,
    pub response: Vec<f64>,
    /// Training design, `n x k`.
    pub design: DenseMatrix,
    /// Labels of columns removed as aliased before fitting.
    pub dropped_columns: Vec<String>,
}

impl FittedSlm {
    pub fn k(&self) -> usize {
        self.beta.len()
    }

    pub fn n(&self) -> usize {
        self.response.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlmFit {
    pub model: FittedSlm,
    pub diagnostics: SlmDiagnostics,
}

/// `−α log(0.01 · sill / σ²_z)`: distance at which the correlation of the
/// noisy process falls to 0.01. Zero when that is not positive.
pub fn effective_range(params: &CovarianceParams) -> f64 {
    if params.partial_sill <= 0.0 {
        return 0.0;
    }
    let v = -params.range * (0.01 * params.sill() / params.partial_sill).ln();
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

pub fn nugget_to_sill(params: &CovarianceParams) -> f64 {
    params.nugget / params.sill()
}

pub fn slm_aic(ml_neg_log_lik: f64, k: usize) -> f64 {
    2.0 * ml_neg_log_lik + 2.0 * (k as f64 + 3.0)
}

/// Cached distances for repeated likelihood evaluations.
#[derive(Debug, Clone)]
pub(crate) enum Geometry {
    Full { d: Mat<f64> },
    Reduced { d_sk: Mat<f64>, d_kk: Mat<f64> },
}

impl Geometry {
    pub(crate) fn new(locations: &[Location], form: &CovarianceForm) -> Self {
        match form {
            CovarianceForm::Full => Geometry::Full {
                d: pairwise_distances(locations),
            },
            CovarianceForm::Reduced(knots) => Geometry::Reduced {
                d_sk: cross_distances(locations, &knots.knots),
                d_kk: pairwise_distances(&knots.knots),
            },
        }
    }

    pub(crate) fn solver(&self, theta: &CovarianceParams) -> Result<CovarianceSolver> {
        match self {
            Geometry::Full { d } => CovarianceSolver::dense(sigma_lower_from_distances(d.as_ref(), theta)),
            Geometry::Reduced { d_sk, d_kk } => {
                reduced_sigma_inverse(&ReducedRankFactors::from_distances(d_sk.as_ref(), d_kk.as_ref(), theta))
            }
        }
    }
}

/// `Σ⁻¹` solver for the given locations, structure and parameters.
pub fn covariance_solver(locations: &[Location], form: &CovarianceForm, theta: &CovarianceParams) -> Result<CovarianceSolver> {
    Geometry::new(locations, form).solver(theta)
}

pub(crate) struct Profiled {
    pub beta: Vec<f64>,
    pub beta_cov: Mat<f64>,
    pub ml: f64,
    pub reml: f64,
}

impl Profiled {
    fn objective(&self, method: Method) -> f64 {
        match method {
            Method::Ml => self.ml,
            Method::Reml => self.reml,
        }
    }
}

/// GLS profile of `β` plus the ML and REML objectives, all from one
/// `[X Y]' Σ⁻¹ [X Y]` Gram matrix.
pub(crate) fn profile(solver: &CovarianceSolver, x: MatRef<'_, f64>, y: &[f64]) -> Result<Profiled> {
    let (n, k) = (x.nrows(), x.ncols());
    let xy = Mat::from_fn(n, k + 1, |i, j| if j < k { x[(i, j)] } else { y[i] });
    let g = solver.gram(xy.as_ref());
    let gyy = g[(k, k)];
    let base = n as f64 * LN_2PI + solver.log_det();
    if k == 0 {
        let ml = 0.5 * (base + gyy.max(0.0));
        return Ok(Profiled {
            beta: vec![],
            beta_cov: Mat::zeros(0, 0),
            ml,
            reml: ml,
        });
    }
    let gxx = Mat::from_fn(k, k, |i, j| g[(i, j)]);
    let gxy = Mat::from_fn(k, 1, |i, _| g[(i, k)]);
    let g_llt = cholesky(gxx, "X'Σ⁻¹X")?;
    let beta_m = g_llt.solve(gxy.as_ref());
    let beta: Vec<f64> = (0..k).map(|i| beta_m[(i, 0)]).collect();
    let quad = (gyy - (0..k).map(|i| gxy[(i, 0)] * beta[i]).sum::<f64>()).max(0.0);
    let beta_cov = g_llt.solve(Mat::<f64>::identity(k, k).as_ref());
    let ml = 0.5 * (base + quad);
    let reml = ml + 0.5 * (-(k as f64) * LN_2PI + llt_log_det(&g_llt));
    Ok(Profiled {
        beta,
        beta_cov,
        ml,
        reml,
    })
}

/// Negative log-likelihood with `β` profiled out:
/// `½{n log 2π + log|Σ| + r'Σ⁻¹r + c}`, `c = −k log 2π + log|X'Σ⁻¹X|` under
/// REML and `0` under ML.
pub fn neg_log_likelihood(
    theta: &CovarianceParams,
    design: MatRef<'_, f64>,
    response: &[f64],
    locations: &[Location],
    method: Method,
    form: &CovarianceForm,
) -> Result<f64> {
    check_shapes(design, response, locations)?;
    let solver = covariance_solver(locations, form, theta)?;
    Ok(profile(&solver, design, response)?.objective(method))
}

/// `β̂ = (X'Σ⁻¹X)⁻¹X'Σ⁻¹Y` and its covariance `(X'Σ⁻¹X)⁻¹`.
pub fn profile_beta(
    theta: &CovarianceParams,
    design: MatRef<'_, f64>,
    response: &[f64],
    locations: &[Location],
    form: &CovarianceForm,
) -> Result<(Vec<f64>, Mat<f64>)> {
    check_shapes(design, response, locations)?;
    let solver = covariance_solver(locations, form, theta)?;
    match profile(&solver, design, response) {
        Ok(p) => Ok((p.beta, p.beta_cov)),
        Err(Error::Singular(_)) => {
            let kept = non_aliased_columns(design);
            let aliased: Vec<usize> = (0..design.ncols()).filter(|j| !kept.contains(j)).collect();
            Err(Error::singular(format!("X'Σ⁻¹X is singular; aliased design columns {aliased:?}")))
        }
        Err(e) => Err(e),
    }
}

fn check_shapes(design: MatRef<'_, f64>, response: &[f64], locations: &[Location]) -> Result<()> {
    if design.nrows() != response.len() || locations.len() != response.len() {
        return Err(Error::input(format!(
            "shape mismatch: design has {} rows, {} responses, {} locations",
            design.nrows(),
            response.len(),
            locations.len()
        )));
    }
    Ok(())
}

fn params_from_log(v: &[f64]) -> CovarianceParams {
    CovarianceParams {
        nugget: v[0].exp(),
        partial_sill: v[1].exp(),
        range: v[2].exp(),
    }
}

/// Fits the model for `recipe` on `dataset`. Aliased design columns are
/// dropped first (rightmost members of each aliased set).
pub fn fit_slm(dataset: &SpatialDataset, recipe: &DesignRecipe, options: &FitOptions) -> Result<SlmFit> {
    let x = recipe.build(&dataset.sites)?;
    let kept = non_aliased_columns(x.as_ref());
    let (recipe, x, dropped) = if kept.len() < x.ncols() {
        let labels = recipe.labels();
        let dropped: Vec<String> = (0..x.ncols()).filter(|j| !kept.contains(j)).map(|j| labels[j].clone()).collect();
        log::warn!("dropping aliased design columns {dropped:?}");
        (recipe.keep_columns(&kept), select_columns(x.as_ref(), &kept), dropped)
    } else {
        (recipe.clone(), x, vec![])
    };
    fit_design(recipe, x, &dataset.response, dataset.locations(), options, dropped)
}

/// Fits the model on an explicit design; `recipe` is stored for prediction
/// and must describe `x`. A zero-column `x` gives a zero-mean (simple
/// kriging) model.
pub fn fit_design(
    recipe: DesignRecipe,
    x: Mat<f64>,
    y: &[f64],
    locations: &[Location],
    options: &FitOptions,
    dropped_columns: Vec<String>,
) -> Result<SlmFit> {
    options.validate()?;
    check_shapes(x.as_ref(), y, locations)?;
    let (n, k) = (x.nrows(), x.ncols());
    if n < k + 3 {
        return Err(Error::input(format!("{n} observations cannot identify {k} coefficients and 3 covariance parameters")));
    }

    let form = match (&options.rank_mode, &options.knots) {
        (RankMode::Full, _) => CovarianceForm::Full,
        (RankMode::Reduced(_), Some(knots)) => CovarianceForm::Reduced(knots.clone()),
        (RankMode::Reduced(r), None) => {
            let r = if *r == 0 { default_knot_count(n) } else { (*r).min(n) };
            CovarianceForm::Reduced(place_knots(locations, r, options.seed)?)
        }
    };
    let geometry = Geometry::new(locations, &form);

    let max_dist = match &geometry {
        Geometry::Full { d } => max_entry(d),
        Geometry::Reduced { .. } => max_entry(&pairwise_distances(locations)),
    };
    let max_dist = if max_dist > 0.0 { max_dist } else { 1.0 };
    let scale = residual_variance(x.as_ref(), y);
    let initial = options.initial.unwrap_or(CovarianceParams {
        nugget: 0.5 * scale,
        partial_sill: 0.5 * scale,
        range: 0.25 * max_dist,
    });
    initial.validate()?;

    let lower = [(scale * 1e-8).ln(), (scale * 1e-8).ln(), (max_dist * 1e-6).ln()];
    let upper = [(scale * 1e4).ln(), (scale * 1e4).ln(), (max_dist * 1e3).ln()];
    let nm = NelderMeadOptions {
        ftol: options.tolerance,
        xtol: options.tolerance.sqrt(),
        max_iter: options.max_iter,
        initial_step: 0.5,
    };
    let objective = |v: &[f64]| -> f64 {
        let theta = params_from_log(v);
        geometry
            .solver(&theta)
            .and_then(|s| profile(&s, x.as_ref(), y))
            .map(|p| p.objective(options.method))
            .unwrap_or(f64::INFINITY)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut start = vec![
        initial.nugget.max(f64::MIN_POSITIVE).ln(),
        initial.partial_sill.max(f64::MIN_POSITIVE).ln(),
        initial.range.ln(),
    ];
    let mut best: Option<crate::optim::NelderMeadResult> = None;
    let (mut iterations, mut evaluations, mut runs) = (0, 0, 0);
    for restart in 0..options.restarts {
        if restart > 0 {
            let b = best.as_ref().expect("first run done");
            start = b.x.iter().map(|v| v + rng.random_range(-0.5..0.5)).collect();
        }
        let run = nelder_mead(objective, &start, &lower, &upper, &nm);
        iterations += run.iterations;
        evaluations += run.evaluations;
        runs += 1;
        let (improved, settled) = match &best {
            None => (true, false),
            Some(b) => (run.f < b.f, run.converged && b.f - run.f < options.tolerance * 10.0),
        };
        if improved {
            best = Some(run);
        }
        if settled && best.as_ref().is_some_and(|b| b.converged) {
            break;
        }
    }
    let best = best.expect("at least one run");
    if !best.f.is_finite() {
        return Err(Error::singular("covariance matrix is singular at every evaluated parameter value"));
    }

    let params = params_from_log(&best.x);
    let solver = geometry.solver(&params)?;
    let p = profile(&solver, x.as_ref(), y)?;
    let t_stats = (0..k).map(|j| p.beta[j] / p.beta_cov[(j, j)].sqrt()).collect();
    let diagnostics = SlmDiagnostics {
        neg_log_lik: p.objective(options.method),
        ml_neg_log_lik: p.ml,
        aic: slm_aic(p.ml, k),
        effective_range: effective_range(&params),
        nugget_to_sill: nugget_to_sill(&params),
        t_stats,
        iterations,
        evaluations,
        converged: best.converged,
    };
    let model = FittedSlm {
        recipe,
        params,
        method: options.method,
        form,
        beta: p.beta,
        beta_cov: DenseMatrix::from_mat(p.beta_cov.as_ref()),
        locations: locations.to_vec(),
        response: y.to_vec(),
        design: DenseMatrix::from_mat(x.as_ref()),
        dropped_columns,
    };
    let fit = SlmFit { model, diagnostics };
    if !best.converged {
        return Err(Error::NonConvergence {
            restarts: runs,
            best_value: best.f,
            best: Box::new(fit),
        });
    }
    Ok(fit)
}

/// Turns a non-convergence error into its best-so-far fit, with a warning.
pub fn accept_nonconverged(result: Result<SlmFit>) -> Result<SlmFit> {
    match result {
        Err(Error::NonConvergence { best, restarts, .. }) => {
            log::warn!("using best-so-far covariance parameters after {restarts} unconverged run(s)");
            Ok(*best)
        }
        other => other,
    }
}

/// Zero-mean covariance fit of `y` (ML by default): the model used for
/// kriging residuals.
pub fn estimate_covariance(y: &[f64], locations: &[Location], options: &FitOptions) -> Result<SlmFit> {
    let recipe = DesignRecipe::new(vec![])?;
    fit_design(recipe, Mat::zeros(y.len(), 0), y, locations, options, vec![])
}

fn max_entry(d: &Mat<f64>) -> f64 {
    let mut m = 0.0_f64;
    for j in 0..d.ncols() {
        for i in 0..d.nrows() {
            m = m.max(d[(i, j)]);
        }
    }
    m
}

/// Unbiased OLS residual variance, with fallbacks for exact fits.
fn residual_variance(x: MatRef<'_, f64>, y: &[f64]) -> f64 {
    let s = OlsFit::fit(x, y).map(|f| f.sigma2()).unwrap_or(f64::NAN);
    if s.is_finite() && s > 0.0 {
        return s;
    }
    let v = crate::lm::variance(y);
    if v > 0.0 {
        v
    } else {
        1.0
    }
}
