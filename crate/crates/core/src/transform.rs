//! Per-covariate Box-Cox transformation search.
//!
//! Each numeric covariate is linearized against the response by fitting a
//! handful of small least-squares models over a fixed `(λ₁, λ₂)` grid and
//! keeping the lowest-AIC candidate. Zero-inflated covariates (more than 2%
//! exact zeros) get a nonzero indicator and/or an indicator-masked
//! transformation; other covariates get a linear or quadratic polynomial in
//! the transformed value. Spatial autocorrelation is ignored here.

use std::fmt;
use std::io::Write;

use faer::Mat;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Covariate, SpatialDataset};
use crate::design::{category_dummies, ColumnSpec, DesignRecipe};
use crate::error::{Error, Result};
use crate::lm::OlsFit;

pub const ZERO_INFLATION_THRESHOLD: f64 = 0.02;

/// `{0, 0.25, ..., 3}`.
pub fn lambda1_grid() -> Vec<f64> {
    (0..=12).map(|i| i as f64 * 0.25).collect()
}

/// `{0, 1}` when every relevant value is positive, else `{1, |min| + 1}`.
pub fn lambda2_grid(min_relevant: f64) -> Vec<f64> {
    if min_relevant > 0.0 {
        vec![0.0, 1.0]
    } else {
        let shifted = min_relevant.abs() + 1.0;
        if shifted == 1.0 {
            vec![1.0]
        } else {
            vec![1.0, shifted]
        }
    }
}

/// `((x+λ₂)^λ₁ − 1)/λ₁`, or `log(x+λ₂)` when `λ₁ = 0`.
pub fn boxcox(x: f64, lambda1: f64, lambda2: f64) -> Result<f64> {
    let shifted = x + lambda2;
    if !(shifted > 0.0) {
        return Err(Error::BoxCoxDomain { value: x, shifted });
    }
    Ok(if lambda1 == 0.0 {
        shifted.ln()
    } else {
        (shifted.powf(lambda1) - 1.0) / lambda1
    })
}

/// Candidate model forms, listed in tie-break order (fewer coefficients
/// first).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformFamily {
    /// `y ~ I(x≠0)`
    Indicator,
    /// `y ~ g(x) I(x≠0)`
    IndicatorTimesBoxCox,
    /// `y ~ g(x)`
    BoxCoxLinear,
    /// `y ~ I(x≠0) + g(x) I(x≠0)`
    IndicatorPlusInteraction,
    /// `y ~ g(x) + g(x)²`
    BoxCoxQuadratic,
    /// Untransformed fallback when every candidate was rank deficient.
    Raw,
}

impl TransformFamily {
    pub const ZERO_INFLATED: [TransformFamily; 3] = [
        TransformFamily::Indicator,
        TransformFamily::IndicatorTimesBoxCox,
        TransformFamily::IndicatorPlusInteraction,
    ];
    pub const REGULAR: [TransformFamily; 2] = [TransformFamily::BoxCoxLinear, TransformFamily::BoxCoxQuadratic];

    pub fn name(&self) -> &'static str {
        match self {
            TransformFamily::Indicator => "indicator",
            TransformFamily::IndicatorTimesBoxCox => "indicator_x_boxcox",
            TransformFamily::BoxCoxLinear => "boxcox_linear",
            TransformFamily::IndicatorPlusInteraction => "indicator_plus_interaction",
            TransformFamily::BoxCoxQuadratic => "boxcox_quadratic",
            TransformFamily::Raw => "raw",
        }
    }

    pub fn uses_lambda(&self) -> bool {
        !matches!(self, TransformFamily::Indicator | TransformFamily::Raw)
    }

    /// Design constructors (excluding the intercept) for this family.
    pub fn columns(&self, covariate: &str, lambda1: f64, lambda2: f64) -> Vec<ColumnSpec> {
        let name = covariate.to_string();
        let bc = |zero_masked| ColumnSpec::BoxCox {
            covariate: name.clone(),
            lambda1,
            lambda2,
            zero_masked,
        };
        match self {
            TransformFamily::Indicator => vec![ColumnSpec::IndicatorNonzero { covariate: name.clone() }],
            TransformFamily::IndicatorTimesBoxCox => vec![bc(true)],
            TransformFamily::BoxCoxLinear => vec![bc(false)],
            TransformFamily::IndicatorPlusInteraction => {
                vec![ColumnSpec::IndicatorNonzero { covariate: name.clone() }, bc(true)]
            }
            TransformFamily::BoxCoxQuadratic => vec![
                bc(false),
                ColumnSpec::BoxCoxSquared {
                    covariate: name.clone(),
                    lambda1,
                    lambda2,
                    zero_masked: false,
                },
            ],
            TransformFamily::Raw => vec![ColumnSpec::Raw { covariate: name.clone() }],
        }
    }
}

impl fmt::Display for TransformFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub covariate: String,
    pub family: TransformFamily,
    pub lambda1: f64,
    pub lambda2: f64,
    pub aic: f64,
    pub zero_inflated: bool,
    /// Candidates skipped because their design was rank deficient.
    pub skipped_candidates: usize,
}

impl TransformSpec {
    pub fn columns(&self) -> Vec<ColumnSpec> {
        self.family.columns(&self.covariate, self.lambda1, self.lambda2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformOptions {
    pub zero_inflation_threshold: f64,
}

impl Default for TransformOptions {
    fn default() -> Self {
        TransformOptions {
            zero_inflation_threshold: ZERO_INFLATION_THRESHOLD,
        }
    }
}

/// AIC of the least-squares fit of `y` on `design` (intercept included by the
/// caller). Rank-deficient designs are rejected.
pub fn fit_candidate_lm(y: &[f64], design: &Mat<f64>) -> Result<f64> {
    Ok(OlsFit::fit(design.as_ref(), y)?.aic())
}

fn candidate_design(x: &[f64], family: TransformFamily, lambda1: f64, lambda2: f64) -> Mat<f64> {
    let n = x.len();
    let nonzero = |i: usize| x[i] != 0.0;
    // Domain validity is checked by the caller, so the unwraps cannot fire on
    // the values that are actually used.
    let g = |i: usize| boxcox(x[i], lambda1, lambda2).unwrap_or(0.0);
    let ind = |i: usize| if nonzero(i) { 1.0 } else { 0.0 };
    match family {
        TransformFamily::Indicator => Mat::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { ind(i) }),
        TransformFamily::IndicatorTimesBoxCox => {
            Mat::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else if nonzero(i) { g(i) } else { 0.0 })
        }
        TransformFamily::BoxCoxLinear => Mat::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { g(i) }),
        TransformFamily::IndicatorPlusInteraction => Mat::from_fn(n, 3, |i, j| match j {
            0 => 1.0,
            1 => ind(i),
            _ => {
                if nonzero(i) {
                    g(i)
                } else {
                    0.0
                }
            }
        }),
        TransformFamily::BoxCoxQuadratic => Mat::from_fn(n, 3, |i, j| match j {
            0 => 1.0,
            1 => g(i),
            _ => g(i).powi(2),
        }),
        TransformFamily::Raw => Mat::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { x[i] }),
    }
}

/// Lowest-AIC transformation for one numeric covariate over the fixed grid.
/// Ties go to the earlier family, then smaller λ₁, then smaller λ₂.
pub fn select_transform(dataset: &SpatialDataset, covariate: &str, options: &TransformOptions) -> Result<TransformSpec> {
    let cov = dataset
        .covariate(covariate)
        .ok_or_else(|| Error::input(format!("unknown covariate `{covariate}`")))?;
    select_for_column(cov, &dataset.response, options)
}

fn select_for_column(cov: &Covariate, y: &[f64], options: &TransformOptions) -> Result<TransformSpec> {
    if cov.meta.is_categorical {
        return Err(Error::input(format!("`{}` is categorical and is not transformed", cov.name())));
    }
    if cov.is_constant() {
        return Err(Error::input(format!("covariate `{}` is constant", cov.name())));
    }
    let x = &cov.values;
    let zero_inflated = cov.meta.zero_fraction > options.zero_inflation_threshold;
    let relevant_min = x
        .iter()
        .filter(|v| !zero_inflated || **v != 0.0)
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let lambda2s = lambda2_grid(relevant_min);
    let families: &[TransformFamily] = if zero_inflated {
        &TransformFamily::ZERO_INFLATED
    } else {
        &TransformFamily::REGULAR
    };

    let mut best: Option<TransformSpec> = None;
    let mut skipped = 0usize;
    for &family in families {
        let grid: Vec<(f64, f64)> = if family.uses_lambda() {
            lambda1_grid()
                .into_iter()
                .flat_map(|l1| lambda2s.iter().map(move |&l2| (l1, l2)))
                .collect()
        } else {
            vec![(0.0, lambda2s[0])]
        };
        for (l1, l2) in grid {
            if family.uses_lambda() && x.iter().any(|&v| (!zero_inflated || v != 0.0) && !(v + l2 > 0.0)) {
                continue;
            }
            let design = candidate_design(x, family, l1, l2);
            match fit_candidate_lm(y, &design) {
                Ok(aic) => {
                    if best.as_ref().is_none_or(|b| aic < b.aic) {
                        best = Some(TransformSpec {
                            covariate: cov.name().to_string(),
                            family,
                            lambda1: l1,
                            lambda2: l2,
                            aic,
                            zero_inflated,
                            skipped_candidates: 0,
                        });
                    }
                }
                Err(_) => skipped += 1,
            }
        }
    }
    match best {
        Some(mut spec) => {
            spec.skipped_candidates = skipped;
            Ok(spec)
        }
        None => {
            log::warn!(
                "covariate `{}`: all {skipped} transformation candidates were rank deficient; using it untransformed",
                cov.name()
            );
            let design = candidate_design(x, TransformFamily::Raw, 0.0, 0.0);
            let aic = fit_candidate_lm(y, &design).unwrap_or(f64::NAN);
            Ok(TransformSpec {
                covariate: cov.name().to_string(),
                family: TransformFamily::Raw,
                lambda1: 0.0,
                lambda2: 0.0,
                aic,
                zero_inflated,
                skipped_candidates: skipped,
            })
        }
    }
}

/// Transformation search over every covariate, assembled into one recipe:
/// intercept, each numeric covariate's chosen constructors, and
/// reference-coded dummies for categorical covariates. Failures on single
/// covariates are logged and skipped.
pub fn select_all(dataset: &SpatialDataset, options: &TransformOptions) -> (DesignRecipe, Vec<TransformSpec>) {
    let results: Vec<Option<Result<TransformSpec>>> = dataset
        .covariates()
        .par_iter()
        .map(|c| {
            if c.meta.is_categorical {
                None
            } else {
                Some(select_for_column(c, &dataset.response, options))
            }
        })
        .collect();

    let mut columns = vec![ColumnSpec::Intercept];
    let mut specs = Vec::new();
    for (cov, result) in dataset.covariates().iter().zip(results) {
        match result {
            None => columns.extend(category_dummies(cov, true)),
            Some(Ok(spec)) => {
                columns.extend(spec.columns());
                specs.push(spec);
            }
            Some(Err(e)) => log::warn!("skipping covariate `{}`: {e}", cov.name()),
        }
    }
    let recipe = DesignRecipe::new(columns).expect("a single intercept");
    (recipe, specs)
}

/// Writes the audit table `covariate,family,lambda1,lambda2,aic`.
pub fn write_transform_table<W: Write>(specs: &[TransformSpec], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["covariate", "family", "lambda1", "lambda2", "aic"])?;
    for s in specs {
        w.write_record([
            s.covariate.clone(),
            s.family.name().to_string(),
            s.lambda1.to_string(),
            s.lambda2.to_string(),
            s.aic.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
