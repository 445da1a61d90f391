//! Covariate selection: backward stepwise AIC on the non-spatial linear
//! model, then t-statistic pruning of the spatial model.
//!
//! Columns derived from one covariate (an indicator and its masked
//! transform, a transform and its square, category dummies) form a group and
//! are always dropped together. The intercept is never dropped.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{default_knot_count, place_knots};
use crate::data::SpatialDataset;
use crate::design::{ColumnSpec, DesignRecipe};
use crate::error::{Error, Result};
use crate::linalg::{scaled_condition_number, select_columns, ALIAS_CONDITION};
use crate::lm::OlsFit;
use crate::slm::{accept_nonconverged, fit_slm, FitOptions, Method, RankMode, SlmFit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepAction {
    /// Removed before the search because the group's columns were aliased.
    DropAliased,
    Drop,
    Stop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionStep {
    pub action: StepAction,
    /// Covariate group the step concerns (the candidate that was rejected for
    /// a stop step); empty when nothing was left to drop.
    pub group: String,
    pub aic_before: f64,
    pub aic_after: f64,
    /// Largest |t| within the group in the model before the step.
    pub t_stat: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub steps: Vec<SelectionStep>,
}

impl SelectionTrace {
    pub fn dropped_groups(&self) -> Vec<&str> {
        self.steps
            .iter()
            .filter(|s| s.action != StepAction::Stop)
            .map(|s| s.group.as_str())
            .collect()
    }

    /// `phase,action,group,aic_before,aic_after,t_stat` rows.
    pub fn write_csv<W: Write>(&self, phase: &str, writer: &mut csv::Writer<W>) -> Result<()> {
        for s in &self.steps {
            let action = match s.action {
                StepAction::DropAliased => "drop_aliased",
                StepAction::Drop => "drop",
                StepAction::Stop => "stop",
            };
            writer.write_record([
                phase.to_string(),
                action.to_string(),
                s.group.clone(),
                s.aic_before.to_string(),
                s.aic_after.to_string(),
                s.t_stat.map(|t| t.to_string()).unwrap_or_default(),
            ])?;
        }
        Ok(())
    }
}

pub const TRACE_HEADER: [&str; 6] = ["phase", "action", "group", "aic_before", "aic_after", "t_stat"];

fn droppable_groups(recipe: &DesignRecipe) -> Vec<(String, Vec<usize>)> {
    recipe
        .groups()
        .into_iter()
        .filter(|(_, cols)| !cols.iter().any(|&j| matches!(recipe.columns()[j], ColumnSpec::Intercept)))
        .collect()
}

fn without_group(recipe: &DesignRecipe, cols: &[usize]) -> DesignRecipe {
    recipe.without_columns(cols)
}

fn max_abs_t(t: &[f64], cols: &[usize]) -> f64 {
    cols.iter().map(|&j| t[j].abs()).fold(f64::NEG_INFINITY, f64::max)
}

/// Greedy backward elimination of covariate groups by OLS AIC. Groups that
/// would alias earlier columns are removed first, scanning left to right.
pub fn stepwise_lm(dataset: &SpatialDataset, recipe: &DesignRecipe) -> Result<(DesignRecipe, SelectionTrace)> {
    let x_full = recipe.build(&dataset.sites)?;
    let y = &dataset.response;
    let mut trace = SelectionTrace::default();

    // aliasing, group by group in recipe order
    let mut keep: Vec<usize> = (0..recipe.ncols())
        .filter(|&j| matches!(recipe.columns()[j], ColumnSpec::Intercept))
        .collect();
    for (name, cols) in recipe.groups() {
        let mut trial = keep.clone();
        trial.extend(&cols);
        trial.sort_unstable();
        if scaled_condition_number(select_columns(x_full.as_ref(), &trial).as_ref()) <= ALIAS_CONDITION {
            keep = trial;
        } else {
            log::warn!("dropping aliased covariate group `{name}`");
            trace.steps.push(SelectionStep {
                action: StepAction::DropAliased,
                group: name,
                aic_before: f64::NAN,
                aic_after: f64::NAN,
                t_stat: None,
            });
        }
    }
    let mut current = recipe.keep_columns(&keep);
    let mut x = select_columns(x_full.as_ref(), &keep);
    let mut fit = OlsFit::fit(x.as_ref(), y)?;

    loop {
        let groups = droppable_groups(&current);
        if groups.is_empty() {
            trace.steps.push(SelectionStep {
                action: StepAction::Stop,
                group: String::new(),
                aic_before: fit.aic(),
                aic_after: f64::INFINITY,
                t_stat: None,
            });
            break;
        }
        let candidates: Vec<f64> = groups
            .par_iter()
            .map(|(_, cols)| {
                let keep: Vec<usize> = (0..current.ncols()).filter(|j| !cols.contains(j)).collect();
                OlsFit::fit(select_columns(x.as_ref(), &keep).as_ref(), y)
                    .map(|f| f.aic())
                    .unwrap_or(f64::INFINITY)
            })
            .collect();
        let mut best = 0;
        for (i, &a) in candidates.iter().enumerate() {
            if a < candidates[best] {
                best = i;
            }
        }
        let (name, cols) = &groups[best];
        let t = fit.t_stats();
        let step = SelectionStep {
            action: StepAction::Drop,
            group: name.clone(),
            aic_before: fit.aic(),
            aic_after: candidates[best],
            t_stat: Some(max_abs_t(&t, cols)),
        };
        if candidates[best] < fit.aic() {
            let keep: Vec<usize> = (0..current.ncols()).filter(|j| !cols.contains(j)).collect();
            x = select_columns(x.as_ref(), &keep);
            current = without_group(&current, cols);
            fit = OlsFit::fit(x.as_ref(), y)?;
            trace.steps.push(step);
        } else {
            trace.steps.push(SelectionStep {
                action: StepAction::Stop,
                ..step
            });
            break;
        }
    }
    Ok((current, trace))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneOptions {
    /// Remove the group with the largest |t| instead of the smallest.
    pub literal_tstat: bool,
    /// Knot count for the reduced-rank phase; `None` means `min(⌈n/10⌉, 200)`.
    pub knots: Option<usize>,
    /// Options for the final full-rank REML refit; the pruning phase uses the
    /// same tolerances with ML and reduced rank.
    pub fit: FitOptions,
}

impl Default for PruneOptions {
    fn default() -> Self {
        PruneOptions {
            literal_tstat: false,
            knots: None,
            fit: FitOptions::default(),
        }
    }
}

/// Prunes covariate groups by |t| under an ML reduced-rank fit (knots fixed
/// once), accepting a drop while AIC does not increase, then refits the
/// survivor by REML with full-rank covariance.
pub fn prune_slm(dataset: &SpatialDataset, recipe: &DesignRecipe, options: &PruneOptions) -> Result<(SlmFit, SelectionTrace)> {
    let n = dataset.n();
    let r = options.knots.unwrap_or_else(|| default_knot_count(n)).clamp(1, n);
    let knots = place_knots(dataset.locations(), r, options.fit.seed)?;
    let ml = FitOptions {
        method: Method::Ml,
        rank_mode: RankMode::Reduced(r),
        knots: Some(knots),
        ..options.fit.clone()
    };
    let mut trace = SelectionTrace::default();
    let mut fit = accept_nonconverged(fit_slm(dataset, recipe, &ml))?;

    loop {
        let current = fit.model.recipe.clone();
        let groups = droppable_groups(&current);
        if groups.is_empty() {
            trace.steps.push(SelectionStep {
                action: StepAction::Stop,
                group: String::new(),
                aic_before: fit.diagnostics.aic,
                aic_after: f64::INFINITY,
                t_stat: None,
            });
            break;
        }
        let t = &fit.diagnostics.t_stats;
        let scores: Vec<f64> = groups.iter().map(|(_, cols)| max_abs_t(t, cols)).collect();
        let mut pick = 0;
        for (i, &s) in scores.iter().enumerate() {
            let better = if options.literal_tstat { s > scores[pick] } else { s < scores[pick] };
            if better {
                pick = i;
            }
        }
        let (name, cols) = &groups[pick];
        let opts = FitOptions {
            initial: Some(fit.model.params),
            ..ml.clone()
        };
        let candidate = accept_nonconverged(fit_slm(dataset, &without_group(&current, cols), &opts));
        let (aic_after, candidate) = match candidate {
            Ok(c) => (c.diagnostics.aic, Some(c)),
            Err(e) => {
                log::warn!("refit without `{name}` failed: {e}");
                (f64::INFINITY, None)
            }
        };
        let step = SelectionStep {
            action: StepAction::Drop,
            group: name.clone(),
            aic_before: fit.diagnostics.aic,
            aic_after,
            t_stat: Some(scores[pick]),
        };
        match candidate {
            Some(c) if aic_after <= fit.diagnostics.aic => {
                trace.steps.push(step);
                fit = c;
            }
            _ => {
                trace.steps.push(SelectionStep {
                    action: StepAction::Stop,
                    ..step
                });
                break;
            }
        }
    }

    let final_opts = FitOptions {
        method: Method::Reml,
        rank_mode: RankMode::Full,
        knots: None,
        initial: Some(fit.model.params),
        ..options.fit.clone()
    };
    let recipe = fit.model.recipe.clone();
    let final_fit = accept_nonconverged(fit_slm(dataset, &recipe, &final_opts))
        .map_err(|e| Error::input(format!("final REML refit failed: {e}")))?;
    Ok((final_fit, trace))
}
