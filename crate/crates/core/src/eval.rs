//! k-fold cross-validation and the prediction scores: RMSPE, interval
//! coverage and interval lengths.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SpatialDataset;
use crate::error::{Error, Result};
use crate::kriging::IntervalLevel;
use crate::pipeline::{fit_pipeline, predict_pipeline, ModelKind, PipelineOptions, Prediction};

pub fn rmspe(observed: &[f64], predicted: &[f64]) -> Result<f64> {
    if observed.len() != predicted.len() {
        return Err(Error::input(format!(
            "rmspe: {} observations but {} predictions",
            observed.len(),
            predicted.len()
        )));
    }
    if observed.is_empty() {
        return Err(Error::input("rmspe of an empty sample"));
    }
    let sse: f64 = observed.iter().zip(predicted).map(|(y, p)| (y - p) * (y - p)).sum();
    Ok((sse / observed.len() as f64).sqrt())
}

/// Share of observations strictly inside their interval.
pub fn interval_coverage(observed: &[f64], intervals: &[(f64, f64)]) -> Result<f64> {
    if observed.len() != intervals.len() {
        return Err(Error::input("coverage: observations and intervals differ in length"));
    }
    if observed.is_empty() {
        return Err(Error::input("coverage of an empty sample"));
    }
    let mut hit = 0usize;
    for (i, (&y, &(lo, hi))) in observed.iter().zip(intervals).enumerate() {
        if !(lo <= hi) {
            return Err(Error::input(format!("interval {i} is malformed: [{lo}, {hi}]")));
        }
        if lo < y && y < hi {
            hit += 1;
        }
    }
    Ok(hit as f64 / observed.len() as f64)
}

/// Coverage over the intervals of positive length; `None` if there are none.
pub fn coverage_excluding_degenerate(observed: &[f64], intervals: &[(f64, f64)]) -> Result<Option<f64>> {
    let (y, iv): (Vec<f64>, Vec<(f64, f64)>) = observed
        .iter()
        .zip(intervals)
        .filter(|(_, (lo, hi))| hi > lo)
        .map(|(y, iv)| (*y, *iv))
        .unzip();
    if y.is_empty() {
        // still reject malformed input
        interval_coverage(observed, intervals)?;
        return Ok(None);
    }
    interval_coverage(&y, &iv).map(Some)
}

/// Seeded partition of `0..n` into `k` folds of near-equal size: rows are
/// shuffled and dealt out round-robin. Each fold is sorted.
pub fn fold_partition(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::input("cross-validation needs k >= 2"));
    }
    if n < k {
        return Err(Error::input(format!("{n} observations cannot fill {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::with_capacity(n / k + 1); k];
    for (pos, &row) in order.iter().enumerate() {
        folds[pos % k].push(row);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvOptions {
    pub k: usize,
    pub seed: u64,
    /// Re-run transformation search and selection inside every training
    /// fold. Off reuses the recipe chosen on the full data.
    pub honest: bool,
    pub pipeline: PipelineOptions,
}

impl Default for CvOptions {
    fn default() -> Self {
        CvOptions {
            k: 10,
            seed: 0,
            honest: true,
            pipeline: PipelineOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub model: ModelKind,
    /// Parameter count of the model fitted to all the data.
    pub k_params: Option<usize>,
    pub rmspe: f64,
    pub pic90: Option<f64>,
    pub pic95: Option<f64>,
    /// Positive 90% interval lengths over the pooled held-out rows.
    pub interval_lengths: Vec<f64>,
    pub folds: Vec<Vec<usize>>,
    pub failed_folds: Vec<usize>,
    /// Held-out prediction per row; `None` where the fold failed.
    pub predictions: Vec<Option<Prediction>>,
}

pub fn kfold_cv(dataset: &SpatialDataset, kind: ModelKind, options: &CvOptions) -> Result<CvReport> {
    let folds = fold_partition(dataset.n(), options.k, options.seed)?;
    kfold_cv_with_folds(dataset, kind, folds, options)
}

/// Cross-validation over a given partition.
pub fn kfold_cv_with_folds(
    dataset: &SpatialDataset,
    kind: ModelKind,
    folds: Vec<Vec<usize>>,
    options: &CvOptions,
) -> Result<CvReport> {
    let n = dataset.n();
    let mut seen = vec![false; n];
    for &r in folds.iter().flatten() {
        if r >= n || std::mem::replace(&mut seen[r], true) {
            return Err(Error::input("fold assignment is not a partition of the rows"));
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::input("fold assignment misses some rows"));
    }

    let full = fit_pipeline(kind, dataset, &options.pipeline)?;
    let mut fold_opts = options.pipeline.clone();
    if !options.honest {
        fold_opts.fixed_recipe = full.recipe().cloned();
    }

    let per_fold: Vec<Result<Vec<Prediction>>> = folds
        .par_iter()
        .map(|test| {
            let mut is_test = vec![false; n];
            for &r in test {
                is_test[r] = true;
            }
            let train: Vec<usize> = (0..n).filter(|&r| !is_test[r]).collect();
            let fit = fit_pipeline(kind, &dataset.subset(&train), &fold_opts)?;
            predict_pipeline(&fit, &dataset.sites.subset(test))
        })
        .collect();

    let mut predictions = vec![None; n];
    let mut failed_folds = Vec::new();
    for (f, (rows, res)) in folds.iter().zip(per_fold).enumerate() {
        match res {
            Ok(p) => {
                for (&r, p) in rows.iter().zip(p) {
                    predictions[r] = Some(p);
                }
            }
            Err(e) => {
                log::warn!("{kind}: fold {f} failed: {e}");
                failed_folds.push(f);
            }
        }
    }

    let (obs, preds): (Vec<f64>, Vec<Prediction>) = dataset
        .response
        .iter()
        .zip(&predictions)
        .filter_map(|(y, p)| p.map(|p| (*y, p)))
        .unzip();
    if obs.is_empty() {
        return Err(Error::input(format!("{kind}: every cross-validation fold failed")));
    }
    let means: Vec<f64> = preds.iter().map(|p| p.mean).collect();
    let iv90: Vec<(f64, f64)> = preds.iter().map(|p| p.interval(IntervalLevel::P90)).collect();
    let iv95: Vec<(f64, f64)> = preds.iter().map(|p| p.interval(IntervalLevel::P95)).collect();
    Ok(CvReport {
        model: kind,
        k_params: full.k_params(),
        rmspe: rmspe(&obs, &means)?,
        pic90: coverage_excluding_degenerate(&obs, &iv90)?,
        pic95: coverage_excluding_degenerate(&obs, &iv95)?,
        interval_lengths: iv90.iter().map(|(lo, hi)| hi - lo).filter(|l| *l > 0.0).collect(),
        folds,
        failed_folds,
        predictions,
    })
}

/// Type-7 sample quantile of sorted data.
fn sorted_quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `(min, q1, median, q3, max)`, or `None` for an empty sample.
pub fn five_number_summary(values: &[f64]) -> Option<[f64; 5]> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some([0.0, 0.25, 0.5, 0.75, 1.0].map(|q| sorted_quantile(&v, q)))
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.6}"))
}

/// Comparison table with columns `Model,k,RMSPE,PIC90,PIC95`.
pub fn write_cv_table<W: Write>(reports: &[CvReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["Model", "k", "RMSPE", "PIC90", "PIC95"])?;
    for r in reports {
        w.write_record([
            r.model.label().to_string(),
            r.k_params.map_or(String::new(), |k| k.to_string()),
            format!("{:.6}", r.rmspe),
            opt(r.pic90),
            opt(r.pic95),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// 90% interval length summary per model.
pub fn write_interval_summary<W: Write>(reports: &[CvReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["Model", "n", "min", "q1", "median", "q3", "max"])?;
    for r in reports {
        let mut row = vec![r.model.label().to_string(), r.interval_lengths.len().to_string()];
        match five_number_summary(&r.interval_lengths) {
            Some(s) => row.extend(s.iter().map(|v| format!("{v:.6}"))),
            None => row.extend(std::iter::repeat_n(String::new(), 5)),
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
