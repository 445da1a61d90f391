//! Simulation study: `y = c[a·sin(5π x₁x₂) + 2x₃ − x₄] + δ(s)` on the unit
//! square with an exponential Gaussian field plus nugget for `δ`, over the
//! eight combinations of autocorrelation, R² and nonlinearity.

use std::f64::consts::PI;
use std::io::Write;

use faer::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{full_sigma, CovarianceParams};
use crate::data::{Covariate, Location, SpatialDataset};
use crate::design::DesignRecipe;
use crate::error::{Error, Result};
use crate::eval::{interval_coverage, rmspe};
use crate::forest::ForestOptions;
use crate::kriging::IntervalLevel;
use crate::lm::variance;
use crate::linalg::cholesky;
use crate::pipeline::{fit_pipeline, predict_pipeline, rfrk_options, FittedModel, ModelKind, PipelineFit, PipelineOptions};
use crate::rfrk::{fit_rfrk_with_forest, ResidualMode};
use crate::slm::FitOptions;

pub const SIM_RANGE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dominance {
    Linear,
    Nonlinear,
}

impl Dominance {
    pub fn label(&self) -> &'static str {
        match self {
            Dominance::Linear => "L",
            Dominance::Nonlinear => "NL",
        }
    }

    /// Target share of `var(f)` carried by the sine term.
    pub fn nonlinear_share(&self) -> f64 {
        match self {
            Dominance::Linear => 0.1,
            Dominance::Nonlinear => 0.9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimCase {
    pub id: usize,
    pub dominance: Dominance,
    pub r_squared: f64,
    pub nugget: f64,
    pub partial_sill: f64,
}

impl SimCase {
    pub fn all() -> [SimCase; 8] {
        let mut out = [SimCase {
            id: 0,
            dominance: Dominance::Nonlinear,
            r_squared: 0.0,
            nugget: 0.0,
            partial_sill: 0.0,
        }; 8];
        let mut i = 0;
        for dominance in [Dominance::Nonlinear, Dominance::Linear] {
            for r_squared in [0.1, 0.9] {
                for (nugget, partial_sill) in [(9.0, 1.0), (1.0, 9.0)] {
                    out[i] = SimCase {
                        id: i + 1,
                        dominance,
                        r_squared,
                        nugget,
                        partial_sill,
                    };
                    i += 1;
                }
            }
        }
        out
    }

    pub fn get(id: usize) -> Result<SimCase> {
        SimCase::all()
            .into_iter()
            .find(|c| c.id == id)
            .ok_or_else(|| Error::input(format!("simulation case {id} does not exist (1..=8)")))
    }

    pub fn params(&self) -> CovarianceParams {
        CovarianceParams {
            nugget: self.nugget,
            partial_sill: self.partial_sill,
            range: SIM_RANGE,
        }
    }
}

/// `δ = L·w + ε`, with `L` the Cholesky factor of the partial-sill
/// exponential covariance and `ε` independent nugget noise.
pub fn sample_grf(locations: &[Location], params: &CovarianceParams, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let n = locations.len();
    let mut out = vec![0.0; n];
    if params.partial_sill > 0.0 {
        let spatial = CovarianceParams {
            nugget: 0.0,
            ..*params
        };
        let llt = cholesky(full_sigma(locations, &spatial), "field covariance")?;
        let w = Mat::<f64>::from_fn(n, 1, |_, _| StandardNormal.sample(&mut *rng));
        let z = llt.L() * &w;
        for (o, i) in out.iter_mut().zip(0..n) {
            *o = z[(i, 0)];
        }
    }
    if params.nugget > 0.0 {
        let sd = params.nugget.sqrt();
        for o in &mut out {
            let e: f64 = StandardNormal.sample(&mut *rng);
            *o += sd * e;
        }
    }
    Ok(out)
}

pub fn g_term(x1: f64, x2: f64) -> f64 {
    (5.0 * PI * x1 * x2).sin()
}

pub fn h_term(x3: f64, x4: f64) -> f64 {
    2.0 * x3 - x4
}

/// `a = sqrt(share/(1−share) · var̂(h)/var̂(g))`, ignoring the g–h
/// covariance.
pub fn calibrate_a(g: &[f64], h: &[f64], share: f64) -> Result<f64> {
    let vg = variance(g);
    let vh = variance(h);
    if !(vg > 0.0 && vh > 0.0) || !(share > 0.0 && share < 1.0) {
        return Err(Error::input("calibrate_a: degenerate variance or share outside (0, 1)"));
    }
    Ok((share / (1.0 - share) * vh / vg).sqrt())
}

/// `c = sqrt(R²/(1−R²) · var̂(δ)/var̂(a·g + h))`.
pub fn calibrate_c(f_tilde: &[f64], delta_variance: f64, r_squared: f64) -> Result<f64> {
    let vf = variance(f_tilde);
    if !(vf > 0.0 && delta_variance > 0.0) || !(r_squared > 0.0 && r_squared < 1.0) {
        return Err(Error::input("calibrate_c: degenerate variance or R² outside (0, 1)"));
    }
    Ok((r_squared / (1.0 - r_squared) * delta_variance / vf).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimDataset {
    pub train: SpatialDataset,
    pub test: SpatialDataset,
    pub a: f64,
    pub c: f64,
    /// `var̂(f)/var̂(y)` over all points.
    pub realized_r_squared: f64,
    /// `var̂(a·g)/var̂(a·g + h)` over all points.
    pub realized_share: f64,
}

pub fn generate(case: &SimCase, n_train: usize, n_test: usize, seed: u64) -> Result<SimDataset> {
    let n = n_train + n_test;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let locs: Vec<Location> = (0..n).map(|_| Location::new(rng.random(), rng.random())).collect();
    let x: Vec<Vec<f64>> = (0..4).map(|_| (0..n).map(|_| rng.random()).collect()).collect();
    let delta = sample_grf(&locs, &case.params(), &mut rng)?;

    let g: Vec<f64> = (0..n).map(|i| g_term(x[0][i], x[1][i])).collect();
    let h: Vec<f64> = (0..n).map(|i| h_term(x[2][i], x[3][i])).collect();
    let a = calibrate_a(&g, &h, case.dominance.nonlinear_share())?;
    let f_tilde: Vec<f64> = (0..n).map(|i| a * g[i] + h[i]).collect();
    let c = calibrate_c(&f_tilde, variance(&delta), case.r_squared)?;
    let f: Vec<f64> = f_tilde.iter().map(|v| c * v).collect();
    let y: Vec<f64> = (0..n).map(|i| f[i] + delta[i]).collect();

    let ag: Vec<f64> = g.iter().map(|v| a * v).collect();
    let realized_share = variance(&ag) / variance(&f_tilde);
    let realized_r_squared = variance(&f) / variance(&y);

    let names = ["x1", "x2", "x3", "x4"];
    let build = |rows: std::ops::Range<usize>| {
        let covs = names
            .iter()
            .zip(&x)
            .map(|(nm, col)| Covariate::numeric(*nm, col[rows.clone()].to_vec()))
            .collect();
        SpatialDataset::new(locs[rows.clone()].to_vec(), y[rows].to_vec(), covs)
    };
    Ok(SimDataset {
        train: build(0..n_train)?,
        test: build(n_train..n)?,
        a,
        c,
        realized_r_squared,
        realized_share,
    })
}

pub const SIM_MODELS: [ModelKind; 4] = [ModelKind::Lm, ModelKind::Slm, ModelKind::Rf, ModelKind::Rfrk];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    pub n_train: usize,
    pub n_test: usize,
    pub replicates: usize,
    pub seed: u64,
    pub forest: ForestOptions,
    pub fit: FitOptions,
    pub residuals: ResidualMode,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            n_train: 500,
            n_test: 1000,
            replicates: 20,
            seed: 0,
            forest: ForestOptions::default(),
            fit: FitOptions::default(),
            residuals: ResidualMode::OutOfBag,
        }
    }
}

impl SimOptions {
    /// Smaller training sets and fewer replicates for quick checks.
    pub fn fast() -> Self {
        SimOptions {
            n_train: 200,
            replicates: 10,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelScore {
    pub model: ModelKind,
    pub rmspe: f64,
    pub pic90: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub replicate: usize,
    pub seed: u64,
    pub a: f64,
    pub c: f64,
    pub realized_r_squared: f64,
    pub realized_share: f64,
    pub scores: Vec<ModelScore>,
    /// REML covariance estimates of the SLM.
    pub slm_params: CovarianceParams,
    pub slm_converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub case: SimCase,
    pub replicates: Vec<ReplicateResult>,
    pub failed: Vec<usize>,
}

impl CaseReport {
    fn mean(&self, f: impl Fn(&ReplicateResult) -> f64) -> f64 {
        self.replicates.iter().map(f).sum::<f64>() / self.replicates.len() as f64
    }

    pub fn mean_a(&self) -> f64 {
        self.mean(|r| r.a)
    }

    pub fn mean_c(&self) -> f64 {
        self.mean(|r| r.c)
    }

    /// Replicate-averaged `(rmspe, pic90)` for `model`.
    pub fn score(&self, model: ModelKind) -> Option<(f64, f64)> {
        let pick = |r: &ReplicateResult| r.scores.iter().find(|s| s.model == model).copied();
        let s: Vec<ModelScore> = self.replicates.iter().filter_map(pick).collect();
        if s.is_empty() {
            return None;
        }
        let k = s.len() as f64;
        Some((s.iter().map(|v| v.rmspe).sum::<f64>() / k, s.iter().map(|v| v.pic90).sum::<f64>() / k))
    }
}

/// Replicate seed from `(master, case, replicate)`.
pub fn replicate_seed(master: u64, case: usize, replicate: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(((case as u64) << 32) | replicate as u64);
    rng.random()
}

fn score(kind: ModelKind, fit: &PipelineFit, test: &SpatialDataset) -> Result<ModelScore> {
    let p = predict_pipeline(fit, &test.sites)?;
    let means: Vec<f64> = p.iter().map(|p| p.mean).collect();
    let iv: Vec<(f64, f64)> = p.iter().map(|p| p.interval(IntervalLevel::P90)).collect();
    Ok(ModelScore {
        model: kind,
        rmspe: rmspe(&test.response, &means)?,
        pic90: interval_coverage(&test.response, &iv)?,
    })
}

pub fn run_replicate(case: &SimCase, replicate: usize, options: &SimOptions) -> Result<ReplicateResult> {
    let seed = replicate_seed(options.seed, case.id, replicate);
    let data = generate(case, options.n_train, options.n_test, seed)?;
    let popts = PipelineOptions {
        seed,
        forest: options.forest.clone(),
        fit: options.fit.clone(),
        residuals: options.residuals,
        fixed_recipe: Some(DesignRecipe::untransformed(&data.train.sites)),
        ..Default::default()
    };
    let mut scores = Vec::with_capacity(4);

    let lm = fit_pipeline(ModelKind::Lm, &data.train, &popts)?;
    scores.push(score(ModelKind::Lm, &lm, &data.test)?);

    let slm = fit_pipeline(ModelKind::Slm, &data.train, &popts)?;
    scores.push(score(ModelKind::Slm, &slm, &data.test)?);
    let slm_params = match &slm.model {
        FittedModel::Slm(f) => f.model.params,
        _ => unreachable!("SLM pipeline yields a spatial model"),
    };

    let rf = fit_pipeline(ModelKind::Rf, &data.train, &popts)?;
    scores.push(score(ModelKind::Rf, &rf, &data.test)?);

    // RFRK reuses the forest above.
    let FittedModel::Rf(forest) = rf.model else {
        unreachable!("RF pipeline yields a forest")
    };
    let rfrk = fit_rfrk_with_forest(*forest, &data.train, &rfrk_options(&popts))?;
    let rfrk = PipelineFit {
        kind: ModelKind::Rfrk,
        converged: rfrk.converged,
        model: FittedModel::Rfrk(Box::new(rfrk)),
        transforms: vec![],
        stepwise: Default::default(),
        pruning: Default::default(),
    };
    scores.push(score(ModelKind::Rfrk, &rfrk, &data.test)?);

    Ok(ReplicateResult {
        replicate,
        seed,
        a: data.a,
        c: data.c,
        realized_r_squared: data.realized_r_squared,
        realized_share: data.realized_share,
        scores,
        slm_params,
        slm_converged: slm.converged,
    })
}

pub fn run_case(case: &SimCase, options: &SimOptions) -> Result<CaseReport> {
    let results: Vec<Result<ReplicateResult>> = (0..options.replicates)
        .into_par_iter()
        .map(|r| run_replicate(case, r, options))
        .collect();
    let mut replicates = Vec::new();
    let mut failed = Vec::new();
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(v) => replicates.push(v),
            Err(e) => {
                log::warn!("case {}: replicate {r} failed: {e}", case.id);
                failed.push(r);
            }
        }
    }
    if replicates.is_empty() {
        return Err(Error::input(format!("case {}: every replicate failed", case.id)));
    }
    Ok(CaseReport {
        case: *case,
        replicates,
        failed,
    })
}

pub fn write_case_table<W: Write>(reports: &[CaseReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["case", "dominance", "R2", "nugget", "psill", "a", "c"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for m in SIM_MODELS {
        header.push(format!("{}_RMSPE", m.label()));
        header.push(format!("{}_PIC90", m.label()));
    }
    header.push("replicates".into());
    w.write_record(&header)?;
    for r in reports {
        let c = &r.case;
        let mut row = vec![
            c.id.to_string(),
            c.dominance.label().to_string(),
            c.r_squared.to_string(),
            c.nugget.to_string(),
            c.partial_sill.to_string(),
            format!("{:.4}", r.mean_a()),
            format!("{:.4}", r.mean_c()),
        ];
        for m in SIM_MODELS {
            match r.score(m) {
                Some((e, p)) => {
                    row.push(format!("{e:.4}"));
                    row.push(format!("{p:.4}"));
                }
                None => row.extend([String::new(), String::new()]),
            }
        }
        row.push(r.replicates.len().to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
