//! Acceptance suite. Runs as a plain binary (`harness = false`) so every
//! criterion prints exactly one PASS/FAIL line whatever the outcome.
//!
//! Heavy criteria run at reduced scale unless `GEOFOREST_ACCEPTANCE_FULL=1`;
//! see the README for scales and runtimes. `GEOFOREST_ACCEPTANCE_ONLY=3,7`
//! runs a subset.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use faer::Mat;
use geoforest::covariance::{place_knots, reduced_sigma_inverse, CovarianceParams, ReducedRankFactors};
use geoforest::data::{Covariate, Location, SpatialDataset};
use geoforest::design::DesignRecipe;
use geoforest::eval::{interval_coverage, kfold_cv, CvOptions};
use geoforest::forest::{fit_forest, qrf_quantiles, rf_predict, Features, ForestOptions, Node, SplitRule};
use geoforest::kriging::{uk_predict, IntervalLevel, KrigingSystem};
use geoforest::linalg::DenseMatrix;
use geoforest::model_io::{from_json, to_json};
use geoforest::pipeline::{fit_pipeline, predict_pipeline, FittedModel, ModelKind, PipelineOptions};
use geoforest::rfrk::ResidualMode;
use geoforest::sim::{generate, replicate_seed, run_case, CaseReport, SimCase, SimOptions};
use geoforest::slm::{effective_range, nugget_to_sill, profile_beta, CovarianceForm, FittedSlm, Method};
use geoforest::transform::{select_transform, TransformFamily, TransformOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

// Pinned tolerances.
const SMW_REL_TOL: f64 = 1e-8;
const KRIGING_REL_TOL: f64 = 1e-8;
const EFF_RANGE_TOL_KM: f64 = 0.5;
const RATIO_TOL: f64 = 0.005;
const SIM_RMSPE_REL_TOL_FULL: f64 = 0.15;
const SIM_RMSPE_REL_TOL_FAST: f64 = 0.25;
const SIM_PIC90_TOL: f64 = 0.03;
const ORDER_MARGIN_SPATIAL: f64 = 0.30;
const ORDER_MARGIN_FOREST: f64 = 0.15;
// At n = 200 the forests see too few rows to open the full gap.
const ORDER_MARGIN_FOREST_FAST: f64 = 0.05;
const RF_OVERCOVERAGE: f64 = 0.94;
const A_NL: (f64, f64) = (2.6, 3.2);
const A_L: (f64, f64) = (0.29, 0.37);
const C_CASE1: (f64, f64) = (0.45, 0.58);
const REML_MEDIAN_REL_ERR: f64 = 0.5;
const COVERAGE_BAND: (f64, f64) = (0.87, 0.93);
const MIN_HITS: usize = 18;

fn full_mode() -> bool {
    std::env::var("GEOFOREST_ACCEPTANCE_FULL").is_ok_and(|v| v == "1")
}

fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(f64::MIN_POSITIVE)
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

// ---------------------------------------------------------------------------
// Dense oracles: plain Gauss-Jordan on Vec<Vec<f64>>, sharing nothing with the
// library's linear algebra.

fn gj_inverse(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            r
        })
        .collect();
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs())).unwrap();
        m.swap(col, piv);
        let p = m[col][col];
        for v in m[col].iter_mut() {
            *v /= p;
        }
        for r in 0..n {
            if r != col {
                let f = m[r][col];
                if f != 0.0 {
                    for c in 0..2 * n {
                        m[r][c] -= f * m[col][c];
                    }
                }
            }
        }
    }
    m.into_iter().map(|r| r[n..].to_vec()).collect()
}

fn gj_log_det(a: &[Vec<f64>]) -> f64 {
    let n = a.len();
    let mut m = a.to_vec();
    let mut acc = 0.0;
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs())).unwrap();
        m.swap(col, piv);
        let p = m[col][col];
        acc += p.abs().ln();
        for r in col + 1..n {
            let f = m[r][col] / p;
            for c in col..n {
                m[r][c] -= f * m[col][c];
            }
        }
    }
    acc
}

fn mat_vec(a: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    a.iter().map(|row| row.iter().zip(v).map(|(x, y)| x * y).sum()).collect()
}

/// `σ²_z exp(−d/α)` plus the nugget on the diagonal.
fn oracle_sigma(locs: &[Location], nugget: f64, psill: f64, range: f64) -> Vec<Vec<f64>> {
    (0..locs.len())
        .map(|i| {
            (0..locs.len())
                .map(|j| {
                    let dx = locs[i].easting - locs[j].easting;
                    let dy = locs[i].northing - locs[j].northing;
                    psill * (-(dx * dx + dy * dy).sqrt() / range).exp() + if i == j { nugget } else { 0.0 }
                })
                .collect()
        })
        .collect()
}

fn random_locations(n: usize, rng: &mut impl Rng) -> Vec<Location> {
    (0..n).map(|_| Location::new(rng.random(), rng.random())).collect()
}

// ---------------------------------------------------------------------------
// 1. Reduced rank with knots at the data equals the dense covariance.

fn c1_smw() -> Result<String, String> {
    let mut worst_solve: f64 = 0.0;
    let mut worst_logdet: f64 = 0.0;
    for t in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + t);
        let n = rng.random_range(2..=50);
        let locs = random_locations(n, &mut rng);
        let nugget = rng.random_range(0.05..2.0);
        let psill = rng.random_range(0.5..5.0);
        let range = rng.random_range(0.02..0.5);
        let params = CovarianceParams::new(nugget, psill, range).map_err(|e| e.to_string())?;
        let knots = place_knots(&locs, n, t).map_err(|e| e.to_string())?;
        let solver = reduced_sigma_inverse(&ReducedRankFactors::new(&locs, &knots, &params)).map_err(|e| e.to_string())?;
        let v: Vec<f64> = (0..n).map(|_| gaussian(&mut rng)).collect();
        let got = solver.solve(Mat::from_fn(n, 1, |i, _| v[i]).as_ref());

        let sigma = oracle_sigma(&locs, nugget, psill, range);
        let want = mat_vec(&gj_inverse(&sigma), &v);
        let scale = want.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let err = (0..n).map(|i| (got[(i, 0)] - want[i]).abs()).fold(0.0f64, f64::max) / scale;
        worst_solve = worst_solve.max(err);
        worst_logdet = worst_logdet.max(rel_err(solver.log_det(), gj_log_det(&sigma)));
    }
    let detail = format!("worst rel err: solve {worst_solve:.2e}, log|S| {worst_logdet:.2e} (tol {SMW_REL_TOL:.0e})");
    if worst_solve <= SMW_REL_TOL && worst_logdet <= SMW_REL_TOL {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------
// 2. Universal kriging against the dense formulas.

fn kriging_instance(rng: &mut ChaCha8Rng, n: usize, k: usize, nugget: f64) -> Result<FittedSlm, String> {
    let locs = random_locations(n, rng);
    let x = Mat::from_fn(n, k, |i, j| match j {
        0 => 1.0,
        1 => locs[i].easting,
        _ => locs[i].northing * locs[i].northing,
    });
    let y: Vec<f64> = (0..n).map(|i| 2.0 * locs[i].easting + gaussian(rng)).collect();
    let params = CovarianceParams::new(nugget, rng.random_range(0.5..3.0), rng.random_range(0.05..0.8)).map_err(|e| e.to_string())?;
    let (beta, cov) = profile_beta(&params, x.as_ref(), &y, &locs, &CovarianceForm::Full).map_err(|e| e.to_string())?;
    Ok(FittedSlm {
        recipe: DesignRecipe::new(vec![]).map_err(|e| e.to_string())?,
        params,
        method: Method::Reml,
        form: CovarianceForm::Full,
        beta,
        beta_cov: DenseMatrix::from_mat(cov.as_ref()),
        locations: locs,
        response: y,
        design: DenseMatrix::from_mat(x.as_ref()),
        dropped_columns: vec![],
    })
}

/// Mean and variance straight from the formulas, with GLS `β̂` recomputed.
fn kriging_oracle(m: &FittedSlm, s0: Location, x0: &[f64]) -> (f64, f64) {
    let (n, k) = (m.n(), m.k());
    let p = &m.params;
    let si = gj_inverse(&oracle_sigma(&m.locations, p.nugget, p.partial_sill, p.range));
    let x = |i: usize, j: usize| m.design.get(i, j);
    let xtsx: Vec<Vec<f64>> = (0..k)
        .map(|a| (0..k).map(|b| (0..n).map(|i| (0..n).map(|j| x(i, a) * si[i][j] * x(j, b)).sum::<f64>()).sum()).collect())
        .collect();
    let g = gj_inverse(&xtsx);
    let xtsy: Vec<f64> = (0..k)
        .map(|a| (0..n).map(|i| (0..n).map(|j| x(i, a) * si[i][j] * m.response[j]).sum::<f64>()).sum())
        .collect();
    let beta = mat_vec(&g, &xtsy);
    let c: Vec<f64> = m
        .locations
        .iter()
        .map(|l| {
            let d = l.distance(&s0);
            p.partial_sill * (-d / p.range).exp() + if d == 0.0 { p.nugget } else { 0.0 }
        })
        .collect();
    let sic = mat_vec(&si, &c);
    let resid: Vec<f64> = (0..n).map(|i| m.response[i] - (0..k).map(|a| x(i, a) * beta[a]).sum::<f64>()).collect();
    let mean = (0..k).map(|a| x0[a] * beta[a]).sum::<f64>() + (0..n).map(|i| sic[i] * resid[i]).sum::<f64>();
    let t: Vec<f64> = (0..k).map(|a| x0[a] - (0..n).map(|i| x(i, a) * sic[i]).sum::<f64>()).collect();
    let lev: f64 = (0..k).map(|a| (0..k).map(|b| t[a] * g[a][b] * t[b]).sum::<f64>()).sum();
    let var = p.nugget + p.partial_sill - (0..n).map(|i| c[i] * sic[i]).sum::<f64>() + lev;
    (mean, var)
}

fn c2_kriging() -> Result<String, String> {
    let mut worst_mean: f64 = 0.0;
    let mut worst_var: f64 = 0.0;
    for t in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + t);
        let n = rng.random_range(4..=20);
        let k = rng.random_range(1..=3);
        let nugget = rng.random_range(0.05..1.0);
        let m = kriging_instance(&mut rng, n, k, nugget)?;
        let s0 = Location::new(rng.random(), rng.random());
        let x0: Vec<f64> = (0..k).map(|j| if j == 0 { 1.0 } else { rng.random() }).collect();
        let got = uk_predict(&m, s0, &x0).map_err(|e| e.to_string())?;
        let (mean, var) = kriging_oracle(&m, s0, &x0);
        worst_mean = worst_mean.max((got.mean - mean).abs() / mean.abs().max(1.0));
        worst_var = worst_var.max(rel_err(got.variance, var));
    }
    // nugget 0: predictions at the data reproduce the data with zero variance
    let mut worst_interp: f64 = 0.0;
    for t in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2500 + t);
        let n = rng.random_range(4..=20);
        let k = rng.random_range(1..=3);
        let m = kriging_instance(&mut rng, n, k, 0.0)?;
        let x = m.design.to_mat();
        let preds = KrigingSystem::new(&m)
            .and_then(|s| s.predict(&m.locations, x.as_ref()))
            .map_err(|e| e.to_string())?;
        for (p, y) in preds.iter().zip(&m.response) {
            worst_interp = worst_interp.max((p.mean - y).abs() / y.abs().max(1.0)).max(p.variance / m.params.sill());
        }
    }
    let detail = format!(
        "worst rel err: mean {worst_mean:.2e}, variance {worst_var:.2e}; interpolation {worst_interp:.2e} (tol {KRIGING_REL_TOL:.0e})"
    );
    if worst_mean <= KRIGING_REL_TOL && worst_var <= KRIGING_REL_TOL && worst_interp <= KRIGING_REL_TOL {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------
// 3. Covariance diagnostics of four reference parameter triples.

fn c3_diagnostics() -> Result<String, String> {
    // (model, nugget, partial sill, range, effective range, nugget-to-sill)
    let rows = [
        ("OK", 278.08, 135.05, 139.09, 485.03, 0.67),
        ("SLM", 257.17, 68.59, 189.31, 576.87, 0.79),
        ("SLM-TF", 226.78, 53.03, 167.98, 494.19, 0.81),
        ("RFRK", 261.08, 13.52, 100.66, 160.44, 0.95),
    ];
    let mut bad = Vec::new();
    let mut worst_km: f64 = 0.0;
    let mut worst_ratio: f64 = 0.0;
    for (name, nug, ps, rg, eff, ratio) in rows {
        let p = CovarianceParams::new(nug, ps, rg).map_err(|e| e.to_string())?;
        let (de, dr) = ((effective_range(&p) - eff).abs(), (nugget_to_sill(&p) - ratio).abs());
        worst_km = worst_km.max(de);
        worst_ratio = worst_ratio.max(dr);
        if de > EFF_RANGE_TOL_KM || dr > RATIO_TOL {
            bad.push(format!("{name}: {:.2} km, ratio {:.3}", effective_range(&p), nugget_to_sill(&p)));
        }
    }
    let detail = format!("worst |diff|: {worst_km:.3} km, ratio {worst_ratio:.4}");
    if bad.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; {}", bad.join("; ")))
    }
}

// ---------------------------------------------------------------------------
// 4 and 5. Simulation study.

/// Reference `(RMSPE, PIC90)` for LM, SLM, RF, RFRK in cases 1..=8.
const REFERENCE_SCORES: [[(f64, f64); 4]; 8] = [
    [(3.28, 0.897), (3.22, 0.893), (3.32, 0.869), (3.26, 0.892)],
    [(2.77, 0.901), (1.57, 0.894), (2.80, 0.874), (1.64, 0.897)],
    [(9.03, 0.916), (9.02, 0.914), (7.45, 0.914), (7.45, 0.897)],
    [(7.65, 0.914), (7.40, 0.917), (6.29, 0.916), (5.96, 0.894)],
    [(3.16, 0.897), (3.09, 0.892), (3.24, 0.866), (3.18, 0.892)],
    [(2.66, 0.903), (1.34, 0.894), (2.74, 0.869), (1.53, 0.894)],
    [(4.23, 0.900), (4.19, 0.899), (4.54, 0.959), (4.51, 0.899)],
    [(3.58, 0.899), (2.82, 0.907), (3.85, 0.955), (3.16, 0.905)],
];
const SIM_ORDER: [ModelKind; 4] = [ModelKind::Lm, ModelKind::Slm, ModelKind::Rf, ModelKind::Rfrk];

fn simulation_reports() -> Result<Vec<CaseReport>, String> {
    let options = if full_mode() { SimOptions::default() } else { SimOptions::fast() };
    SimCase::all()
        .iter()
        .map(|case| run_case(case, &options).map_err(|e| e.to_string()))
        .collect()
}

fn reduction(better: f64, worse: f64) -> f64 {
    (worse - better) / worse
}

fn c4_simulation(reports: &[CaseReport]) -> Result<String, String> {
    let tol = if full_mode() { SIM_RMSPE_REL_TOL_FULL } else { SIM_RMSPE_REL_TOL_FAST };
    let mut bad = Vec::new();
    let mut worst_rmspe: f64 = 0.0;
    let mut worst_pic: f64 = 0.0;
    let mut cells: Vec<[(f64, f64); 4]> = Vec::new();
    for (r, want) in reports.iter().zip(REFERENCE_SCORES) {
        let mut row = [(0.0, 0.0); 4];
        for (j, kind) in SIM_ORDER.iter().enumerate() {
            let (rmspe, pic) = r.score(*kind).ok_or("missing model score")?;
            row[j] = (rmspe, pic);
            let (e_r, e_p) = (rel_err(rmspe, want[j].0), (pic - want[j].1).abs());
            worst_rmspe = worst_rmspe.max(e_r);
            worst_pic = worst_pic.max(e_p);
            if e_r > tol || e_p > SIM_PIC90_TOL {
                bad.push(format!("case {} {}: {rmspe:.2}/{pic:.3} vs {:.2}/{:.3}", r.case.id, kind.label(), want[j].0, want[j].1));
            }
        }
        cells.push(row);
    }
    let forest_margin = if full_mode() { ORDER_MARGIN_FOREST } else { ORDER_MARGIN_FOREST_FAST };
    let [lm, slm, rf, rfrk] = [0, 1, 2, 3];
    for case in [2usize, 6] {
        let c = &cells[case - 1];
        for s in [slm, rfrk] {
            for o in [lm, rf] {
                if reduction(c[s].0, c[o].0) <= ORDER_MARGIN_SPATIAL {
                    bad.push(format!("case {case}: ordering {} vs {}", SIM_ORDER[s].label(), SIM_ORDER[o].label()));
                }
            }
        }
    }
    for case in [3usize, 4] {
        let c = &cells[case - 1];
        let forest = c[rf].0.min(c[rfrk].0);
        let linear = c[lm].0.min(c[slm].0);
        if reduction(forest, linear) <= forest_margin {
            bad.push(format!("case {case}: forest family gains only {:.1}% (need {:.0}%)", 100.0 * reduction(forest, linear), 100.0 * forest_margin));
        }
    }
    for case in [7usize, 8] {
        let c = &cells[case - 1];
        if [lm, rf, rfrk].iter().any(|&o| c[o].0 <= c[slm].0) {
            bad.push(format!("case {case}: SLM not best"));
        }
        if c[rf].1 < RF_OVERCOVERAGE {
            bad.push(format!("case {case}: RF PIC90 {:.3} < {RF_OVERCOVERAGE}", c[rf].1));
        }
    }
    let mode = if full_mode() { "full" } else { "fast" };
    let detail = format!("{mode} mode, worst RMSPE rel err {worst_rmspe:.3} (tol {tol}), worst PIC90 err {worst_pic:.3}");
    if bad.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; {}", bad.join("; ")))
    }
}

fn c5_calibration(reports: &[CaseReport]) -> Result<String, String> {
    let avg = |ids: &[usize]| ids.iter().map(|&i| reports[i - 1].mean_a()).sum::<f64>() / ids.len() as f64;
    let a_nl = avg(&[1, 2, 3, 4]);
    let a_l = avg(&[5, 6, 7, 8]);
    let c1 = reports[0].mean_c();
    let detail = format!("mean a NL {a_nl:.3}, L {a_l:.3}; case-1 c {c1:.3}");
    let inside = |v: f64, (lo, hi): (f64, f64)| (lo..=hi).contains(&v);
    if inside(a_nl, A_NL) && inside(a_l, A_L) && inside(c1, C_CASE1) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------
// 6. REML recovery on the case-6 geometry.

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn c6_reml() -> Result<String, String> {
    let case = SimCase::get(6).map_err(|e| e.to_string())?;
    let truth = case.params();
    let mut psill_err = Vec::new();
    let mut range_err = Vec::new();
    let (mut hits, mut total) = (0.0, 0usize);
    for rep in 0..20 {
        let seed = replicate_seed(6006, case.id, rep);
        let data = generate(&case, 500, 1000, seed).map_err(|e| e.to_string())?;
        let opts = PipelineOptions {
            seed,
            fixed_recipe: Some(DesignRecipe::untransformed(&data.train.sites)),
            ..Default::default()
        };
        let fit = fit_pipeline(ModelKind::Slm, &data.train, &opts).map_err(|e| e.to_string())?;
        let FittedModel::Slm(slm) = &fit.model else {
            return Err("SLM pipeline returned another model".into());
        };
        psill_err.push(rel_err(slm.model.params.partial_sill, truth.partial_sill));
        range_err.push(rel_err(slm.model.params.range, truth.range));
        let preds = predict_pipeline(&fit, &data.test.sites).map_err(|e| e.to_string())?;
        let iv: Vec<(f64, f64)> = preds.iter().map(|p| p.interval(IntervalLevel::P90)).collect();
        hits += interval_coverage(&data.test.response, &iv).map_err(|e| e.to_string())? * iv.len() as f64;
        total += iv.len();
    }
    let (mp, mr, cov) = (median(psill_err), median(range_err), hits / total as f64);
    let detail = format!("median rel err psill {mp:.3}, range {mr:.3}; pooled PIC90 {cov:.3}");
    if mp <= REML_MEDIAN_REL_ERR && mr <= REML_MEDIAN_REL_ERR && (COVERAGE_BAND.0..=COVERAGE_BAND.1).contains(&cov) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------
// 7. Forest properties.

fn random_features(n: usize, p: usize, rng: &mut ChaCha8Rng) -> (Features, Vec<f64>) {
    let cols: Vec<Vec<f64>> = (0..p).map(|_| (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let y: Vec<f64> = (0..n)
        .map(|i| cols[0][i].powi(2) + if p > 1 { cols[1][i] } else { 0.0 } + 0.3 * gaussian(rng))
        .collect();
    let names: Vec<String> = (0..p).map(|j| format!("x{j}")).collect();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    (Features::numeric(&refs, cols).unwrap(), y)
}

fn sse(y: &[f64]) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    let m = y.iter().sum::<f64>() / y.len() as f64;
    y.iter().map(|v| (v - m).powi(2)).sum()
}

/// Best root SSE over every threshold of every variable.
fn exhaustive_root_sse(x: &Features, y: &[f64]) -> f64 {
    let mut best = f64::INFINITY;
    for col in &x.columns {
        let mut cuts: Vec<f64> = col.clone();
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        for &c in &cuts[..cuts.len() - 1] {
            let (l, r): (Vec<f64>, Vec<f64>) = {
                let l = (0..y.len()).filter(|&i| col[i] <= c).map(|i| y[i]).collect();
                let r = (0..y.len()).filter(|&i| col[i] > c).map(|i| y[i]).collect();
                (l, r)
            };
            best = best.min(sse(&l) + sse(&r));
        }
    }
    best
}

fn c7_forest() -> Result<String, String> {
    let pool = |t| rayon::ThreadPoolBuilder::new().num_threads(t).build().unwrap();
    let (one, four) = (pool(1), pool(4));
    let mut failures = BTreeMap::<&str, usize>::new();
    for t in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(7000 + t);
        let n = rng.random_range(10..60);
        let p = rng.random_range(1..=4);
        let (x, y) = random_features(n, p, &mut rng);
        let opts = ForestOptions {
            trees: 60,
            mtry: Some(rng.random_range(1..=p)),
            min_node_size: rng.random_range(1..=5),
            seed: t,
            bootstrap: true,
        };
        let a = one.install(|| fit_forest(&x, &y, &opts)).map_err(|e| e.to_string())?;
        let b = four.install(|| fit_forest(&x, &y, &opts)).map_err(|e| e.to_string())?;
        if a != b {
            *failures.entry("thread reproducibility").or_default() += 1;
        }
        let (ymin, ymax) = y.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        for _ in 0..20 {
            let row: Vec<f64> = (0..p).map(|_| rng.random_range(-4.0..4.0)).collect();
            let pred = rf_predict(&a, &row).map_err(|e| e.to_string())?;
            if !(ymin..=ymax).contains(&pred) {
                *failures.entry("range containment").or_default() += 1;
            }
            let q = qrf_quantiles(&a, &row, &[0.05, 0.5, 0.95]).map_err(|e| e.to_string())?;
            if !(q[0] <= q[1] && q[1] <= q[2]) {
                *failures.entry("quantile monotonicity").or_default() += 1;
            }
            if rf_predict(&b, &row).map_err(|e| e.to_string())?.to_bits() != pred.to_bits() {
                *failures.entry("thread reproducibility").or_default() += 1;
            }
        }

        let m = rng.random_range(2..=12);
        let (xs, ys) = random_features(m, p, &mut rng);
        let single = ForestOptions {
            trees: 1,
            mtry: Some(p),
            min_node_size: 1,
            seed: t,
            bootstrap: false,
        };
        let f = fit_forest(&xs, &ys, &single).map_err(|e| e.to_string())?;
        let root_sse = match &f.trees[0].nodes[0] {
            Node::Split {
                variable,
                rule: SplitRule::Numeric(th),
                ..
            } => {
                let col = &xs.columns[*variable];
                let l: Vec<f64> = (0..m).filter(|&i| col[i] <= *th).map(|i| ys[i]).collect();
                let r: Vec<f64> = (0..m).filter(|&i| col[i] > *th).map(|i| ys[i]).collect();
                sse(&l) + sse(&r)
            }
            Node::Leaf { .. } => sse(&ys),
            Node::Split { .. } => return Err("numeric data produced a categorical split".into()),
        };
        let best = exhaustive_root_sse(&xs, &ys);
        if root_sse > best + 1e-9 * sse(&ys).max(1.0) {
            *failures.entry("split optimality").or_default() += 1;
        }
    }
    if failures.is_empty() {
        Ok("100 trials: containment, monotonicity, 1 vs 4 threads, root split optimality".into())
    } else {
        Err(format!("{failures:?}"))
    }
}

// ---------------------------------------------------------------------------
// 8. Planted transformation shapes.

fn planted(shape: usize, seed: u64) -> Result<SpatialDataset, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 200;
    let locs = random_locations(n, &mut rng);
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let e = 0.5 * gaussian(&mut rng);
        let (xi, yi) = match shape {
            // log
            0 => {
                let v = rng.random_range(-1.0f64..4.0).exp();
                (v, 2.0 + 1.5 * v.ln() + e)
            }
            // quadratic in log
            1 => {
                let v = rng.random_range(-1.0f64..4.0).exp();
                let g = v.ln();
                (v, 1.0 + 2.0 * g - 0.6 * g * g + e)
            }
            // zero inflated: a jump at zero plus a log slope
            _ => {
                if rng.random::<f64>() < 0.3 {
                    (0.0, 1.0 + e)
                } else {
                    let v = rng.random_range(-1.0f64..4.0).exp();
                    (v, 3.0 + 1.2 * v.ln() + e)
                }
            }
        };
        x.push(xi);
        y.push(yi);
    }
    SpatialDataset::new(locs, y, vec![Covariate::numeric("x", x)]).map_err(|e| e.to_string())
}

fn c8_transforms() -> Result<String, String> {
    // A planted log curve is identified by its power (λ₁ = 0). Linear versus
    // the nested quadratic form is left to AIC, which adds a null square term
    // about 16% of the time (P(χ²₁ > 2)); that count is reported too.
    let planted_ok = [
        |f: TransformFamily, l1: f64| l1 == 0.0 && TransformFamily::REGULAR.contains(&f),
        |f: TransformFamily, l1: f64| l1 == 0.0 && f == TransformFamily::BoxCoxQuadratic,
        |f: TransformFamily, l1: f64| l1 == 0.0 && f == TransformFamily::IndicatorPlusInteraction,
    ];
    let names = ["log", "quadratic-in-log", "zero-inflated"];
    let mut parts = Vec::new();
    let mut ok = true;
    let mut strict_linear = 0;
    for (shape, accept) in planted_ok.iter().enumerate() {
        let mut hits = 0;
        for rep in 0..20u64 {
            let data = planted(shape, 8000 + 100 * shape as u64 + rep)?;
            let spec = select_transform(&data, "x", &TransformOptions::default()).map_err(|e| e.to_string())?;
            if accept(spec.family, spec.lambda1) {
                hits += 1;
            }
            if shape == 0 && spec.family == TransformFamily::BoxCoxLinear && spec.lambda1 == 0.0 {
                strict_linear += 1;
            }
        }
        ok &= hits >= MIN_HITS;
        parts.push(format!("{} {hits}/20", names[shape]));
    }
    let detail = format!("{} (log as the linear form exactly: {strict_linear}/20)", parts.join(", "));
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------
// 9. Cross-validated ordering on data with nonlinear effects and a spatial
// error field.

fn pipeline_data(seed: u64, n: usize) -> Result<SpatialDataset, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let locs = random_locations(n, &mut rng);
    let field = geoforest::sim::sample_grf(&locs, &CovarianceParams::new(0.5, 1.5, 0.15).unwrap(), &mut rng)
        .map_err(|e| e.to_string())?;
    let mut x1 = Vec::with_capacity(n);
    let mut x2 = Vec::with_capacity(n);
    let mut x3 = Vec::with_capacity(n);
    let mut x4 = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for (i, l) in locs.iter().enumerate() {
        let a = rng.random_range(-1.0f64..4.0).exp();
        let b = rng.random_range(-1.0f64..4.0).exp();
        let c = if rng.random::<f64>() < 0.3 { 0.0 } else { rng.random_range(-1.0f64..3.0).exp() };
        let d = l.easting + 0.5 * gaussian(&mut rng);
        let (ga, gb) = (a.ln(), b.ln());
        let jump = if c != 0.0 { 1.5 + 0.8 * c.ln() } else { 0.0 };
        y.push(1.5 * ga + 2.0 * gb - 0.5 * gb * gb + jump + field[i]);
        x1.push(a);
        x2.push(b);
        x3.push(c);
        x4.push(d);
    }
    SpatialDataset::new(
        locs,
        y,
        vec![
            Covariate::numeric("x1", x1),
            Covariate::numeric("x2", x2),
            Covariate::numeric("x3", x3),
            Covariate::numeric("noise", x4),
        ],
    )
    .map_err(|e| e.to_string())
}

const C9_MODELS: [ModelKind; 5] = [ModelKind::Ok, ModelKind::Slm, ModelKind::SlmTf, ModelKind::Rf, ModelKind::Rfrk];

fn c9_ordering() -> Result<String, String> {
    let n = 400;
    let mut hits = 0;
    let mut misses = Vec::new();
    let mut pooled = [0.0f64; 5];
    for rep in 0..20u64 {
        let seed = 9000 + rep;
        let data = pipeline_data(seed, n)?;
        let options = CvOptions {
            seed,
            pipeline: PipelineOptions {
                seed,
                forest: ForestOptions {
                    trees: 500,
                    ..Default::default()
                },
                residuals: ResidualMode::OutOfBag,
                ..Default::default()
            },
            ..Default::default()
        };
        let mut rmspe = [0.0; 5];
        let mut pic = [0.0; 5];
        for (j, kind) in C9_MODELS.iter().enumerate() {
            let r = kfold_cv(&data, *kind, &options).map_err(|e| format!("{}: {e}", kind.label()))?;
            rmspe[j] = r.rmspe;
            pic[j] = r.pic90.unwrap_or(f64::NAN);
            pooled[j] += pic[j];
        }
        let ordered = rmspe[2] < rmspe[1] && rmspe[1] < rmspe[0];
        let covered = pic.iter().all(|v| (COVERAGE_BAND.0..=COVERAGE_BAND.1).contains(v));
        if ordered && covered {
            hits += 1;
        } else {
            misses.push(format!(
                "rep {rep}: RMSPE {:.3}/{:.3}/{:.3} PIC90 {}",
                rmspe[0],
                rmspe[1],
                rmspe[2],
                pic.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join("/")
            ));
        }
    }
    let mean_pic = C9_MODELS
        .iter()
        .zip(pooled)
        .map(|(k, v)| format!("{} {:.3}", k.label(), v / 20.0))
        .collect::<Vec<_>>()
        .join(", ");
    let detail = format!("n = {n}: {hits}/20 replicates; mean PIC90 {mean_pic}");
    if hits >= MIN_HITS {
        Ok(detail)
    } else {
        Err(format!("{detail}; {}", misses.join("; ")))
    }
}

// ---------------------------------------------------------------------------
// 10. Model files.

fn serialization_data(seed: u64) -> Result<(SpatialDataset, SpatialDataset), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let make = |n: usize, rng: &mut ChaCha8Rng| {
        let locs = random_locations(n, rng);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..5.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| gaussian(rng)).collect();
        let y: Vec<f64> = (0..n).map(|i| a[i].ln() + b[i] + locs[i].northing + 0.3 * gaussian(rng)).collect();
        SpatialDataset::new(locs, y, vec![Covariate::numeric("a", a), Covariate::numeric("b", b)])
    };
    let train = make(rng.random_range(30..60), &mut rng).map_err(|e| e.to_string())?;
    let test = make(25, &mut rng).map_err(|e| e.to_string())?;
    Ok((train, test))
}

fn c10_serialization() -> Result<String, String> {
    let kinds = [ModelKind::Slm, ModelKind::Rf, ModelKind::Rfrk];
    let mut mismatched = Vec::new();
    for t in 0..100u64 {
        let kind = kinds[t as usize % 3];
        let (train, test) = serialization_data(10_000 + t)?;
        let opts = PipelineOptions {
            seed: t,
            forest: ForestOptions {
                trees: 50,
                ..Default::default()
            },
            ..Default::default()
        };
        let fit = fit_pipeline(kind, &train, &opts).map_err(|e| e.to_string())?;
        let back = from_json(&to_json(&fit).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let before = predict_pipeline(&fit, &test.sites).map_err(|e| e.to_string())?;
        let after = predict_pipeline(&back, &test.sites).map_err(|e| e.to_string())?;
        let bits = |p: &geoforest::pipeline::Prediction| {
            [Some(p.mean), p.variance, Some(p.lower90), Some(p.upper90), Some(p.lower95), Some(p.upper95)].map(|v| v.map(f64::to_bits))
        };
        if before.len() != after.len() || before.iter().zip(&after).any(|(a, b)| bits(a) != bits(b)) {
            mismatched.push(format!("trial {t} ({})", kind.label()));
        }
    }
    if mismatched.is_empty() {
        Ok("100 round trips (SLM, RF, RFRK) bit-identical".into())
    } else {
        Err(mismatched.join(", "))
    }
}

// ---------------------------------------------------------------------------

fn run(id: usize, name: &str, f: impl FnOnce() -> Result<String, String>) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => {
            println!("PASS criterion {id:>2} {name}: {detail} [{secs:.1}s]");
            true
        }
        Err(detail) => {
            println!("FAIL criterion {id:>2} {name}: {detail} [{secs:.1}s]");
            false
        }
    }
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("GEOFOREST_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let wanted = |id: usize| only.as_ref().is_none_or(|o| o.contains(&id));
    let mut results = Vec::new();

    if wanted(1) {
        results.push(run(1, "reduced-rank equivalence", c1_smw));
    }
    if wanted(2) {
        results.push(run(2, "kriging oracle", c2_kriging));
    }
    if wanted(3) {
        results.push(run(3, "covariance diagnostics", c3_diagnostics));
    }
    if wanted(4) || wanted(5) {
        let start = Instant::now();
        let reports = simulation_reports();
        eprintln!("simulation study took {:.1}s", start.elapsed().as_secs_f64());
        if wanted(4) {
            results.push(run(4, "simulation study", || c4_simulation(reports.as_ref().map_err(Clone::clone)?)));
        }
        if wanted(5) {
            results.push(run(5, "calibration anchors", || c5_calibration(reports.as_ref().map_err(Clone::clone)?)));
        }
    }
    if wanted(6) {
        results.push(run(6, "REML recovery", c6_reml));
    }
    if wanted(7) {
        results.push(run(7, "forest properties", c7_forest));
    }
    if wanted(8) {
        results.push(run(8, "transformation recovery", c8_transforms));
    }
    if wanted(9) {
        results.push(run(9, "cross-validated ordering", c9_ordering));
    }
    if wanted(10) {
        results.push(run(10, "model round trips", c10_serialization));
    }

    let passed = results.iter().filter(|&&r| r).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
