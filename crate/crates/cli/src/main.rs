//! `geoforest`: batch front end for transformation search, model fitting,
//! prediction, cross-validation and the simulation study.
//!
//! Every run writes CSV outputs plus `manifest.txt` into `--out`.

mod config;

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use geoforest::data::{load_csv, load_sites, SpatialDataset};
use geoforest::eval::{kfold_cv, write_cv_table, write_interval_summary, CvOptions};
use geoforest::forest::{permutation_importance, write_importance, ForestOptions, PermutationMode};
use geoforest::model_io::{load_model, save_model};
use geoforest::pipeline::{fit_pipeline, predict_pipeline, FittedModel, ModelKind, PipelineFit, PipelineOptions};
use geoforest::rfrk::ResidualMode;
use geoforest::selection::TRACE_HEADER;
use geoforest::sim::{run_case, write_case_table, SimCase, SimOptions, SIM_MODELS};
use geoforest::slm::{FitOptions, SlmFit};
use geoforest::transform::{select_all, write_transform_table, TransformOptions};
use geoforest::Error;

use config::{load_schema_file, parse_bounds, write_manifest, FileConfig, Resolved};

const EXIT_INPUT: u8 = 2;
const EXIT_FIT: u8 = 3;
const EXIT_NONCONVERGENCE: u8 = 4;

#[derive(Parser, Debug)]
#[command(
    name = "geoforest",
    version,
    about = "Spatial linear models, kriging and random forests for spatial prediction",
    after_help = "Every option can also be set in a TOML file passed with --config; flags and their \
                  GEOFOREST_* environment variables take precedence over the file.\n\n\
                  Exit codes: 0 success, 2 input error, 3 fit failure, 4 optimizer did not converge \
                  (outputs are still written)."
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true, env = "GEOFOREST_CONFIG")]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, global = true, env = "GEOFOREST_OUT")]
    out: Option<PathBuf>,
    #[arg(long, global = true, env = "GEOFOREST_SEED")]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, env = "GEOFOREST_THREADS")]
    threads: Option<usize>,
    /// Input CSV (training data, or prediction sites for `predict`).
    #[arg(long, global = true, env = "GEOFOREST_INPUT")]
    input: Option<PathBuf>,
    /// TOML file with column roles (easting, northing, response, covariates, categorical, ignore).
    #[arg(long, global = true, env = "GEOFOREST_SCHEMA")]
    schema: Option<PathBuf>,
    #[arg(long, global = true, env = "GEOFOREST_EASTING")]
    easting: Option<String>,
    #[arg(long, global = true, env = "GEOFOREST_NORTHING")]
    northing: Option<String>,
    #[arg(long, global = true, env = "GEOFOREST_RESPONSE")]
    response: Option<String>,
    /// Comma-separated categorical covariates.
    #[arg(long, global = true, env = "GEOFOREST_CATEGORICAL", value_delimiter = ',')]
    categorical: Option<Vec<String>>,
    /// Knots for reduced-rank covariate pruning.
    #[arg(long, global = true, env = "GEOFOREST_KNOTS")]
    knots: Option<usize>,
    #[arg(long, global = true, env = "GEOFOREST_TREES")]
    trees: Option<usize>,
    #[arg(long, global = true, env = "GEOFOREST_MTRY")]
    mtry: Option<usize>,
    #[arg(long, global = true, env = "GEOFOREST_MIN_NODE_SIZE")]
    min_node_size: Option<usize>,
    /// Optimizer restarts for covariance fits.
    #[arg(long, global = true, env = "GEOFOREST_RESTARTS")]
    restarts: Option<usize>,
    /// Iteration cap per optimizer run.
    #[arg(long, global = true, env = "GEOFOREST_MAX_ITER")]
    max_iter: Option<usize>,
    /// Prune the covariate with the largest |t| instead of the smallest.
    #[arg(long, global = true, env = "GEOFOREST_LITERAL_TSTAT")]
    literal_tstat: bool,
    /// Krige out-of-bag forest residuals instead of in-sample ones.
    #[arg(long, global = true, env = "GEOFOREST_OOB_RESIDUALS")]
    oob_residuals: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Choose a transformation for every numeric covariate.
    Transform,
    /// Fit a model and write it with diagnostics.
    Fit {
        /// ok, lm, slm, lm-tf, slm-tf, rf or rfrk.
        #[arg(long, env = "GEOFOREST_MODEL")]
        model: Option<String>,
    },
    /// Predict at new sites from a saved model.
    Predict {
        /// Model file written by `fit`.
        #[arg(long, env = "GEOFOREST_MODEL_FILE")]
        model_file: PathBuf,
        /// Clamp predictions and interval bounds to `lo,hi`.
        #[arg(long, env = "GEOFOREST_TRUNCATE", value_parser = parse_bounds, allow_hyphen_values = true)]
        truncate: Option<[f64; 2]>,
    },
    /// k-fold cross-validation comparison of model families.
    Cv {
        /// Comma-separated models; defaults to ok,lm,slm,lm-tf,slm-tf,rf,rfrk.
        #[arg(long, env = "GEOFOREST_MODELS", value_delimiter = ',')]
        models: Option<Vec<String>>,
        #[arg(long, env = "GEOFOREST_FOLDS")]
        folds: Option<usize>,
        /// Reuse the full-data transformation and selection in every fold.
        #[arg(long, env = "GEOFOREST_FAST")]
        fast: bool,
    },
    /// Run the eight-case simulation study.
    Simulate {
        /// Case to run (repeatable).
        #[arg(long = "case", conflicts_with = "all")]
        cases: Vec<usize>,
        #[arg(long)]
        all: bool,
        /// 200 training points and 10 replicates per case.
        #[arg(long, env = "GEOFOREST_FAST")]
        fast: bool,
        #[arg(long, env = "GEOFOREST_REPLICATES")]
        replicates: Option<usize>,
        /// Krige in-sample forest residuals in RFRK (the harness uses out-of-bag ones).
        #[arg(long)]
        in_sample_residuals: bool,
    },
}

#[derive(Debug)]
enum Failure {
    Input(String),
    Fit(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Singular(_) | Error::NonConvergence { .. } => Failure::Fit(e.to_string()),
            _ => Failure::Input(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Input(e.to_string())
    }
}

type CmdResult = Result<bool, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("warning: covariance optimizer did not converge; outputs use the best parameters found");
            ExitCode::from(EXIT_NONCONVERGENCE)
        }
        Err(Failure::Input(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_INPUT)
        }
        Err(Failure::Fit(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_FIT)
        }
    }
}

fn resolve(cli: &Cli) -> Result<Resolved, Failure> {
    let c = &cli.common;
    let file = match &c.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let mut schema = match &c.schema {
        Some(p) => load_schema_file(p)?,
        None => file.schema.clone().unwrap_or_default(),
    };
    if let Some(v) = &c.easting {
        schema.easting = v.clone();
    }
    if let Some(v) = &c.northing {
        schema.northing = v.clone();
    }
    if let Some(v) = &c.response {
        schema.response = Some(v.clone());
    }
    if let Some(v) = &c.categorical {
        schema.categorical = v.clone();
    }

    let mut in_sample_residuals = false;
    let (command, model, model_file, truncate, models, folds, fast, replicates, cases) = match &cli.command {
        Command::Transform => ("transform", None, None, None, None, None, false, None, vec![]),
        Command::Fit { model } => ("fit", model.clone(), None, None, None, None, false, None, vec![]),
        Command::Predict { model_file, truncate } => (
            "predict",
            None,
            Some(model_file.clone()),
            truncate.or(file.truncate),
            None,
            None,
            false,
            None,
            vec![],
        ),
        Command::Cv { models, folds, fast } => ("cv", None, None, None, models.clone(), *folds, *fast, None, vec![]),
        Command::Simulate {
            cases,
            all,
            fast,
            replicates,
            in_sample_residuals: ins,
        } => {
            in_sample_residuals = *ins;
            let cases = if *all || cases.is_empty() {
                (1..=8).collect()
            } else {
                cases.clone()
            };
            ("simulate", None, None, None, None, None, *fast, *replicates, cases)
        }
    };
    if let Some([lo, hi]) = truncate {
        if !(lo <= hi) {
            return Err(Failure::Input(format!("truncation bounds {lo},{hi} are out of order")));
        }
    }

    Ok(Resolved {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: c.seed.or(file.seed).unwrap_or(0),
        threads: c.threads.or(file.threads),
        out: c.out.clone().or(file.out.clone()).unwrap_or_else(|| PathBuf::from(".")),
        input: c.input.clone().or(file.input.clone()),
        model_file,
        model: model.or(file.model.clone()),
        models: models
            .or(file.models.clone())
            .unwrap_or_else(|| ModelKind::TABLE.iter().map(|k| k.label().to_ascii_lowercase()).collect()),
        knots: c.knots.or(file.knots),
        trees: c.trees.or(file.trees).unwrap_or(ForestOptions::default().trees),
        mtry: c.mtry.or(file.mtry),
        min_node_size: c.min_node_size.or(file.min_node_size).unwrap_or(ForestOptions::default().min_node_size),
        restarts: c.restarts.or(file.restarts).unwrap_or(FitOptions::default().restarts),
        max_iter: c.max_iter.or(file.max_iter).unwrap_or(FitOptions::default().max_iter),
        literal_tstat: c.literal_tstat || file.literal_tstat.unwrap_or(false),
        oob_residuals: c.oob_residuals || file.oob_residuals.unwrap_or(false),
        in_sample_residuals,
        truncate,
        folds: folds.or(file.folds).unwrap_or(10),
        fast: fast || file.fast.unwrap_or(false),
        replicates: replicates.or(file.replicates),
        cases,
        schema,
    })
}

fn pipeline_options(r: &Resolved) -> PipelineOptions {
    PipelineOptions {
        seed: r.seed,
        transform: TransformOptions::default(),
        knots: r.knots,
        literal_tstat: r.literal_tstat,
        fit: FitOptions {
            restarts: r.restarts,
            max_iter: r.max_iter,
            seed: r.seed,
            ..Default::default()
        },
        forest: ForestOptions {
            trees: r.trees,
            mtry: r.mtry,
            min_node_size: r.min_node_size,
            seed: r.seed,
            bootstrap: true,
        },
        residuals: if r.oob_residuals {
            ResidualMode::OutOfBag
        } else {
            ResidualMode::InSample
        },
        fixed_recipe: None,
    }
}

fn run(cli: Cli) -> CmdResult {
    let r = resolve(&cli)?;
    if let Some(t) = r.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build_global()
            .map_err(|e| Failure::Input(format!("thread pool: {e}")))?;
    }
    fs::create_dir_all(&r.out)?;
    match r.command.as_str() {
        "transform" => cmd_transform(&r),
        "fit" => cmd_fit(&r),
        "predict" => cmd_predict(&r),
        "cv" => cmd_cv(&r),
        _ => cmd_simulate(&r),
    }
}

fn input(r: &Resolved) -> Result<&PathBuf, Failure> {
    r.input
        .as_ref()
        .ok_or_else(|| Failure::Input("no input file; pass --input or set `input` in the config".into()))
}

fn training_data(r: &Resolved) -> Result<SpatialDataset, Failure> {
    let path = input(r)?;
    if r.schema.response.is_none() {
        return Err(Failure::Input("no response column; pass --response or set schema.response".into()));
    }
    load_csv(path, &r.schema).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn out_file(r: &Resolved, name: &str) -> Result<BufWriter<File>, Failure> {
    Ok(BufWriter::new(File::create(r.out.join(name))?))
}

fn cmd_transform(r: &Resolved) -> CmdResult {
    let ds = training_data(r)?;
    let (_, specs) = select_all(&ds, &TransformOptions::default());
    write_transform_table(&specs, out_file(r, "transforms.csv")?)?;
    write_manifest(r, &[("covariates", specs.len().to_string())])?;
    Ok(true)
}

fn parse_model(name: Option<&str>) -> Result<ModelKind, Failure> {
    let name = name.ok_or_else(|| Failure::Input("no model; pass --model".into()))?;
    Ok(name.parse::<ModelKind>()?)
}

fn slm_diagnostics(fit: &SlmFit) -> Vec<(String, String)> {
    let p = &fit.model.params;
    let d = &fit.diagnostics;
    vec![
        ("method".into(), format!("{:?}", fit.model.method)),
        ("nugget".into(), p.nugget.to_string()),
        ("partial_sill".into(), p.partial_sill.to_string()),
        ("range".into(), p.range.to_string()),
        ("effective_range".into(), d.effective_range.to_string()),
        ("nugget_to_sill".into(), d.nugget_to_sill.to_string()),
        ("neg_log_lik".into(), d.neg_log_lik.to_string()),
        ("aic".into(), d.aic.to_string()),
        ("iterations".into(), d.iterations.to_string()),
        ("converged".into(), d.converged.to_string()),
    ]
}

fn write_fit_reports(r: &Resolved, fit: &PipelineFit, n: usize) -> Result<(), Failure> {
    let mut rows: Vec<(String, String)> = vec![
        ("model".into(), fit.kind.label().into()),
        ("n".into(), n.to_string()),
        ("k".into(), fit.k_params().map_or(String::new(), |k| k.to_string())),
    ];
    let mut coef = csv::Writer::from_writer(out_file(r, "coefficients.csv")?);
    coef.write_record(["term", "estimate", "std_error", "t"]).map_err(Error::from)?;
    match &fit.model {
        FittedModel::Slm(f) => {
            rows.extend(slm_diagnostics(f));
            let m = &f.model;
            for (j, label) in m.recipe.labels().iter().enumerate() {
                let se = m.beta_cov.get(j, j).sqrt();
                coef.write_record([label.clone(), m.beta[j].to_string(), se.to_string(), (m.beta[j] / se).to_string()])
                    .map_err(Error::from)?;
            }
        }
        FittedModel::Lm { recipe, fit: ols } => {
            rows.push(("aic".into(), ols.aic().to_string()));
            rows.push(("sigma2".into(), ols.sigma2().to_string()));
            let t = ols.t_stats();
            for (j, label) in recipe.labels().iter().enumerate() {
                let se = ols.beta[j] / t[j];
                coef.write_record([label.clone(), ols.beta[j].to_string(), se.abs().to_string(), t[j].to_string()])
                    .map_err(Error::from)?;
            }
        }
        FittedModel::Rf(forest) => {
            let imp = permutation_importance(forest, PermutationMode::Shuffle);
            write_importance(forest, &imp, out_file(r, "importance.csv")?)?;
        }
        FittedModel::Rfrk(m) => {
            let p = &m.residual_model.params;
            rows.push(("residual_nugget".into(), p.nugget.to_string()));
            rows.push(("residual_partial_sill".into(), p.partial_sill.to_string()));
            rows.push(("residual_range".into(), p.range.to_string()));
            rows.push(("converged".into(), m.converged.to_string()));
            let imp = permutation_importance(&m.forest, PermutationMode::Shuffle);
            write_importance(&m.forest, &imp, out_file(r, "importance.csv")?)?;
        }
        FittedModel::Mean { mean, variance, .. } => {
            rows.push(("mean".into(), mean.to_string()));
            rows.push(("variance".into(), variance.to_string()));
        }
    }
    coef.flush()?;

    let mut w = csv::Writer::from_writer(out_file(r, "diagnostics.csv")?);
    w.write_record(["key", "value"]).map_err(Error::from)?;
    for (k, v) in &rows {
        w.write_record([k, v]).map_err(Error::from)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_writer(out_file(r, "selection.csv")?);
    w.write_record(TRACE_HEADER).map_err(Error::from)?;
    fit.stepwise.write_csv("stepwise", &mut w)?;
    fit.pruning.write_csv("prune", &mut w)?;
    w.flush()?;

    if !fit.transforms.is_empty() {
        write_transform_table(&fit.transforms, out_file(r, "transforms.csv")?)?;
    }
    Ok(())
}

fn cmd_fit(r: &Resolved) -> CmdResult {
    let kind = parse_model(r.model.as_deref())?;
    let ds = training_data(r)?;
    let fit = fit_pipeline(kind, &ds, &pipeline_options(r))?;
    save_model(&fit, r.out.join("model.json"))?;
    write_fit_reports(r, &fit, ds.n())?;
    write_manifest(r, &[("model", kind.label().into()), ("converged", fit.converged.to_string())])?;
    Ok(fit.converged)
}

fn cmd_predict(r: &Resolved) -> CmdResult {
    let model_file = r.model_file.as_ref().expect("predict always has a model file");
    let fit = load_model(model_file).map_err(|e| Failure::Input(format!("{}: {e}", model_file.display())))?;
    let path = input(r)?;
    let sites = load_sites(path, &r.schema).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    let mut preds = predict_pipeline(&fit, &sites).map_err(|e| Failure::Input(e.to_string()))?;

    let mut truncated = 0usize;
    if let Some([lo, hi]) = r.truncate {
        for p in &mut preds {
            let m = p.mean.clamp(lo, hi);
            if m != p.mean {
                truncated += 1;
            }
            p.mean = m;
            for b in [&mut p.lower90, &mut p.upper90, &mut p.lower95, &mut p.upper95] {
                *b = b.clamp(lo, hi);
            }
        }
        eprintln!("truncated {truncated} of {} predictions to [{lo}, {hi}]", preds.len());
    }

    let mut w = csv::Writer::from_writer(out_file(r, "predictions.csv")?);
    w.write_record(["row", &r.schema.easting, &r.schema.northing, "mean", "variance", "lower90", "upper90", "lower95", "upper95"])
        .map_err(Error::from)?;
    for (i, (p, loc)) in preds.iter().zip(&sites.locations).enumerate() {
        w.write_record([
            (i + 1).to_string(),
            loc.easting.to_string(),
            loc.northing.to_string(),
            p.mean.to_string(),
            p.variance.map_or(String::new(), |v| v.to_string()),
            p.lower90.to_string(),
            p.upper90.to_string(),
            p.lower95.to_string(),
            p.upper95.to_string(),
        ])
        .map_err(Error::from)?;
    }
    w.flush()?;
    write_manifest(
        r,
        &[
            ("model", fit.kind.label().into()),
            ("predictions", preds.len().to_string()),
            ("truncated", truncated.to_string()),
        ],
    )?;
    Ok(true)
}

fn cmd_cv(r: &Resolved) -> CmdResult {
    let kinds: Vec<ModelKind> = r
        .models
        .iter()
        .map(|m| m.parse::<ModelKind>())
        .collect::<geoforest::Result<_>>()?;
    let ds = training_data(r)?;
    let opts = CvOptions {
        k: r.folds,
        seed: r.seed,
        honest: !r.fast,
        pipeline: pipeline_options(r),
    };
    let mut reports = Vec::with_capacity(kinds.len());
    let mut failed = Vec::new();
    for kind in kinds {
        let rep = kfold_cv(&ds, kind, &opts)?;
        if !rep.failed_folds.is_empty() {
            failed.push(format!("{kind}: {:?}", rep.failed_folds));
        }
        reports.push(rep);
    }
    write_cv_table(&reports, out_file(r, "cv.csv")?)?;
    write_interval_summary(&reports, out_file(r, "interval_lengths.csv")?)?;
    write_manifest(r, &[("failed_folds", failed.join("; "))])?;
    Ok(true)
}

fn cmd_simulate(r: &Resolved) -> CmdResult {
    let mut opts = if r.fast { SimOptions::fast() } else { SimOptions::default() };
    opts.seed = r.seed;
    if let Some(n) = r.replicates {
        opts.replicates = n;
    }
    opts.forest.trees = r.trees;
    opts.forest.mtry = r.mtry;
    opts.forest.min_node_size = r.min_node_size;
    opts.fit.restarts = r.restarts;
    opts.fit.max_iter = r.max_iter;
    if r.in_sample_residuals {
        opts.residuals = ResidualMode::InSample;
    }
    let mut reports = Vec::new();
    for &id in &r.cases {
        let case = SimCase::get(id)?;
        log::info!("simulation case {id}");
        reports.push(run_case(&case, &opts)?);
    }
    write_case_table(&reports, out_file(r, "simulation.csv")?)?;

    let mut w = csv::Writer::from_writer(out_file(r, "simulation_replicates.csv")?);
    let mut header = vec![
        "case".to_string(),
        "replicate".into(),
        "seed".into(),
        "a".into(),
        "c".into(),
        "realized_r2".into(),
        "realized_share".into(),
        "slm_nugget".into(),
        "slm_psill".into(),
        "slm_range".into(),
    ];
    for m in SIM_MODELS {
        header.push(format!("{}_RMSPE", m.label()));
        header.push(format!("{}_PIC90", m.label()));
    }
    w.write_record(&header).map_err(Error::from)?;
    for rep in &reports {
        for v in &rep.replicates {
            let mut row = vec![
                rep.case.id.to_string(),
                v.replicate.to_string(),
                v.seed.to_string(),
                v.a.to_string(),
                v.c.to_string(),
                v.realized_r_squared.to_string(),
                v.realized_share.to_string(),
                v.slm_params.nugget.to_string(),
                v.slm_params.partial_sill.to_string(),
                v.slm_params.range.to_string(),
            ];
            for s in &v.scores {
                row.push(s.rmspe.to_string());
                row.push(s.pic90.to_string());
            }
            w.write_record(&row).map_err(Error::from)?;
        }
    }
    w.flush()?;
    let failed: Vec<String> = reports
        .iter()
        .filter(|c| !c.failed.is_empty())
        .map(|c| format!("case {}: {:?}", c.case.id, c.failed))
        .collect();
    write_manifest(r, &[("failed_replicates", failed.join("; "))])?;
    Ok(true)
}
