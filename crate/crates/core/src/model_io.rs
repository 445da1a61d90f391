//! Versioned JSON model files.
//!
//! A file is one JSON object:
//!
//! ```text
//! { "schema": "geoforest-model", "version": 1, "kind": "slm", "model": { ... } }
//! ```
//!
//! `kind` is the pipeline label in kebab case (`ok`, `slm-tf`, `rfrk`, ...)
//! and `model` is the serialized [`PipelineFit`]. Floats are written with
//! enough digits to read back to the same bits.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forest::{ForestModel, Node, SplitRule};
use crate::pipeline::{FittedModel, ModelKind, PipelineFit};
use crate::slm::FittedSlm;

pub const SCHEMA_TAG: &str = "geoforest-model";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize)]
struct EnvelopeOut<'a> {
    schema: &'a str,
    version: u32,
    kind: ModelKind,
    model: &'a PipelineFit,
}

#[derive(Deserialize)]
struct Header {
    schema: Option<String>,
    version: Option<u32>,
}

#[derive(Deserialize)]
struct EnvelopeIn {
    kind: ModelKind,
    model: PipelineFit,
}

pub fn to_json(fit: &PipelineFit) -> Result<String> {
    let env = EnvelopeOut {
        schema: SCHEMA_TAG,
        version: FORMAT_VERSION,
        kind: fit.kind,
        model: fit,
    };
    check_finite(fit)?;
    serde_json::to_string(&env).map_err(|e| Error::ModelFormat(e.to_string()))
}

pub fn from_json(text: &str) -> Result<PipelineFit> {
    let header: Header = serde_json::from_str(text).map_err(|e| {
        Error::ModelFormat(format!(
            "not a readable {SCHEMA_TAG} v{FORMAT_VERSION} file (truncated or corrupt?): {e}"
        ))
    })?;
    if header.schema.as_deref() != Some(SCHEMA_TAG) {
        return Err(Error::ModelFormat(format!(
            "schema tag {:?}, expected \"{SCHEMA_TAG}\"",
            header.schema
        )));
    }
    match header.version {
        Some(FORMAT_VERSION) => {}
        v => {
            return Err(Error::ModelFormat(format!(
                "unsupported {SCHEMA_TAG} version {v:?}; this build reads version {FORMAT_VERSION}"
            )))
        }
    }
    let env: EnvelopeIn = serde_json::from_str(text)
        .map_err(|e| Error::ModelFormat(format!("{SCHEMA_TAG} v{FORMAT_VERSION}: {e}")))?;
    if env.kind != env.model.kind {
        return Err(Error::ModelFormat(format!(
            "envelope kind {} does not match model kind {}",
            env.kind, env.model.kind
        )));
    }
    check_model(&env.model)?;
    Ok(env.model)
}

pub fn save_model(fit: &PipelineFit, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_json(fit)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<PipelineFit> {
    from_json(&fs::read_to_string(path)?)
}

// JSON has no NaN or infinity; serde_json would write them as null and the
// file would not load.
fn check_finite(fit: &PipelineFit) -> Result<()> {
    let bad = |what: &str| Err(Error::ModelFormat(format!("cannot store non-finite value in {what}")));
    match &fit.model {
        FittedModel::Slm(f) => {
            if f.diagnostics.t_stats.iter().any(|t| !t.is_finite())
                || !f.diagnostics.aic.is_finite()
                || !f.diagnostics.neg_log_lik.is_finite()
            {
                return bad("diagnostics");
            }
        }
        FittedModel::Rfrk(m) => {
            if m.residuals().iter().any(|r| !r.is_finite()) {
                return bad("residuals");
            }
        }
        _ => {}
    }
    Ok(())
}

fn check_model(fit: &PipelineFit) -> Result<()> {
    match &fit.model {
        FittedModel::Mean { n, .. } if *n == 0 => Err(Error::ModelFormat("mean model with no observations".into())),
        FittedModel::Mean { .. } => Ok(()),
        FittedModel::Lm { recipe, fit } => {
            if fit.k() != recipe.ncols() {
                return Err(Error::ModelFormat("coefficient count does not match the recipe".into()));
            }
            Ok(())
        }
        FittedModel::Slm(f) => check_slm(&f.model),
        FittedModel::Rf(m) => check_forest(m),
        FittedModel::Rfrk(m) => {
            check_forest(&m.forest)?;
            check_slm(&m.residual_model)
        }
    }
}

fn check_slm(m: &FittedSlm) -> Result<()> {
    m.beta_cov.validate()?;
    m.design.validate()?;
    m.params.validate().map_err(|e| Error::ModelFormat(e.to_string()))?;
    let n = m.response.len();
    let k = m.beta.len();
    if m.locations.len() != n || m.design.nrows != n || m.design.ncols != k {
        return Err(Error::ModelFormat("spatial model arrays have inconsistent lengths".into()));
    }
    if m.beta_cov.nrows != k || m.beta_cov.ncols != k || m.recipe.ncols() != k {
        return Err(Error::ModelFormat("coefficient arrays do not match the recipe".into()));
    }
    Ok(())
}

fn check_forest(m: &ForestModel) -> Result<()> {
    let n = m.response.len();
    let p = m.features.specs.len();
    let bad = |msg: &str| Err(Error::ModelFormat(format!("forest: {msg}")));
    if m.features.columns.len() != p || m.features.columns.iter().any(|c| c.len() != n) {
        return bad("feature table does not match the response length");
    }
    if m.oob.len() != m.trees.len() || m.oob.iter().flatten().any(|&r| r as usize >= n) {
        return bad("out-of-bag rows out of range");
    }
    for tree in &m.trees {
        if tree.nodes.is_empty() {
            return bad("empty tree");
        }
        for (i, node) in tree.nodes.iter().enumerate() {
            match node {
                Node::Leaf { samples, .. } => {
                    if samples.is_empty() || samples.iter().any(|&s| s as usize >= n) {
                        return bad("leaf rows out of range");
                    }
                }
                Node::Split {
                    variable,
                    rule,
                    left,
                    right,
                } => {
                    // Children always follow their parent, which rules out cycles.
                    let ok = |c: u32| (c as usize) > i && (c as usize) < tree.nodes.len();
                    if *variable >= p || !ok(*left) || !ok(*right) {
                        return bad("split references a missing node or variable");
                    }
                    if let SplitRule::Categorical { left, right, .. } = rule {
                        let levels = m.features.specs[*variable].levels.len() as u32;
                        if left.iter().chain(right).any(|&l| l >= levels) {
                            return bad("split references an unknown level");
                        }
                    }
                }
            }
        }
    }
    Ok(())
}
