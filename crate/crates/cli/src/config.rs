//! Run configuration: an optional TOML file, overridden field by field by
//! command-line flags (and their `GEOFOREST_*` environment variables).

use std::fs;
use std::path::{Path, PathBuf};

use geoforest::data::Schema;
use geoforest::{Error, Result};
use serde::{Deserialize, Serialize};

/// Everything a config file may set. Unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub input: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub model: Option<String>,
    pub models: Option<Vec<String>>,
    pub knots: Option<usize>,
    pub trees: Option<usize>,
    pub mtry: Option<usize>,
    pub min_node_size: Option<usize>,
    pub restarts: Option<usize>,
    pub max_iter: Option<usize>,
    pub literal_tstat: Option<bool>,
    pub oob_residuals: Option<bool>,
    pub truncate: Option<[f64; 2]>,
    pub folds: Option<usize>,
    pub fast: Option<bool>,
    pub replicates: Option<usize>,
    pub schema: Option<Schema>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Input(format!("config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Input(format!("config {}: {e}", path.display())))
    }
}

pub fn load_schema_file(path: &Path) -> Result<Schema> {
    let text = fs::read_to_string(path).map_err(|e| Error::Input(format!("schema {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Input(format!("schema {}: {e}", path.display())))
}

/// Parses `lo,hi`.
pub fn parse_bounds(s: &str) -> std::result::Result<[f64; 2], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 2 {
        return Err(format!("expected `lo,hi`, got `{s}`"));
    }
    let lo: f64 = parts[0].parse().map_err(|_| format!("bad lower bound `{}`", parts[0]))?;
    let hi: f64 = parts[1].parse().map_err(|_| format!("bad upper bound `{}`", parts[1]))?;
    if !(lo <= hi) {
        return Err(format!("lower bound {lo} exceeds upper bound {hi}"));
    }
    Ok([lo, hi])
}

/// Resolved settings for one run, written verbatim to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Resolved {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub threads: Option<usize>,
    pub out: PathBuf,
    pub input: Option<PathBuf>,
    pub model_file: Option<PathBuf>,
    pub model: Option<String>,
    pub models: Vec<String>,
    pub knots: Option<usize>,
    pub trees: usize,
    pub mtry: Option<usize>,
    pub min_node_size: usize,
    pub restarts: usize,
    pub max_iter: usize,
    pub literal_tstat: bool,
    pub oob_residuals: bool,
    pub in_sample_residuals: bool,
    pub truncate: Option<[f64; 2]>,
    pub folds: usize,
    pub fast: bool,
    pub replicates: Option<usize>,
    pub cases: Vec<usize>,
    pub schema: Schema,
}

pub fn write_manifest(resolved: &Resolved, outcome: &[(&str, String)]) -> Result<()> {
    let mut text = String::from("# geoforest run manifest\n");
    text.push_str(&toml::to_string(resolved).map_err(|e| Error::Input(format!("manifest: {e}")))?);
    if !outcome.is_empty() {
        text.push_str("\n[outcome]\n");
        for (k, v) in outcome {
            text.push_str(&format!("{k} = {v:?}\n"));
        }
    }
    fs::write(resolved.out.join("manifest.txt"), text)?;
    Ok(())
}
