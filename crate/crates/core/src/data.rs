//! Spatial datasets: locations, covariate columns with metadata, and CSV
//! ingestion.
//!
//! Coordinates are planar kilometres; distances are Euclidean. Categorical
//! covariates must be declared in the [`Schema`]; their labels are kept as
//! strings and coded by position in a sorted level dictionary.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Two locations closer than this (km) are treated as the same site.
pub const DUPLICATE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub easting: f64,
    pub northing: f64,
}

impl Location {
    pub fn new(easting: f64, northing: f64) -> Self {
        Location { easting, northing }
    }

    pub fn distance(&self, other: &Location) -> f64 {
        (self.easting - other.easting).hypot(self.northing - other.northing)
    }

    pub fn is_finite(&self) -> bool {
        self.easting.is_finite() && self.northing.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnMeta {
    pub name: String,
    pub is_categorical: bool,
    /// Proportion of exact zeros in the column.
    pub zero_fraction: f64,
    /// Sorted level labels for categorical columns, empty otherwise.
    pub levels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Covariate {
    pub meta: ColumnMeta,
    /// Raw values, or level codes (index into `meta.levels`) when categorical.
    pub values: Vec<f64>,
}

fn zero_fraction(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().filter(|v| **v == 0.0).count() as f64 / values.len() as f64
}

impl Covariate {
    pub fn numeric(name: impl Into<String>, values: Vec<f64>) -> Self {
        Covariate {
            meta: ColumnMeta {
                name: name.into(),
                is_categorical: false,
                zero_fraction: zero_fraction(&values),
                levels: Vec::new(),
            },
            values,
        }
    }

    pub fn categorical<S: AsRef<str>>(name: impl Into<String>, labels: &[S]) -> Self {
        let levels: Vec<String> = labels
            .iter()
            .map(|s| s.as_ref().to_string())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let values = labels
            .iter()
            .map(|s| levels.binary_search_by(|l| l.as_str().cmp(s.as_ref())).unwrap() as f64)
            .collect::<Vec<_>>();
        Covariate {
            meta: ColumnMeta {
                name: name.into(),
                is_categorical: true,
                zero_fraction: 0.0,
                levels,
            },
            values,
        }
    }

    pub fn name(&self) -> &str {
        &self.meta.name
    }

    /// Level label of row `i` for categorical columns.
    pub fn label(&self, i: usize) -> Option<&str> {
        if !self.meta.is_categorical {
            return None;
        }
        self.meta.levels.get(self.values[i] as usize).map(String::as_str)
    }

    pub fn is_constant(&self) -> bool {
        self.values.windows(2).all(|w| w[0] == w[1])
    }

    fn subset(&self, rows: &[usize]) -> Covariate {
        let values: Vec<f64> = rows.iter().map(|&i| self.values[i]).collect();
        let mut meta = self.meta.clone();
        if !meta.is_categorical {
            meta.zero_fraction = zero_fraction(&values);
        }
        Covariate { meta, values }
    }
}

/// Locations with covariates; the response-free part of a dataset, used for
/// prediction sites.
#[derive(Debug, Clone, PartialEq)]
pub struct Sites {
    pub locations: Vec<Location>,
    pub covariates: Vec<Covariate>,
}

impl Sites {
    pub fn new(locations: Vec<Location>, covariates: Vec<Covariate>) -> Result<Self> {
        let n = locations.len();
        if let Some(i) = locations.iter().position(|l| !l.is_finite()) {
            return Err(Error::input(format!("location {} is not finite", i + 1)));
        }
        for c in &covariates {
            if c.values.len() != n {
                return Err(Error::input(format!(
                    "covariate `{}` has {} values, expected {n}",
                    c.name(),
                    c.values.len()
                )));
            }
            if let Some(i) = c.values.iter().position(|v| !v.is_finite()) {
                return Err(Error::Cell {
                    row: i + 1,
                    column: c.name().to_string(),
                    message: "value is not finite".into(),
                });
            }
        }
        Ok(Sites { locations, covariates })
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn covariate(&self, name: &str) -> Option<&Covariate> {
        self.covariates.iter().find(|c| c.name() == name)
    }

    pub fn covariate_names(&self) -> Vec<&str> {
        self.covariates.iter().map(|c| c.name()).collect()
    }

    pub fn subset(&self, rows: &[usize]) -> Sites {
        Sites {
            locations: rows.iter().map(|&i| self.locations[i]).collect(),
            covariates: self.covariates.iter().map(|c| c.subset(rows)).collect(),
        }
    }
}

/// Validated training data: finite values, no duplicate locations.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialDataset {
    pub sites: Sites,
    pub response: Vec<f64>,
}

impl SpatialDataset {
    pub fn new(locations: Vec<Location>, response: Vec<f64>, covariates: Vec<Covariate>) -> Result<Self> {
        if response.len() != locations.len() {
            return Err(Error::input(format!(
                "{} responses for {} locations",
                response.len(),
                locations.len()
            )));
        }
        if let Some(i) = response.iter().position(|v| !v.is_finite()) {
            return Err(Error::Cell {
                row: i + 1,
                column: "response".into(),
                message: "value is not finite".into(),
            });
        }
        let sites = Sites::new(locations, covariates)?;
        if let Some((a, b)) = find_duplicate_location(&sites.locations) {
            return Err(Error::input(format!(
                "rows {} and {} share the same location ({}, {})",
                a + 1,
                b + 1,
                sites.locations[a].easting,
                sites.locations[a].northing
            )));
        }
        Ok(SpatialDataset { sites, response })
    }

    pub fn n(&self) -> usize {
        self.response.len()
    }

    pub fn p(&self) -> usize {
        self.sites.covariates.len()
    }

    pub fn locations(&self) -> &[Location] {
        &self.sites.locations
    }

    pub fn covariates(&self) -> &[Covariate] {
        &self.sites.covariates
    }

    pub fn covariate(&self, name: &str) -> Option<&Covariate> {
        self.sites.covariate(name)
    }

    /// Rows `rows` of the dataset, in the given order. Zero fractions are
    /// recomputed for the subset.
    pub fn subset(&self, rows: &[usize]) -> SpatialDataset {
        SpatialDataset {
            sites: self.sites.subset(rows),
            response: rows.iter().map(|&i| self.response[i]).collect(),
        }
    }

    /// Removes zero-variance covariate columns, returning their names.
    pub fn drop_constant_covariates(&mut self) -> Vec<String> {
        let (constant, kept): (Vec<Covariate>, Vec<Covariate>) = std::mem::take(&mut self.sites.covariates)
            .into_iter()
            .partition(|c| c.is_constant());
        self.sites.covariates = kept;
        constant.into_iter().map(|c| c.meta.name).collect()
    }
}

/// First pair of locations within [`DUPLICATE_TOLERANCE`] of each other.
pub fn find_duplicate_location(locations: &[Location]) -> Option<(usize, usize)> {
    let mut order: Vec<usize> = (0..locations.len()).collect();
    order.sort_by(|&a, &b| locations[a].easting.total_cmp(&locations[b].easting));
    for (pos, &i) in order.iter().enumerate() {
        for &j in &order[pos + 1..] {
            if locations[j].easting - locations[i].easting > DUPLICATE_TOLERANCE {
                break;
            }
            if locations[i].distance(&locations[j]) <= DUPLICATE_TOLERANCE {
                return Some((i.min(j), i.max(j)));
            }
        }
    }
    None
}

/// Column roles for CSV ingestion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schema {
    pub easting: String,
    pub northing: String,
    /// Required for training data, optional for prediction sites.
    pub response: Option<String>,
    /// Explicit covariate list; `None` means every column without another role.
    pub covariates: Option<Vec<String>>,
    pub categorical: Vec<String>,
    pub ignore: Vec<String>,
}

impl Default for Schema {
    fn default() -> Self {
        Schema {
            easting: "x".into(),
            northing: "y".into(),
            response: None,
            covariates: None,
            categorical: Vec::new(),
            ignore: Vec::new(),
        }
    }
}

struct RawTable {
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_table(path: &Path) -> Result<RawTable> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for record in reader.records() {
        rows.push(record?.iter().map(str::to_string).collect());
    }
    Ok(RawTable { headers, rows })
}

impl RawTable {
    fn column(&self, name: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::input(format!("missing column `{name}` (header: {})", self.headers.join(","))))
    }

    fn numeric(&self, col: usize) -> Result<Vec<f64>> {
        self.rows
            .iter()
            .enumerate()
            .map(|(r, row)| {
                let cell = row[col].as_str();
                match cell.parse::<f64>() {
                    Ok(v) if v.is_finite() => Ok(v),
                    _ => Err(Error::Cell {
                        row: r + 1,
                        column: self.headers[col].clone(),
                        message: format!("`{cell}` is not a finite number"),
                    }),
                }
            })
            .collect()
    }
}

fn parse_sites(table: &RawTable, schema: &Schema) -> Result<Sites> {
    let e = table.column(&schema.easting)?;
    let nth = table.column(&schema.northing)?;
    let eastings = table.numeric(e)?;
    let northings = table.numeric(nth)?;
    let locations = eastings.into_iter().zip(northings).map(|(a, b)| Location::new(a, b)).collect();

    let names: Vec<String> = match &schema.covariates {
        Some(list) => list.clone(),
        None => table
            .headers
            .iter()
            .filter(|h| {
                **h != schema.easting
                    && **h != schema.northing
                    && Some(h.as_str()) != schema.response.as_deref()
                    && !schema.ignore.contains(h)
            })
            .cloned()
            .collect(),
    };
    for cat in &schema.categorical {
        if !names.contains(cat) {
            return Err(Error::input(format!("categorical column `{cat}` is not a covariate")));
        }
    }
    let mut covariates = Vec::with_capacity(names.len());
    for name in &names {
        let col = table.column(name)?;
        if schema.categorical.contains(name) {
            let labels: Vec<&str> = table.rows.iter().map(|r| r[col].as_str()).collect();
            if let Some(r) = labels.iter().position(|l| l.is_empty()) {
                return Err(Error::Cell {
                    row: r + 1,
                    column: name.clone(),
                    message: "empty category label".into(),
                });
            }
            covariates.push(Covariate::categorical(name.clone(), &labels));
        } else {
            covariates.push(Covariate::numeric(name.clone(), table.numeric(col)?));
        }
    }
    Sites::new(locations, covariates)
}

/// Loads and validates a training dataset. Constant covariate columns are
/// dropped with a warning.
pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<SpatialDataset> {
    let response_name = schema
        .response
        .as_deref()
        .ok_or_else(|| Error::input("schema does not name a response column"))?;
    let table = read_table(path.as_ref())?;
    let sites = parse_sites(&table, schema)?;
    let response = table.numeric(table.column(response_name)?)?;
    let mut dataset = SpatialDataset::new(sites.locations, response, sites.covariates)?;
    for name in dataset.drop_constant_covariates() {
        log::warn!("dropping constant covariate `{name}`");
    }
    Ok(dataset)
}

/// Loads prediction sites; a response column, if present, is ignored.
pub fn load_sites(path: impl AsRef<Path>, schema: &Schema) -> Result<Sites> {
    let table = read_table(path.as_ref())?;
    parse_sites(&table, schema)
}
