//! Design-matrix recipes: an ordered list of column constructors that can be
//! replayed on any dataset with the same covariate names.

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::data::{Covariate, Sites};
use crate::error::{Error, Result};
use crate::transform::boxcox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ColumnSpec {
    Intercept,
    Raw {
        covariate: String,
    },
    /// `I(x != 0)`.
    IndicatorNonzero {
        covariate: String,
    },
    /// `g(x; lambda1, lambda2)`, multiplied by `I(x != 0)` when `zero_masked`.
    BoxCox {
        covariate: String,
        lambda1: f64,
        lambda2: f64,
        zero_masked: bool,
    },
    /// Square of the corresponding [`ColumnSpec::BoxCox`] column.
    BoxCoxSquared {
        covariate: String,
        lambda1: f64,
        lambda2: f64,
        zero_masked: bool,
    },
    CategoryDummy {
        covariate: String,
        level: String,
    },
}

impl ColumnSpec {
    pub fn covariate(&self) -> Option<&str> {
        match self {
            ColumnSpec::Intercept => None,
            ColumnSpec::Raw { covariate }
            | ColumnSpec::IndicatorNonzero { covariate }
            | ColumnSpec::BoxCox { covariate, .. }
            | ColumnSpec::BoxCoxSquared { covariate, .. }
            | ColumnSpec::CategoryDummy { covariate, .. } => Some(covariate),
        }
    }

    /// Short human-readable column label used in reports.
    pub fn label(&self) -> String {
        match self {
            ColumnSpec::Intercept => "(intercept)".into(),
            ColumnSpec::Raw { covariate } => covariate.clone(),
            ColumnSpec::IndicatorNonzero { covariate } => format!("I({covariate}!=0)"),
            ColumnSpec::BoxCox {
                covariate,
                lambda1,
                lambda2,
                zero_masked,
            } => {
                let g = format!("g({covariate};{lambda1},{lambda2})");
                if *zero_masked {
                    format!("{g}*I({covariate}!=0)")
                } else {
                    g
                }
            }
            ColumnSpec::BoxCoxSquared {
                covariate,
                lambda1,
                lambda2,
                zero_masked,
            } => {
                let g = format!("g({covariate};{lambda1},{lambda2})^2");
                if *zero_masked {
                    format!("{g}*I({covariate}!=0)")
                } else {
                    g
                }
            }
            ColumnSpec::CategoryDummy { covariate, level } => format!("{covariate}[{level}]"),
        }
    }

    fn evaluate(&self, cov: Option<&Covariate>, n: usize) -> Result<Vec<f64>> {
        fn need<'c>(spec: &ColumnSpec, c: Option<&'c Covariate>) -> Result<&'c Covariate> {
            c.ok_or_else(|| Error::input(format!("recipe column {} refers to a missing covariate", spec.label())))
        }
        let numeric = |c: &Covariate| -> Result<()> {
            if c.meta.is_categorical {
                Err(Error::input(format!(
                    "column {} needs a numeric covariate but `{}` is categorical",
                    self.label(),
                    c.name()
                )))
            } else {
                Ok(())
            }
        };
        match self {
            ColumnSpec::Intercept => Ok(vec![1.0; n]),
            ColumnSpec::Raw { .. } => {
                let c = need(self, cov)?;
                numeric(c)?;
                Ok(c.values.clone())
            }
            ColumnSpec::IndicatorNonzero { .. } => {
                let c = need(self, cov)?;
                numeric(c)?;
                Ok(c.values.iter().map(|&x| if x != 0.0 { 1.0 } else { 0.0 }).collect())
            }
            ColumnSpec::BoxCox {
                lambda1,
                lambda2,
                zero_masked,
                ..
            }
            | ColumnSpec::BoxCoxSquared {
                lambda1,
                lambda2,
                zero_masked,
                ..
            } => {
                let c = need(self, cov)?;
                numeric(c)?;
                let square = matches!(self, ColumnSpec::BoxCoxSquared { .. });
                c.values
                    .iter()
                    .map(|&x| {
                        if *zero_masked && x == 0.0 {
                            return Ok(0.0);
                        }
                        let g = boxcox(x, *lambda1, *lambda2).map_err(|_| Error::Domain {
                            covariate: c.name().to_string(),
                            value: x,
                            shifted: x + lambda2,
                        })?;
                        Ok(if square { g * g } else { g })
                    })
                    .collect()
            }
            ColumnSpec::CategoryDummy { level, .. } => {
                let c = need(self, cov)?;
                if !c.meta.is_categorical {
                    return Err(Error::input(format!(
                        "column {} needs a categorical covariate but `{}` is numeric",
                        self.label(),
                        c.name()
                    )));
                }
                let code = c.meta.levels.iter().position(|l| l == level);
                Ok(c.values
                    .iter()
                    .map(|&v| if Some(v as usize) == code { 1.0 } else { 0.0 })
                    .collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignRecipe {
    columns: Vec<ColumnSpec>,
}

impl DesignRecipe {
    pub fn new(columns: Vec<ColumnSpec>) -> Result<Self> {
        let intercepts = columns.iter().filter(|c| matches!(c, ColumnSpec::Intercept)).count();
        if intercepts > 1 {
            return Err(Error::input("a design recipe may contain at most one intercept"));
        }
        Ok(DesignRecipe { columns })
    }

    pub fn intercept_only() -> Self {
        DesignRecipe {
            columns: vec![ColumnSpec::Intercept],
        }
    }

    /// Intercept, every numeric covariate untransformed, and reference-coded
    /// dummies for every categorical covariate.
    pub fn untransformed(sites: &Sites) -> Self {
        let mut columns = vec![ColumnSpec::Intercept];
        for c in &sites.covariates {
            if c.meta.is_categorical {
                columns.extend(category_dummies(c, true));
            } else {
                columns.push(ColumnSpec::Raw {
                    covariate: c.name().to_string(),
                });
            }
        }
        DesignRecipe { columns }
    }

    pub fn columns(&self) -> &[ColumnSpec] {
        &self.columns
    }

    pub fn ncols(&self) -> usize {
        self.columns.len()
    }

    pub fn has_intercept(&self) -> bool {
        self.columns.iter().any(|c| matches!(c, ColumnSpec::Intercept))
    }

    pub fn is_intercept_only(&self) -> bool {
        self.columns == [ColumnSpec::Intercept]
    }

    pub fn labels(&self) -> Vec<String> {
        self.columns.iter().map(ColumnSpec::label).collect()
    }

    /// Removable column groups: all columns derived from the same covariate,
    /// in order of first appearance. The intercept is never part of a group.
    pub fn groups(&self) -> Vec<(String, Vec<usize>)> {
        let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
        for (j, c) in self.columns.iter().enumerate() {
            if let Some(name) = c.covariate() {
                match groups.iter_mut().find(|(g, _)| g == name) {
                    Some((_, cols)) => cols.push(j),
                    None => groups.push((name.to_string(), vec![j])),
                }
            }
        }
        groups
    }

    pub fn without_columns(&self, drop: &[usize]) -> Self {
        DesignRecipe {
            columns: self
                .columns
                .iter()
                .enumerate()
                .filter(|(j, _)| !drop.contains(j))
                .map(|(_, c)| c.clone())
                .collect(),
        }
    }

    pub fn keep_columns(&self, keep: &[usize]) -> Self {
        DesignRecipe {
            columns: keep.iter().map(|&j| self.columns[j].clone()).collect(),
        }
    }

    pub fn without_covariate(&self, covariate: &str) -> Self {
        DesignRecipe {
            columns: self
                .columns
                .iter()
                .filter(|c| c.covariate() != Some(covariate))
                .cloned()
                .collect(),
        }
    }

    pub fn build(&self, sites: &Sites) -> Result<Mat<f64>> {
        build_design(self, sites)
    }
}

/// Dummy columns for a categorical covariate; the first (reference) level is
/// skipped when the design has an intercept.
pub fn category_dummies(cov: &Covariate, with_intercept: bool) -> Vec<ColumnSpec> {
    let skip = usize::from(with_intercept);
    cov.meta
        .levels
        .iter()
        .skip(skip)
        .map(|level| ColumnSpec::CategoryDummy {
            covariate: cov.name().to_string(),
            level: level.clone(),
        })
        .collect()
}

/// Applies `recipe` to `sites`, giving an `n x recipe.ncols()` matrix.
pub fn build_design(recipe: &DesignRecipe, sites: &Sites) -> Result<Mat<f64>> {
    let n = sites.len();
    let mut x = Mat::zeros(n, recipe.ncols());
    for (j, spec) in recipe.columns.iter().enumerate() {
        let cov = spec.covariate().map(|name| {
            sites
                .covariate(name)
                .ok_or_else(|| Error::input(format!("recipe refers to unknown covariate `{name}`")))
        });
        let cov = match cov {
            Some(r) => Some(r?),
            None => None,
        };
        let values = spec.evaluate(cov, n)?;
        for (i, v) in values.into_iter().enumerate() {
            x[(i, j)] = v;
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Location;

    fn sites(values: Vec<f64>) -> Sites {
        let locs = (0..values.len()).map(|i| Location::new(i as f64, 0.0)).collect();
        Sites::new(locs, vec![Covariate::numeric("c1", values)]).unwrap()
    }

    fn bc(l1: f64, l2: f64) -> ColumnSpec {
        ColumnSpec::BoxCox {
            covariate: "c1".into(),
            lambda1: l1,
            lambda2: l2,
            zero_masked: false,
        }
    }

    #[test]
    fn intercept_column_is_ones() {
        let x = build_design(&DesignRecipe::intercept_only(), &sites(vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!((x.nrows(), x.ncols()), (4, 1));
        assert!((0..4).all(|i| x[(i, 0)] == 1.0));
    }

    #[test]
    fn boxcox_columns() {
        let r = DesignRecipe::new(vec![bc(1.0, 0.0)]).unwrap();
        let x = build_design(&r, &sites(vec![2.0, 3.0])).unwrap();
        assert_eq!((x[(0, 0)], x[(1, 0)]), (1.0, 2.0));

        let r = DesignRecipe::new(vec![bc(0.0, 1.0)]).unwrap();
        let x = build_design(&r, &sites(vec![0.0, std::f64::consts::E - 1.0])).unwrap();
        assert_eq!(x[(0, 0)], 0.0);
        assert!((x[(1, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn boxcox_domain_error_names_covariate() {
        let r = DesignRecipe::new(vec![bc(0.5, 0.0)]).unwrap();
        match build_design(&r, &sites(vec![1.0, -2.0])) {
            Err(Error::Domain { covariate, value, .. }) => {
                assert_eq!(covariate, "c1");
                assert_eq!(value, -2.0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn masked_boxcox_and_indicator() {
        let masked = ColumnSpec::BoxCox {
            covariate: "c1".into(),
            lambda1: 0.0,
            lambda2: 0.0,
            zero_masked: true,
        };
        let r = DesignRecipe::new(vec![ColumnSpec::IndicatorNonzero { covariate: "c1".into() }, masked]).unwrap();
        let x = build_design(&r, &sites(vec![0.0, 1.0, std::f64::consts::E])).unwrap();
        assert_eq!([x[(0, 0)], x[(1, 0)], x[(2, 0)]], [0.0, 1.0, 1.0]);
        assert_eq!([x[(0, 1)], x[(1, 1)]], [0.0, 0.0]);
        assert!((x[(2, 1)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn two_intercepts_rejected_and_groups() {
        assert!(DesignRecipe::new(vec![ColumnSpec::Intercept, ColumnSpec::Intercept]).is_err());
        let r = DesignRecipe::new(vec![
            ColumnSpec::Intercept,
            ColumnSpec::IndicatorNonzero { covariate: "a".into() },
            ColumnSpec::Raw { covariate: "b".into() },
            bc(0.0, 1.0).clone(),
        ])
        .unwrap();
        let groups = r.groups();
        assert_eq!(groups.len(), 3);
        assert_eq!(groups[0], ("a".to_string(), vec![1]));
        assert_eq!(r.without_covariate("a").ncols(), 3);
    }

    #[test]
    fn dummies_drop_reference_level_with_intercept() {
        let locs = (0..4).map(|i| Location::new(i as f64, 0.0)).collect();
        let s = Sites::new(locs, vec![Covariate::categorical("eco", &["b", "a", "c", "a"])]).unwrap();
        let r = DesignRecipe::untransformed(&s);
        assert_eq!(r.labels(), vec!["(intercept)", "eco[b]", "eco[c]"]);
        let x = r.build(&s).unwrap();
        assert_eq!([x[(0, 1)], x[(1, 1)], x[(2, 2)], x[(3, 2)]], [1.0, 0.0, 1.0, 0.0]);
    }
}
