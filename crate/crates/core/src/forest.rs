//! Random forest regression with quantile regression forest intervals and
//! out-of-bag permutation importance.
//!
//! Trees are grown on bootstrap samples of size `n`, trying `m` randomly
//! chosen variables at each node and splitting on the least total child SSE.
//! Nodes with fewer than `2 · min_node_size` rows or a constant response
//! become leaves. Each leaf keeps the bootstrap rows that landed in it (with
//! multiplicity). Quantile forest weights instead use every training row
//! routed to the leaf, each once.

use std::collections::HashMap;
use std::io::Write;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Sites;
use crate::error::{Error, Result};

/// Slack when comparing cumulative quantile-forest weights with `alpha`.
pub const QUANTILE_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub categorical: bool,
    /// Training level labels; category codes index into this.
    pub levels: Vec<String>,
}

/// Column-major predictor table. Categorical columns hold level codes;
/// a level unknown to the training data is `NaN`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Features {
    pub specs: Vec<FeatureSpec>,
    pub columns: Vec<Vec<f64>>,
}

impl Features {
    pub fn numeric(names: &[&str], columns: Vec<Vec<f64>>) -> Result<Self> {
        if names.len() != columns.len() {
            return Err(Error::input("feature names and columns differ in length"));
        }
        let n = columns.first().map_or(0, |c| c.len());
        if columns.iter().any(|c| c.len() != n) {
            return Err(Error::input("feature columns differ in length"));
        }
        if columns.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::input("non-finite feature value"));
        }
        let specs = names
            .iter()
            .map(|n| FeatureSpec {
                name: n.to_string(),
                categorical: false,
                levels: vec![],
            })
            .collect();
        Ok(Features { specs, columns })
    }

    /// Every covariate of `sites`, untransformed.
    pub fn from_sites(sites: &Sites) -> Self {
        let specs = sites
            .covariates
            .iter()
            .map(|c| FeatureSpec {
                name: c.name().to_string(),
                categorical: c.meta.is_categorical,
                levels: c.meta.levels.clone(),
            })
            .collect();
        Features {
            specs,
            columns: sites.covariates.iter().map(|c| c.values.clone()).collect(),
        }
    }

    /// Features of `sites` laid out like `self`: columns matched by name and
    /// category labels re-coded to the training levels.
    pub fn conform(&self, sites: &Sites) -> Result<Features> {
        let mut columns = Vec::with_capacity(self.specs.len());
        for spec in &self.specs {
            let cov = sites
                .covariate(&spec.name)
                .ok_or_else(|| Error::input(format!("prediction data lacks covariate `{}`", spec.name)))?;
            if spec.categorical != cov.meta.is_categorical {
                return Err(Error::input(format!("covariate `{}` changed type since training", spec.name)));
            }
            if spec.categorical {
                let lookup: HashMap<&str, f64> = spec.levels.iter().enumerate().map(|(i, l)| (l.as_str(), i as f64)).collect();
                let col = (0..sites.len())
                    .map(|i| cov.label(i).and_then(|l| lookup.get(l).copied()).unwrap_or(f64::NAN))
                    .collect();
                columns.push(col);
            } else {
                columns.push(cov.values.clone());
            }
        }
        Ok(Features {
            specs: self.specs.clone(),
            columns,
        })
    }

    pub fn n(&self) -> usize {
        self.columns.first().map_or(0, |c| c.len())
    }

    pub fn p(&self) -> usize {
        self.columns.len()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.columns.iter().map(|c| c[i]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SplitRule {
    /// `x <= threshold` goes left.
    Numeric(f64),
    /// Levels in `left` go left and those in `right` go right; any other
    /// level goes to the child that held more training rows.
    Categorical {
        left: Vec<u32>,
        right: Vec<u32>,
        unseen_left: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf {
        mean: f64,
        /// Bootstrap rows in this leaf, with multiplicity.
        samples: Vec<u32>,
    },
    Split {
        variable: usize,
        rule: SplitRule,
        left: u32,
        right: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<Node>,
}

impl RegressionTree {
    fn goes_left(rule: &SplitRule, v: f64) -> bool {
        match rule {
            SplitRule::Numeric(t) => v <= *t,
            SplitRule::Categorical { left, right, unseen_left } => {
                if v.is_nan() {
                    return *unseen_left;
                }
                let code = v as u32;
                if left.contains(&code) {
                    true
                } else if right.contains(&code) {
                    false
                } else {
                    *unseen_left
                }
            }
        }
    }

    /// Index of the leaf reached by `row`.
    pub fn leaf_index(&self, row: &[f64]) -> usize {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { .. } => return i,
                Node::Split { variable, rule, left, right } => {
                    i = if Self::goes_left(rule, row[*variable]) { *left } else { *right } as usize;
                }
            }
        }
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        match &self.nodes[self.leaf_index(row)] {
            Node::Leaf { mean, .. } => *mean,
            Node::Split { .. } => unreachable!("leaf_index returns leaves"),
        }
    }

    /// The bootstrap multiset, sorted.
    pub fn bootstrap_sample(&self) -> Vec<u32> {
        let mut all: Vec<u32> = self
            .nodes
            .iter()
            .flat_map(|n| match n {
                Node::Leaf { samples, .. } => samples.clone(),
                Node::Split { .. } => vec![],
            })
            .collect();
        all.sort_unstable();
        all
    }

    /// Rows of `sample` reaching each node when routed through the tree from
    /// the root.
    pub fn route(&self, x: &Features, sample: &[u32]) -> Vec<Vec<u32>> {
        let mut at = vec![Vec::new(); self.nodes.len()];
        at[0] = sample.to_vec();
        for i in 0..self.nodes.len() {
            if let Node::Split { variable, rule, left, right } = &self.nodes[i] {
                let rows = std::mem::take(&mut at[i]);
                for &r in &rows {
                    let child = if Self::goes_left(rule, x.columns[*variable][r as usize]) { *left } else { *right };
                    at[child as usize].push(r);
                }
                at[i] = rows;
            }
        }
        at
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestOptions {
    pub trees: usize,
    /// Variables tried per split; `None` means `max(⌊p/3⌋, 1)`.
    pub mtry: Option<usize>,
    pub min_node_size: usize,
    pub seed: u64,
    /// Sample rows with replacement per tree; off means every tree sees the
    /// full data once.
    pub bootstrap: bool,
}

impl Default for ForestOptions {
    fn default() -> Self {
        ForestOptions {
            trees: 1000,
            mtry: None,
            min_node_size: 5,
            seed: 0,
            bootstrap: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub trees: Vec<RegressionTree>,
    pub mtry: usize,
    pub min_node_size: usize,
    pub seed: u64,
    /// Out-of-bag rows per tree.
    pub oob: Vec<Vec<u32>>,
    pub features: Features,
    pub response: Vec<f64>,
}

fn tree_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

struct Grower<'a> {
    x: &'a Features,
    y: &'a [f64],
    mtry: usize,
    min_node_size: usize,
    nodes: Vec<Node>,
}

struct BestSplit {
    sse: f64,
    variable: usize,
    rule: SplitRule,
}

fn sse_of(sum: f64, sum2: f64, n: f64) -> f64 {
    sum2 - sum * sum / n
}

impl Grower<'_> {
    fn leaf(&self, rows: Vec<u32>) -> Node {
        let mean = rows.iter().map(|&r| self.y[r as usize]).sum::<f64>() / rows.len() as f64;
        Node::Leaf { mean, samples: rows }
    }

    fn grow(&mut self, rows: Vec<u32>, rng: &mut ChaCha8Rng) -> u32 {
        let id = self.nodes.len() as u32;
        let first = self.y[rows[0] as usize];
        let pure = rows.iter().all(|&r| self.y[r as usize] == first);
        if rows.len() < 2 * self.min_node_size || pure {
            let leaf = self.leaf(rows);
            self.nodes.push(leaf);
            return id;
        }
        let mut vars = sample(rng, self.x.p(), self.mtry).into_vec();
        vars.sort_unstable();
        let Some(best) = self.best_split(&rows, &vars) else {
            let leaf = self.leaf(rows);
            self.nodes.push(leaf);
            return id;
        };
        let (l, r): (Vec<u32>, Vec<u32>) = rows
            .iter()
            .partition(|&&i| RegressionTree::goes_left(&best.rule, self.x.columns[best.variable][i as usize]));
        self.nodes.push(Node::Split {
            variable: best.variable,
            rule: best.rule,
            left: 0,
            right: 0,
        });
        let left = self.grow(l, rng);
        let right = self.grow(r, rng);
        if let Node::Split { left: a, right: b, .. } = &mut self.nodes[id as usize] {
            *a = left;
            *b = right;
        }
        id
    }

    fn best_split(&self, rows: &[u32], vars: &[usize]) -> Option<BestSplit> {
        let mut best: Option<BestSplit> = None;
        for &v in vars {
            let cand = if self.x.specs[v].categorical {
                self.categorical_split(rows, v)
            } else {
                self.numeric_split(rows, v)
            };
            if let Some(c) = cand {
                if best.as_ref().is_none_or(|b| c.sse < b.sse) {
                    best = Some(c);
                }
            }
        }
        best
    }

    fn numeric_split(&self, rows: &[u32], v: usize) -> Option<BestSplit> {
        let col = &self.x.columns[v];
        let mut pairs: Vec<(f64, f64)> = rows.iter().map(|&r| (col[r as usize], self.y[r as usize])).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let n = pairs.len();
        let total: f64 = pairs.iter().map(|p| p.1).sum();
        let total2: f64 = pairs.iter().map(|p| p.1 * p.1).sum();
        let (mut sl, mut sl2) = (0.0, 0.0);
        let mut best: Option<(f64, f64)> = None;
        for i in 0..n - 1 {
            sl += pairs[i].1;
            sl2 += pairs[i].1 * pairs[i].1;
            if pairs[i].0 == pairs[i + 1].0 {
                continue;
            }
            let nl = (i + 1) as f64;
            let nr = (n - i - 1) as f64;
            let sse = sse_of(sl, sl2, nl) + sse_of(total - sl, total2 - sl2, nr);
            if best.is_none_or(|b| sse < b.0) {
                best = Some((sse, 0.5 * (pairs[i].0 + pairs[i + 1].0)));
            }
        }
        best.map(|(sse, t)| BestSplit {
            sse,
            variable: v,
            rule: SplitRule::Numeric(t),
        })
    }

    fn categorical_split(&self, rows: &[u32], v: usize) -> Option<BestSplit> {
        let col = &self.x.columns[v];
        // per level: (count, sum, sum of squares)
        let mut stats: Vec<(u32, usize, f64, f64)> = Vec::new();
        let mut index: HashMap<u32, usize> = HashMap::new();
        for &r in rows {
            let code = col[r as usize] as u32;
            let y = self.y[r as usize];
            let k = *index.entry(code).or_insert_with(|| {
                stats.push((code, 0, 0.0, 0.0));
                stats.len() - 1
            });
            stats[k].1 += 1;
            stats[k].2 += y;
            stats[k].3 += y * y;
        }
        if stats.len() < 2 {
            return None;
        }
        stats.sort_by(|a, b| (a.2 / a.1 as f64).total_cmp(&(b.2 / b.1 as f64)).then(a.0.cmp(&b.0)));
        let n = rows.len();
        let total: f64 = stats.iter().map(|s| s.2).sum();
        let total2: f64 = stats.iter().map(|s| s.3).sum();
        let (mut nl, mut sl, mut sl2) = (0usize, 0.0, 0.0);
        let mut best: Option<(f64, usize)> = None;
        for (i, s) in stats.iter().enumerate().take(stats.len() - 1) {
            nl += s.1;
            sl += s.2;
            sl2 += s.3;
            let sse = sse_of(sl, sl2, nl as f64) + sse_of(total - sl, total2 - sl2, (n - nl) as f64);
            if best.is_none_or(|b| sse < b.0) {
                best = Some((sse, i));
            }
        }
        best.map(|(sse, cut)| {
            let mut left: Vec<u32> = stats[..=cut].iter().map(|s| s.0).collect();
            let mut right: Vec<u32> = stats[cut + 1..].iter().map(|s| s.0).collect();
            left.sort_unstable();
            right.sort_unstable();
            let left_rows: usize = stats[..=cut].iter().map(|s| s.1).sum();
            BestSplit {
                sse,
                variable: v,
                rule: SplitRule::Categorical {
                    left,
                    right,
                    unseen_left: left_rows >= n - left_rows,
                },
            }
        })
    }
}

/// Grows `options.trees` trees; tree `b` draws from its own ChaCha8 stream
/// `(seed, b)`, so results do not depend on the number of threads.
pub fn fit_forest(x: &Features, y: &[f64], options: &ForestOptions) -> Result<ForestModel> {
    let (n, p) = (x.n(), x.p());
    if n < 2 || p < 1 || y.len() != n {
        return Err(Error::input(format!("forest needs n >= 2 and p >= 1 (n = {n}, p = {p}, {} responses)", y.len())));
    }
    if options.trees < 1 || options.min_node_size < 1 {
        return Err(Error::input("forest needs at least one tree and min_node_size >= 1"));
    }
    let mtry = options.mtry.unwrap_or((p / 3).max(1));
    if mtry < 1 || mtry > p {
        return Err(Error::input(format!("mtry must be in 1..={p}, got {mtry}")));
    }
    let grown: Vec<(RegressionTree, Vec<u32>)> = (0..options.trees)
        .into_par_iter()
        .map(|b| {
            let mut rng = tree_rng(options.seed, b as u64);
            let rows: Vec<u32> = if options.bootstrap {
                (0..n).map(|_| rng.random_range(0..n) as u32).collect()
            } else {
                (0..n as u32).collect()
            };
            let mut in_bag = vec![false; n];
            for &r in &rows {
                in_bag[r as usize] = true;
            }
            let oob = (0..n as u32).filter(|&r| !in_bag[r as usize]).collect();
            let mut g = Grower {
                x,
                y,
                mtry,
                min_node_size: options.min_node_size,
                nodes: Vec::new(),
            };
            g.grow(rows, &mut rng);
            (RegressionTree { nodes: g.nodes }, oob)
        })
        .collect();
    let (trees, oob) = grown.into_iter().unzip();
    Ok(ForestModel {
        trees,
        mtry,
        min_node_size: options.min_node_size,
        seed: options.seed,
        oob,
        features: x.clone(),
        response: y.to_vec(),
    })
}

fn check_width(model: &ForestModel, row: &[f64]) -> Result<()> {
    if row.len() != model.features.p() {
        return Err(Error::input(format!("expected {} covariates, got {}", model.features.p(), row.len())));
    }
    Ok(())
}

/// Average of the per-tree leaf means.
pub fn rf_predict(model: &ForestModel, row: &[f64]) -> Result<f64> {
    check_width(model, row)?;
    Ok(model.trees.iter().map(|t| t.predict(row)).sum::<f64>() / model.trees.len() as f64)
}

pub fn rf_predict_all(model: &ForestModel, x: &Features) -> Result<Vec<f64>> {
    (0..x.n()).into_par_iter().map(|i| rf_predict(model, &x.row(i))).collect()
}

/// Out-of-bag prediction per training row (`NaN` for rows in every bag).
pub fn oob_predictions(model: &ForestModel) -> Vec<f64> {
    let n = model.response.len();
    let mut sum = vec![0.0; n];
    let mut count = vec![0usize; n];
    for (tree, oob) in model.trees.iter().zip(&model.oob) {
        for &r in oob {
            sum[r as usize] += tree.predict(&model.features.row(r as usize));
            count[r as usize] += 1;
        }
    }
    (0..n).map(|i| if count[i] > 0 { sum[i] / count[i] as f64 } else { f64::NAN }).collect()
}

/// Training rows (each once) reaching every node of every tree. Built once
/// per prediction batch; every leaf holds at least its own bootstrap rows.
pub struct LeafMembers {
    members: Vec<Vec<Vec<u32>>>,
}

impl LeafMembers {
    pub fn new(model: &ForestModel) -> Self {
        let all: Vec<u32> = (0..model.response.len() as u32).collect();
        let members = model.trees.par_iter().map(|t| t.route(&model.features, &all)).collect();
        LeafMembers { members }
    }

    /// Quantile forest weights `(1/B) Σ_b 1{i in leaf_b(x)} / |leaf_b(x)|`
    /// over all training rows; they sum to one.
    pub fn weights(&self, model: &ForestModel, row: &[f64]) -> Result<Vec<f64>> {
        check_width(model, row)?;
        let mut w = vec![0.0; model.response.len()];
        let b = model.trees.len() as f64;
        for (t, members) in model.trees.iter().zip(&self.members) {
            let leaf = &members[t.leaf_index(row)];
            let share = 1.0 / (b * leaf.len() as f64);
            for &i in leaf {
                w[i as usize] += share;
            }
        }
        Ok(w)
    }
}

/// See [`LeafMembers::weights`]; routes the training data on every call.
pub fn qrf_weights(model: &ForestModel, row: &[f64]) -> Result<Vec<f64>> {
    LeafMembers::new(model).weights(model, row)
}

/// Left-continuous inverse of the weighted empirical CDF:
/// the smallest `y` with `F(y) ≥ α`.
pub fn weighted_quantiles(values: &[f64], weights: &[f64], alphas: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).filter(|&i| weights[i] > 0.0).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut cum = Vec::with_capacity(order.len());
    let mut acc = 0.0;
    for &i in &order {
        acc += weights[i];
        cum.push(acc);
    }
    alphas
        .iter()
        .map(|&a| {
            let k = cum.iter().position(|&c| c >= a - QUANTILE_SLACK).unwrap_or(order.len() - 1);
            values[order[k]]
        })
        .collect()
}

pub fn qrf_quantile(model: &ForestModel, row: &[f64], alpha: f64) -> Result<f64> {
    Ok(qrf_quantiles(model, row, &[alpha])?[0])
}

pub fn qrf_quantiles(model: &ForestModel, row: &[f64], alphas: &[f64]) -> Result<Vec<f64>> {
    quantiles_with(model, &LeafMembers::new(model), row, alphas)
}

fn quantiles_with(model: &ForestModel, members: &LeafMembers, row: &[f64], alphas: &[f64]) -> Result<Vec<f64>> {
    if alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
        return Err(Error::input("quantile levels must lie in (0, 1)"));
    }
    let w = members.weights(model, row)?;
    Ok(weighted_quantiles(&model.response, &w, alphas))
}

/// `(mean, lower, upper)` for each row of `x`, with the quantile interval at
/// the given tail probabilities.
pub fn qrf_intervals(model: &ForestModel, x: &Features, tails: (f64, f64)) -> Result<Vec<(f64, f64, f64)>> {
    let members = LeafMembers::new(model);
    (0..x.n())
        .into_par_iter()
        .map(|i| {
            let row = x.row(i);
            let q = quantiles_with(model, &members, &row, &[tails.0, tails.1])?;
            Ok((rf_predict(model, &row)?, q[0], q[1]))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PermutationMode {
    #[default]
    Shuffle,
    /// Leaves every column in place; importances are then exactly zero.
    Identity,
}

/// Mean increase in out-of-bag MSE when each variable is permuted among the
/// out-of-bag rows of a tree, averaged over trees with a non-empty OOB set.
pub fn permutation_importance(model: &ForestModel, mode: PermutationMode) -> Vec<f64> {
    let p = model.features.p();
    let per_tree: Vec<Option<Vec<f64>>> = model
        .trees
        .par_iter()
        .zip(&model.oob)
        .enumerate()
        .map(|(b, (tree, oob))| {
            if oob.is_empty() {
                return None;
            }
            let rows: Vec<Vec<f64>> = oob.iter().map(|&r| model.features.row(r as usize)).collect();
            let mse = |rows: &[Vec<f64>]| {
                rows.iter()
                    .zip(oob)
                    .map(|(row, &r)| (model.response[r as usize] - tree.predict(row)).powi(2))
                    .sum::<f64>()
                    / oob.len() as f64
            };
            let base = mse(&rows);
            let mut rng = tree_rng(model.seed ^ 0x9e37_79b9_7f4a_7c15, b as u64);
            let diffs = (0..p)
                .map(|j| {
                    let mut perm: Vec<usize> = (0..oob.len()).collect();
                    if mode == PermutationMode::Shuffle {
                        perm.shuffle(&mut rng);
                    }
                    let mut permuted = rows.clone();
                    for (k, &src) in perm.iter().enumerate() {
                        permuted[k][j] = rows[src][j];
                    }
                    mse(&permuted) - base
                })
                .collect();
            Some(diffs)
        })
        .collect();
    let mut total = vec![0.0; p];
    let mut count = 0usize;
    for d in per_tree.into_iter().flatten() {
        count += 1;
        for j in 0..p {
            total[j] += d[j];
        }
    }
    if count == 0 {
        return total;
    }
    total.into_iter().map(|t| t / count as f64).collect()
}

/// `covariate,importance`, sorted by decreasing importance.
pub fn write_importance<W: Write>(model: &ForestModel, importance: &[f64], out: W) -> Result<()> {
    let mut order: Vec<usize> = (0..importance.len()).collect();
    order.sort_by(|&a, &b| importance[b].total_cmp(&importance[a]).then(a.cmp(&b)));
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["covariate", "importance"])?;
    for j in order {
        w.write_record([model.features.specs[j].name.clone(), importance[j].to_string()])?;
    }
    w.flush()?;
    Ok(())
}
