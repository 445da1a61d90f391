//! Exponential covariance model, full-rank and reduced-rank covariance
//! matrices, and solvers that apply `Σ⁻¹` and report `log|Σ|`.
//!
//! The reduced-rank form is `Σ = S K⁻¹ S' + σ²_ε I` with `S` the
//! data-to-knot and `K` the knot-to-knot covariances. Its inverse is applied
//! through the Woodbury identity
//! `Σ⁻¹ = σ_ε⁻² [I − S (σ²_ε K + S'S)⁻¹ S']`, and the log-determinant through
//! the matrix-determinant lemma
//! `log|Σ| = log|σ²_ε K + S'S| − log|K| + (n − r) log σ²_ε`,
//! so only `r × r` matrices are factorized.

use faer::linalg::solvers::{Llt, Solve};
use faer::{Mat, MatRef};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Location;
use crate::error::{Error, Result};
use crate::linalg::{cholesky, llt_log_det};

/// Nugget, partial sill and range of the exponential covariance
/// `C(d) = σ²_z exp(−d/α) + σ²_ε 1{d = 0}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovarianceParams {
    pub nugget: f64,
    pub partial_sill: f64,
    pub range: f64,
}

impl CovarianceParams {
    pub fn new(nugget: f64, partial_sill: f64, range: f64) -> Result<Self> {
        let p = CovarianceParams {
            nugget,
            partial_sill,
            range,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.nugget.is_finite() && self.partial_sill.is_finite() && self.range.is_finite();
        if !finite || self.nugget < 0.0 || self.partial_sill < 0.0 || !(self.range > 0.0) {
            return Err(Error::input(format!("invalid covariance parameters {self:?}")));
        }
        if !(self.nugget + self.partial_sill > 0.0) {
            return Err(Error::input("nugget + partial sill must be positive"));
        }
        Ok(())
    }

    pub fn sill(&self) -> f64 {
        self.nugget + self.partial_sill
    }

    /// Correlation of the spatial component only, `exp(−d/α)`.
    #[inline]
    pub fn spatial(&self, d: f64) -> f64 {
        self.partial_sill * (-d / self.range).exp()
    }
}

/// Exponential covariance at distance `d`, including the nugget at `d == 0`.
#[inline]
pub fn exp_cov(d: f64, params: &CovarianceParams) -> f64 {
    let c = params.spatial(d);
    if d == 0.0 {
        c + params.nugget
    } else {
        c
    }
}

/// `a.len() x b.len()` matrix of Euclidean distances.
pub fn cross_distances(a: &[Location], b: &[Location]) -> Mat<f64> {
    Mat::from_fn(a.len(), b.len(), |i, j| a[i].distance(&b[j]))
}

/// Symmetric distance matrix of one location set.
pub fn pairwise_distances(locations: &[Location]) -> Mat<f64> {
    cross_distances(locations, locations)
}

/// Covariance matrix `C(dᵢⱼ)` for a distance matrix (nugget added wherever the
/// distance is exactly zero).
pub fn covariance_from_distances(d: MatRef<'_, f64>, params: &CovarianceParams) -> Mat<f64> {
    Mat::from_fn(d.nrows(), d.ncols(), |i, j| exp_cov(d[(i, j)], params))
}

/// Lower triangle (including the diagonal) of `Σ` for a square distance
/// matrix. The strict upper triangle is left at zero; Cholesky only reads the
/// lower half.
pub(crate) fn sigma_lower_from_distances(d: MatRef<'_, f64>, params: &CovarianceParams) -> Mat<f64> {
    let n = d.nrows();
    let mut sigma = Mat::zeros(n, n);
    let inv_range = 1.0 / params.range;
    for j in 0..n {
        for i in j..n {
            let dij = d[(i, j)];
            let mut v = params.partial_sill * (-dij * inv_range).exp();
            if dij == 0.0 {
                v += params.nugget;
            }
            sigma[(i, j)] = v;
        }
    }
    sigma
}

/// Full-rank covariance matrix `Σ = R + σ²_ε I`.
pub fn full_sigma(locations: &[Location], params: &CovarianceParams) -> Mat<f64> {
    covariance_from_distances(pairwise_distances(locations).as_ref(), params)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotSet {
    pub knots: Vec<Location>,
}

impl KnotSet {
    pub fn len(&self) -> usize {
        self.knots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knots.is_empty()
    }
}

/// `min(⌈n/10⌉, 200)`.
pub fn default_knot_count(n: usize) -> usize {
    n.div_ceil(10).clamp(1, 200)
}

const KMEANS_RESTARTS: usize = 25;
const KMEANS_MAX_ITER: usize = 100;

/// Space-filling knots by k-means on the coordinates (k-means++ seeding,
/// 25 restarts, lowest within-cluster sum of squares kept). `r == n` returns
/// the data locations themselves and `r == 1` their centroid.
pub fn place_knots(locations: &[Location], r: usize, seed: u64) -> Result<KnotSet> {
    let n = locations.len();
    if r == 0 || r > n {
        return Err(Error::input(format!("knot count {r} must lie in 1..={n}")));
    }
    if r == n {
        return Ok(KnotSet {
            knots: locations.to_vec(),
        });
    }
    if r == 1 {
        return Ok(KnotSet {
            knots: vec![centroid(locations.iter())],
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<Location>)> = None;
    for _ in 0..KMEANS_RESTARTS {
        let (wss, centers) = kmeans_once(locations, r, &mut rng);
        if best.as_ref().is_none_or(|(b, _)| wss < *b) {
            best = Some((wss, centers));
        }
    }
    let mut knots = best.map(|(_, c)| c).unwrap_or_default();
    separate_coincident_knots(&mut knots, locations);
    Ok(KnotSet { knots })
}

fn centroid<'a>(points: impl Iterator<Item = &'a Location>) -> Location {
    let (mut e, mut nn, mut count) = (0.0, 0.0, 0usize);
    for p in points {
        e += p.easting;
        nn += p.northing;
        count += 1;
    }
    Location::new(e / count as f64, nn / count as f64)
}

fn sq_dist(a: &Location, b: &Location) -> f64 {
    let de = a.easting - b.easting;
    let dn = a.northing - b.northing;
    de * de + dn * dn
}

fn nearest(p: &Location, centers: &[Location]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(p, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_once(points: &[Location], k: usize, rng: &mut ChaCha8Rng) -> (f64, Vec<Location>) {
    let n = points.len();
    // k-means++ seeding
    let mut centers = vec![points[rng.random_range(0..n)]];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, w) in d2.iter().enumerate() {
                if target < *w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.push(points[next]);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &centers[centers.len() - 1]));
        }
    }

    let mut assign = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let (c, _) = nearest(p, &centers);
            if assign[i] != c {
                assign[i] = c;
                changed = true;
            }
        }
        let mut sums = vec![(0.0, 0.0, 0usize); k];
        for (i, p) in points.iter().enumerate() {
            let s = &mut sums[assign[i]];
            s.0 += p.easting;
            s.1 += p.northing;
            s.2 += 1;
        }
        for c in 0..k {
            if sums[c].2 > 0 {
                centers[c] = Location::new(sums[c].0 / sums[c].2 as f64, sums[c].1 / sums[c].2 as f64);
            } else {
                // re-seed an empty cluster at the worst-served point
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(&points[a], &centers[assign[a]]).total_cmp(&sq_dist(&points[b], &centers[assign[b]]))
                    })
                    .unwrap();
                centers[c] = points[far];
                assign[far] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let wss = points.iter().map(|p| nearest(p, &centers).1).sum();
    (wss, centers)
}

fn separate_coincident_knots(knots: &mut [Location], data: &[Location]) {
    for i in 1..knots.len() {
        if knots[..i].iter().any(|k| k.distance(&knots[i]) <= crate::data::DUPLICATE_TOLERANCE) {
            let far = data
                .iter()
                .max_by(|a, b| nearest(a, &knots[..i]).1.total_cmp(&nearest(b, &knots[..i]).1))
                .copied()
                .unwrap_or(knots[i]);
            knots[i] = far;
        }
    }
}

/// `S` (n × r) and `K` (r × r) of the reduced-rank covariance, plus the nugget.
#[derive(Debug, Clone)]
pub struct ReducedRankFactors {
    pub s: Mat<f64>,
    pub k: Mat<f64>,
    pub nugget: f64,
}

impl ReducedRankFactors {
    pub fn new(locations: &[Location], knots: &KnotSet, params: &CovarianceParams) -> Self {
        Self::from_distances(
            cross_distances(locations, &knots.knots).as_ref(),
            pairwise_distances(&knots.knots).as_ref(),
            params,
        )
    }

    /// Builds `S` and `K` from cached data-to-knot and knot-to-knot distances.
    pub fn from_distances(d_sk: MatRef<'_, f64>, d_kk: MatRef<'_, f64>, params: &CovarianceParams) -> Self {
        ReducedRankFactors {
            s: Mat::from_fn(d_sk.nrows(), d_sk.ncols(), |i, j| params.spatial(d_sk[(i, j)])),
            k: Mat::from_fn(d_kk.nrows(), d_kk.ncols(), |i, j| params.spatial(d_kk[(i, j)])),
            nugget: params.nugget,
        }
    }

    /// The implied dense `Σ = S K⁻¹ S' + σ²_ε I`; for testing and small n.
    pub fn dense_sigma(&self) -> Result<Mat<f64>> {
        let k_llt = cholesky(self.k.clone(), "knot covariance K")?;
        let kinv_st = k_llt.solve(self.s.transpose());
        let mut sigma = self.s.as_ref() * kinv_st.as_ref();
        for i in 0..sigma.nrows() {
            sigma[(i, i)] += self.nugget;
        }
        Ok(sigma)
    }
}

/// Applies `Σ⁻¹` and reports `log|Σ|` for either covariance form.
#[derive(Debug)]
pub enum CovarianceSolver {
    Dense {
        llt: Llt<f64>,
        log_det: f64,
    },
    Reduced {
        s: Mat<f64>,
        nugget: f64,
        inner: Llt<f64>,
        log_det: f64,
    },
}

impl CovarianceSolver {
    /// Factorizes a dense `Σ` (lower triangle read).
    pub fn dense(sigma: Mat<f64>) -> Result<Self> {
        let llt = cholesky(sigma, "covariance matrix")?;
        let log_det = llt_log_det(&llt);
        Ok(CovarianceSolver::Dense { llt, log_det })
    }

    pub fn n(&self) -> usize {
        match self {
            CovarianceSolver::Dense { llt, .. } => llt.L().nrows(),
            CovarianceSolver::Reduced { s, .. } => s.nrows(),
        }
    }

    pub fn log_det(&self) -> f64 {
        match self {
            CovarianceSolver::Dense { log_det, .. } | CovarianceSolver::Reduced { log_det, .. } => *log_det,
        }
    }

    /// `Σ⁻¹ B`.
    pub fn solve(&self, b: MatRef<'_, f64>) -> Mat<f64> {
        match self {
            CovarianceSolver::Dense { llt, .. } => llt.solve(b),
            CovarianceSolver::Reduced { s, nugget, inner, .. } => {
                let st_b = s.transpose() * b;
                let m_inv = inner.solve(st_b.as_ref());
                let correction = s.as_ref() * m_inv.as_ref();
                let scale = 1.0 / nugget;
                Mat::from_fn(b.nrows(), b.ncols(), |i, j| (b[(i, j)] - correction[(i, j)]) * scale)
            }
        }
    }

    /// `A' Σ⁻¹ A`.
    pub fn gram(&self, a: MatRef<'_, f64>) -> Mat<f64> {
        match self {
            CovarianceSolver::Dense { llt, .. } => {
                let mut w = a.to_owned();
                llt.L().solve_lower_triangular_in_place(w.as_mut());
                w.transpose() * w.as_ref()
            }
            CovarianceSolver::Reduced { .. } => a.transpose() * self.solve(a).as_ref(),
        }
    }

    /// `v' Σ⁻¹ v` for a single column.
    pub fn quad_form(&self, v: MatRef<'_, f64>) -> f64 {
        let g = self.gram(v);
        g[(0, 0)]
    }
}

/// Woodbury solver for `Σ = S K⁻¹ S' + σ²_ε I`.
pub fn reduced_sigma_inverse(factors: &ReducedRankFactors) -> Result<CovarianceSolver> {
    let nugget = factors.nugget;
    if !(nugget > 0.0) {
        return Err(Error::singular("reduced-rank covariance requires a positive nugget"));
    }
    let n = factors.s.nrows();
    let r = factors.k.nrows();
    let k_llt = cholesky(factors.k.clone(), "knot covariance K")?;
    let mut m = factors.s.transpose() * factors.s.as_ref();
    for i in 0..r {
        for j in 0..r {
            m[(i, j)] += nugget * factors.k[(i, j)];
        }
    }
    let inner = cholesky(m, "reduced-rank inner matrix σ²K + S'S")?;
    let log_det = llt_log_det(&inner) - llt_log_det(&k_llt) + (n as f64 - r as f64) * nugget.ln();
    Ok(CovarianceSolver::Reduced {
        s: factors.s.clone(),
        nugget,
        inner,
        log_det,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::column_vector;
    use rand::Rng;

    fn params(n: f64, s: f64, r: f64) -> CovarianceParams {
        CovarianceParams::new(n, s, r).unwrap()
    }

    fn random_locations(n: usize, seed: u64) -> Vec<Location> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| Location::new(rng.random(), rng.random())).collect()
    }

    #[test]
    fn exp_cov_examples() {
        assert_eq!(exp_cov(0.0, &params(2.0, 3.0, 5.0)), 5.0);
        let alpha = 1.7;
        assert!((exp_cov(alpha, &params(0.0, 1.0, alpha)) - (-1.0f64).exp()).abs() < 1e-15);
        assert!((exp_cov(0.367879 * 0.0 + 1e6, &params(1.0, 1.0, 1.0))).abs() < 1e-300);
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(CovarianceParams::new(-1.0, 1.0, 1.0).is_err());
        assert!(CovarianceParams::new(0.0, 0.0, 1.0).is_err());
        assert!(CovarianceParams::new(1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn full_sigma_small_cases() {
        let p = params(0.5, 2.0, 3.0);
        let one = full_sigma(&[Location::new(1.0, 1.0)], &p);
        assert_eq!(one[(0, 0)], 2.5);
        let two = full_sigma(&[Location::new(0.0, 0.0), Location::new(3.0, 4.0)], &p);
        assert!((two[(0, 1)] - 2.0 * (-5.0f64 / 3.0).exp()).abs() < 1e-15);
        assert_eq!(two[(0, 1)], two[(1, 0)]);
    }

    #[test]
    fn full_sigma_matches_elementwise_kernel() {
        let locs = random_locations(5, 3);
        let p = params(0.3, 1.2, 0.4);
        let sigma = full_sigma(&locs, &p);
        for i in 0..5 {
            for j in 0..5 {
                let d = ((locs[i].easting - locs[j].easting).powi(2) + (locs[i].northing - locs[j].northing).powi(2)).sqrt();
                let expected = 1.2 * (-d / 0.4).exp() + if i == j { 0.3 } else { 0.0 };
                assert!((sigma[(i, j)] - expected).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn woodbury_rank_one_matches_sherman_morrison() {
        // r = 1: Σ = s s'/k + σ² I, Σ⁻¹ = (I − s s' / (σ² k + s's)) / σ²
        let locs = random_locations(12, 5);
        let p = params(0.7, 1.5, 0.6);
        let knots = place_knots(&locs, 1, 0).unwrap();
        let f = ReducedRankFactors::new(&locs, &knots, &p);
        let solver = reduced_sigma_inverse(&f).unwrap();
        let v: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let got = solver.solve(column_vector(&v).as_ref());
        let s: Vec<f64> = (0..12).map(|i| f.s[(i, 0)]).collect();
        let k = f.k[(0, 0)];
        let sts: f64 = s.iter().map(|x| x * x).sum();
        let stv: f64 = s.iter().zip(&v).map(|(a, b)| a * b).sum();
        for i in 0..12 {
            let expected = (v[i] - s[i] * stv / (0.7 * k + sts)) / 0.7;
            assert!((got[(i, 0)] - expected).abs() < 1e-12 * expected.abs().max(1.0));
        }
        // determinant lemma, rank one: |Σ| = σ^{2n} (1 + s's/(σ² k))
        let expected_ld = 12.0 * 0.7f64.ln() + (1.0 + sts / (0.7 * k)).ln();
        assert!((solver.log_det() - expected_ld).abs() < 1e-10);
    }

    #[test]
    fn zero_vector_maps_to_zero() {
        let locs = random_locations(8, 9);
        let p = params(0.4, 1.0, 0.5);
        let knots = place_knots(&locs, 3, 1).unwrap();
        let solver = reduced_sigma_inverse(&ReducedRankFactors::new(&locs, &knots, &p)).unwrap();
        let out = solver.solve(Mat::<f64>::zeros(8, 1).as_ref());
        assert!((0..8).all(|i| out[(i, 0)] == 0.0));
    }

    #[test]
    fn knot_special_cases_and_errors() {
        let locs = random_locations(30, 2);
        assert_eq!(place_knots(&locs, 30, 0).unwrap().knots, locs);
        let c = place_knots(&locs, 1, 0).unwrap().knots[0];
        let mean_e = locs.iter().map(|l| l.easting).sum::<f64>() / 30.0;
        assert!((c.easting - mean_e).abs() < 1e-12);
        assert!(place_knots(&locs, 31, 0).is_err());
        assert!(place_knots(&locs, 0, 0).is_err());
    }

    #[test]
    fn knots_on_grid_are_spread_and_deterministic() {
        let grid: Vec<Location> = (0..400).map(|i| Location::new((i % 20) as f64, (i / 20) as f64)).collect();
        let a = place_knots(&grid, 16, 7).unwrap();
        let b = place_knots(&grid, 16, 7).unwrap();
        assert_eq!(a, b);
        let mut min_d = f64::INFINITY;
        for i in 0..16 {
            let k = a.knots[i];
            assert!((0.0..=19.0).contains(&k.easting) && (0.0..=19.0).contains(&k.northing));
            for j in 0..i {
                min_d = min_d.min(k.distance(&a.knots[j]));
            }
        }
        assert!(min_d > 0.0);
        // a 4x4 arrangement of 5x5 blocks is the optimum; centers sit 5 apart
        assert!(min_d > 3.0, "knots too clustered: {min_d}");
    }

    #[test]
    fn default_knot_count_rule() {
        assert_eq!(default_knot_count(5), 1);
        assert_eq!(default_knot_count(101), 11);
        assert_eq!(default_knot_count(1_000_000), 200);
    }
}
