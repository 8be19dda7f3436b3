//! Geometric substrate shared by every sampler: site sets, the exponential
//! correlation kernel, jittered Cholesky factorizations, nearest-neighbor
//! Gaussian process (NNGP) structure and kriging conditionals.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Diagonal jitter added to dense `n x n` correlation matrices.
pub const DEFAULT_JITTER: f64 = 1e-8;
/// Largest jitter tried before giving up on a factorization.
pub const MAX_JITTER: f64 = 1e-4;

const DUPLICATE_TOL: f64 = 1e-9;
/// Standard deviation of the perturbation applied to duplicate sites (variance 1e-3).
const DEDUP_NOISE_SD: f64 = 0.031_622_776_601_683_79;

/// Ordered collection of planar sites.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteSet {
    coords: Vec<[f64; 2]>,
}

impl SiteSet {
    /// Builds a site set, rejecting non-finite and coincident coordinates.
    pub fn new(coords: Vec<[f64; 2]>) -> Result<Self> {
        check_finite(&coords)?;
        if let Some((first, second, distance)) = first_duplicate(&coords) {
            return Err(Error::DuplicateSites {
                first,
                second,
                distance,
            });
        }
        Ok(Self { coords })
    }

    /// Builds a site set, perturbing any site that lies within `1e-9` of an
    /// earlier one by `N(0, 1e-3 I)` noise until all sites are distinct.
    pub fn with_dedup_jitter<R: Rng + ?Sized>(mut coords: Vec<[f64; 2]>, rng: &mut R) -> Result<Self> {
        check_finite(&coords)?;
        let noise = Normal::new(0.0, DEDUP_NOISE_SD).expect("positive sd");
        for i in 1..coords.len() {
            loop {
                let clash = coords[..i]
                    .iter()
                    .any(|c| euclidean(c, &coords[i]) < DUPLICATE_TOL);
                if !clash {
                    break;
                }
                log::debug!("perturbing duplicate site {i}");
                coords[i][0] += noise.sample(rng);
                coords[i][1] += noise.sample(rng);
            }
        }
        Ok(Self { coords })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn get(&self, i: usize) -> [f64; 2] {
        self.coords[i]
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        euclidean(&self.coords[i], &self.coords[j])
    }

    /// Largest pairwise distance; zero for fewer than two sites.
    pub fn max_distance(&self) -> f64 {
        let mut best = 0.0f64;
        for i in 0..self.len() {
            for j in (i + 1)..self.len() {
                best = best.max(self.distance(i, j));
            }
        }
        best
    }

    /// Sites at the given indices, in that order.
    pub fn subset(&self, idx: &[usize]) -> SiteSet {
        SiteSet {
            coords: idx.iter().map(|&i| self.coords[i]).collect(),
        }
    }

    /// Indices of the `k` sites nearest to `point`, nearest first, ties by index.
    pub fn nearest(&self, point: &[f64; 2], k: usize) -> Vec<usize> {
        let mut cand: Vec<(f64, usize)> = self
            .coords
            .iter()
            .enumerate()
            .map(|(i, c)| (euclidean(c, point), i))
            .collect();
        let k = k.min(cand.len());
        if k == 0 {
            return Vec::new();
        }
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, cmp_dist_index);
            cand.truncate(k);
        }
        cand.sort_by(cmp_dist_index);
        cand.into_iter().map(|(_, i)| i).collect()
    }
}

fn check_finite(coords: &[[f64; 2]]) -> Result<()> {
    match coords.iter().position(|c| !(c[0].is_finite() && c[1].is_finite())) {
        Some(index) => Err(Error::NonFiniteCoordinate { index }),
        None => Ok(()),
    }
}

fn first_duplicate(coords: &[[f64; 2]]) -> Option<(usize, usize, f64)> {
    for j in 1..coords.len() {
        for i in 0..j {
            let d = euclidean(&coords[i], &coords[j]);
            if d < DUPLICATE_TOL {
                return Some((i, j, d));
            }
        }
    }
    None
}

fn cmp_dist_index(a: &(f64, usize), b: &(f64, usize)) -> std::cmp::Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

pub fn euclidean(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Euclidean distance table.
pub fn pairwise_distances(sites: &SiteSet) -> DMatrix<f64> {
    let n = sites.len();
    DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { sites.distance(i, j) })
}

/// Isotropic exponential correlation `exp(-d / range)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpKernel {
    range: f64,
}

impl ExpKernel {
    pub fn new(range: f64) -> Result<Self> {
        if range.is_finite() && range > 0.0 {
            Ok(Self { range })
        } else {
            Err(Error::InvalidConfig(format!("kernel range must be positive, got {range}")))
        }
    }

    pub fn range(&self) -> f64 {
        self.range
    }

    #[inline]
    pub fn correlation(&self, d: f64) -> f64 {
        (-d / self.range).exp()
    }
}

/// Correlation matrix of a site set; unit diagonal.
pub type CorrMatrix = DMatrix<f64>;

pub fn corr_matrix(sites: &SiteSet, kernel: &ExpKernel) -> CorrMatrix {
    let n = sites.len();
    let mut m = DMatrix::from_element(n, n, 1.0);
    for j in 0..n {
        for i in (j + 1)..n {
            let c = kernel.correlation(sites.distance(i, j));
            m[(i, j)] = c;
            m[(j, i)] = c;
        }
    }
    m
}

/// Correlations between `point` and every site.
pub fn cross_correlation(point: &[f64; 2], sites: &SiteSet, kernel: &ExpKernel) -> DVector<f64> {
    DVector::from_iterator(
        sites.len(),
        sites.coords().iter().map(|c| kernel.correlation(euclidean(point, c))),
    )
}

/// Lower Cholesky factor of `M + jitter * I`.
#[derive(Clone, Debug)]
pub struct CholFactor {
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
}

impl CholFactor {
    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// Jitter actually added to the diagonal.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    /// Solves `L x = b`.
    pub fn solve_lower(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol
            .l_dirty()
            .solve_lower_triangular(b)
            .expect("cholesky diagonal is positive")
    }

    /// Solves `L^T x = b`.
    pub fn solve_upper_transpose(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol
            .l_dirty()
            .tr_solve_lower_triangular(b)
            .expect("cholesky diagonal is positive")
    }

    /// `L * z`, using only the lower triangle.
    pub fn mul_lower(&self, z: &DVector<f64>) -> DVector<f64> {
        let l = self.chol.l_dirty();
        let n = z.len();
        let mut out = DVector::zeros(n);
        for i in 0..n {
            let mut acc = 0.0;
            for k in 0..=i {
                acc += l[(i, k)] * z[k];
            }
            out[i] = acc;
        }
        out
    }

    /// `x^T M^{-1} x` for the factored matrix.
    pub fn quad_form(&self, x: &DVector<f64>) -> f64 {
        self.solve_lower(x).norm_squared()
    }
}

/// Cholesky factorization of `m + jitter * I`. On failure the jitter is
/// raised (to at least `1e-8`, then by factors of ten) up to `1e-4`.
pub fn chol_factor(m: &DMatrix<f64>, jitter: f64) -> Result<CholFactor> {
    let n = m.nrows();
    let mut current = jitter.max(0.0);
    loop {
        let mut shifted = m.clone();
        if current > 0.0 {
            for i in 0..n {
                shifted[(i, i)] += current;
            }
        }
        if let Some(chol) = Cholesky::new(shifted) {
            if current > jitter {
                log::warn!("cholesky of {n}x{n} matrix needed jitter {current:e}");
            }
            return Ok(CholFactor { chol, jitter: current });
        }
        let next = if current < DEFAULT_JITTER {
            DEFAULT_JITTER
        } else {
            current * 10.0
        };
        if next > MAX_JITTER * (1.0 + 1e-9) {
            return Err(Error::NotPositiveDefinite {
                dim: n,
                max_jitter: current,
            });
        }
        current = next;
    }
}

/// Multivariate normal log-density of `field ~ N(mean_level 1, tau * M)` where
/// `factor` factors `M`.
pub fn gaussian_field_log_density(field: &[f64], mean_level: f64, tau: f64, factor: &CholFactor) -> f64 {
    let n = field.len() as f64;
    let centered = DVector::from_iterator(field.len(), field.iter().map(|v| v - mean_level));
    -0.5 * n * (2.0 * std::f64::consts::PI * tau).ln() - 0.5 * factor.log_det()
        - 0.5 * factor.quad_form(&centered) / tau
}

/// m-nearest-neighbor structure over a fixed ordering of the sites.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborIndex {
    m: usize,
    order: Vec<usize>,
    neighbors: Vec<Vec<usize>>,
    /// For each site, the sites that list it as a neighbor and its position there.
    children: Vec<Vec<(usize, usize)>>,
    /// Row-major distances among each site's neighbors.
    local_dist: Vec<Vec<f64>>,
    /// Distances from each site to its neighbors.
    cross_dist: Vec<Vec<f64>>,
}

impl NeighborIndex {
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Site indices in processing order.
    pub fn ordering(&self) -> &[usize] {
        &self.order
    }

    /// Neighbor set of site `i`, nearest first.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    /// Pairs `(t, k)` with `neighbors(t)[k] == i`.
    pub fn children(&self, i: usize) -> &[(usize, usize)] {
        &self.children[i]
    }
}

/// Orders sites by first coordinate (ties by second, then index) and assigns
/// each site its `m` nearest predecessors.
pub fn build_neighbor_index(sites: &SiteSet, m: usize) -> Result<NeighborIndex> {
    if m == 0 {
        return Err(Error::InvalidConfig("neighbor count m must be at least 1".into()));
    }
    let n = sites.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let (ca, cb) = (sites.get(a), sites.get(b));
        ca[0].total_cmp(&cb[0])
            .then(ca[1].total_cmp(&cb[1]))
            .then(a.cmp(&b))
    });

    let mut neighbors = vec![Vec::new(); n];
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for (pos, &i) in order.iter().enumerate() {
        cand.clear();
        cand.extend(order[..pos].iter().map(|&k| (sites.distance(i, k), k)));
        let k = m.min(cand.len());
        if k == 0 {
            continue;
        }
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, cmp_dist_index);
            cand.truncate(k);
        }
        cand.sort_by(cmp_dist_index);
        neighbors[i] = cand.iter().map(|&(_, k)| k).collect();
    }

    let mut children = vec![Vec::new(); n];
    for &t in &order {
        for (k, &s) in neighbors[t].iter().enumerate() {
            children[s].push((t, k));
        }
    }
    let cross_dist = (0..n)
        .map(|i| neighbors[i].iter().map(|&k| sites.distance(i, k)).collect())
        .collect();
    let local_dist = neighbors
        .iter()
        .map(|nb| {
            nb.iter()
                .flat_map(|&r| nb.iter().map(move |&c| sites.distance(r, c)))
                .collect()
        })
        .collect();
    Ok(NeighborIndex {
        m,
        order,
        neighbors,
        children,
        local_dist,
        cross_dist,
    })
}

/// Per-site NNGP regression coefficients `B_i` and conditional variance factors `F_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct NngpCoeffs {
    b: Vec<Vec<f64>>,
    f: Vec<f64>,
}

impl NngpCoeffs {
    pub fn b(&self, i: usize) -> &[f64] {
        &self.b[i]
    }

    pub fn f(&self, i: usize) -> f64 {
        self.f[i]
    }

    /// `sum_i log F_i`, the log-determinant of the implied correlation matrix.
    pub fn log_det(&self) -> f64 {
        self.f.iter().map(|f| f.ln()).sum()
    }

    /// `sum_i (x_i - B_i x_{N(i)})^2 / F_i`, equal to `x^T C^{-1} x` for the
    /// implied NNGP correlation matrix `C`.
    pub fn quad_form(&self, index: &NeighborIndex, x: &[f64]) -> f64 {
        (0..x.len())
            .map(|i| {
                let r = x[i] - self.conditional_mean(index, i, x);
                r * r / self.f[i]
            })
            .sum()
    }

    /// `B_i x_{N(i)}`.
    #[inline]
    pub fn conditional_mean(&self, index: &NeighborIndex, i: usize, x: &[f64]) -> f64 {
        index
            .neighbors(i)
            .iter()
            .zip(&self.b[i])
            .map(|(&k, b)| b * x[k])
            .sum()
    }

    /// NNGP log-density of `field ~ N(mean_level, tau C)`.
    pub fn log_density(&self, index: &NeighborIndex, field: &[f64], mean_level: f64, tau: f64) -> f64 {
        let centered: Vec<f64> = field.iter().map(|v| v - mean_level).collect();
        let n = field.len() as f64;
        -0.5 * n * (2.0 * std::f64::consts::PI * tau).ln() - 0.5 * self.log_det()
            - 0.5 * self.quad_form(index, &centered) / tau
    }
}

pub fn nngp_coefficients(index: &NeighborIndex, sites: &SiteSet, kernel: &ExpKernel) -> Result<NngpCoeffs> {
    let n = sites.len();
    let mut b = vec![Vec::new(); n];
    let mut f = vec![1.0; n];
    let mut chol = Vec::with_capacity(index.m * index.m);
    for i in 0..n {
        let nb = index.neighbors(i);
        if nb.is_empty() {
            continue;
        }
        let k = nb.len();
        let local = &index.local_dist[i];
        chol.clear();
        chol.resize(k * k, 0.0);
        for r in 0..k {
            chol[r * k + r] = 1.0;
            for c in 0..r {
                chol[r * k + c] = kernel.correlation(local[r * k + c]);
            }
        }
        let cross: Vec<f64> = index.cross_dist[i].iter().map(|&d| kernel.correlation(d)).collect();
        let mut coef = cross.clone();
        if cholesky_in_place(&mut chol, k) {
            cholesky_solve(&chol, k, &mut coef);
            let explained: f64 = cross.iter().zip(&coef).map(|(a, b)| a * b).sum();
            f[i] = (1.0 - explained).max(f64::EPSILON);
            b[i] = coef;
        } else {
            let local = DMatrix::from_fn(k, k, |r, c| if r == c { 1.0 } else { kernel.correlation(local[r * k + c]) });
            let factor = chol_factor(&local, 0.0)?;
            let cross = DVector::from_vec(cross);
            let coef = factor.solve(&cross);
            let explained = cross.dot(&coef);
            f[i] = (1.0 + factor.jitter() - explained).max(f64::EPSILON);
            b[i] = coef.iter().copied().collect();
        }
    }
    Ok(NngpCoeffs { b, f })
}

/// Lower Cholesky factor of a row-major `k x k` matrix, in place. Returns
/// false when a pivot is not positive.
pub(crate) fn cholesky_in_place(a: &mut [f64], k: usize) -> bool {
    for j in 0..k {
        let mut d = a[j * k + j];
        for t in 0..j {
            d -= a[j * k + t] * a[j * k + t];
        }
        if !(d > 0.0) {
            return false;
        }
        let d = d.sqrt();
        a[j * k + j] = d;
        for r in (j + 1)..k {
            let mut v = a[r * k + j];
            for t in 0..j {
                v -= a[r * k + t] * a[j * k + t];
            }
            a[r * k + j] = v / d;
        }
    }
    true
}

/// Solves `L x = rhs` in place given the lower factor from [`cholesky_in_place`].
pub(crate) fn forward_solve(l: &[f64], k: usize, x: &mut [f64]) {
    for r in 0..k {
        let mut v = x[r];
        for t in 0..r {
            v -= l[r * k + t] * x[t];
        }
        x[r] = v / l[r * k + r];
    }
}

/// Solves `L L^T x = rhs` in place given the lower factor from [`cholesky_in_place`].
pub(crate) fn cholesky_solve(l: &[f64], k: usize, x: &mut [f64]) {
    for r in 0..k {
        let mut v = x[r];
        for t in 0..r {
            v -= l[r * k + t] * x[t];
        }
        x[r] = v / l[r * k + r];
    }
    for r in (0..k).rev() {
        let mut v = x[r];
        for t in (r + 1)..k {
            v -= l[t * k + r] * x[t];
        }
        x[r] = v / l[r * k + r];
    }
}

/// Kriging system for repeated conditionals against one set of training sites.
#[derive(Clone, Debug)]
pub struct Kriging {
    sites: SiteSet,
    kernel: ExpKernel,
    factor: CholFactor,
}

impl Kriging {
    pub fn new(sites: &SiteSet, kernel: ExpKernel) -> Result<Self> {
        let factor = chol_factor(&corr_matrix(sites, &kernel), DEFAULT_JITTER)?;
        Ok(Self {
            sites: sites.clone(),
            kernel,
            factor,
        })
    }

    pub fn kernel(&self) -> ExpKernel {
        self.kernel
    }

    /// `G^{-1} (field - mean_level 1)`, reusable across new sites.
    pub fn weights(&self, field: &[f64], mean_level: f64) -> DVector<f64> {
        let centered = DVector::from_iterator(field.len(), field.iter().map(|v| v - mean_level));
        self.factor.solve(&centered)
    }

    /// Conditional mean and variance at `new_site` given precomputed `weights`.
    pub fn conditional_with_weights(
        &self,
        new_site: &[f64; 2],
        weights: &DVector<f64>,
        mean_level: f64,
        tau: f64,
    ) -> (f64, f64) {
        let cross = cross_correlation(new_site, &self.sites, &self.kernel);
        let mean = mean_level + cross.dot(weights);
        let explained = self.factor.solve_lower(&cross).norm_squared();
        let var = (tau * (1.0 - explained)).clamp(0.0, tau);
        (mean, var)
    }

    pub fn conditional(&self, new_site: &[f64; 2], field: &[f64], mean_level: f64, tau: f64) -> (f64, f64) {
        let w = self.weights(field, mean_level);
        self.conditional_with_weights(new_site, &w, mean_level, tau)
    }
}

/// Gaussian conditional of a GP with mean `mean_level` and covariance
/// `tau * G` at `new_site`, given `field` at `sites`. Returns `(mean, variance)`.
pub fn gp_conditional(
    new_site: &[f64; 2],
    sites: &SiteSet,
    field: &[f64],
    mean_level: f64,
    tau: f64,
    kernel: &ExpKernel,
) -> Result<(f64, f64)> {
    if field.len() != sites.len() {
        return Err(Error::DimensionMismatch {
            what: "field length",
            expected: sites.len(),
            found: field.len(),
        });
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidConfig(format!("tau must be positive, got {tau}")));
    }
    Ok(Kriging::new(sites, *kernel)?.conditional(new_site, field, mean_level, tau))
}

/// Draws `sd * L z` for the correlation matrix of `sites`.
pub fn sample_gp<R: Rng + ?Sized>(sites: &SiteSet, sd: f64, kernel: &ExpKernel, rng: &mut R) -> Result<Vec<f64>> {
    let n = sites.len();
    let factor = chol_factor(&corr_matrix(sites, kernel), DEFAULT_JITTER)?;
    let z = DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(rng)));
    Ok(factor.mul_lower(&z).iter().map(|v| sd * v).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_sites(n: usize, seed: u64) -> SiteSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SiteSet::new((0..n).map(|_| [rng.gen::<f64>(), rng.gen::<f64>()]).collect()).unwrap()
    }

    #[test]
    fn distances_basic() {
        let s = SiteSet::new(vec![[0.0, 0.0], [3.0, 4.0]]).unwrap();
        let d = pairwise_distances(&s);
        assert_eq!(d[(0, 1)], 5.0);
        assert_eq!(d[(1, 0)], 5.0);
        assert_eq!(d[(0, 0)], 0.0);
        let one = SiteSet::new(vec![[1.0, 2.0]]).unwrap();
        assert_eq!(pairwise_distances(&one), DMatrix::from_element(1, 1, 0.0));
    }

    #[test]
    fn duplicates_rejected_then_jittered() {
        let coords = vec![[0.0, 0.0], [0.0, 0.0], [1.0, 1.0]];
        assert!(matches!(
            SiteSet::new(coords.clone()),
            Err(Error::DuplicateSites { first: 0, second: 1, .. })
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = SiteSet::with_dedup_jitter(coords.clone(), &mut rng).unwrap();
        assert!(s.distance(0, 1) > 0.0);
        assert_eq!(s.get(0), [0.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(SiteSet::with_dedup_jitter(coords, &mut rng).unwrap(), s);
        assert!(matches!(
            SiteSet::new(vec![[f64::NAN, 0.0]]),
            Err(Error::NonFiniteCoordinate { index: 0 })
        ));
    }

    #[test]
    fn kernel_values() {
        let k = ExpKernel::new(2.0).unwrap();
        assert_eq!(k.correlation(0.0), 1.0);
        assert!((k.correlation(2.0) - 0.367_879_441_171_442_3).abs() < 1e-15);
        let s = random_sites(5, 1);
        let c = corr_matrix(&s, &ExpKernel::new(1e12).unwrap());
        assert!(c.iter().all(|v| (v - 1.0).abs() < 1e-11));
        assert!(ExpKernel::new(0.0).is_err());
    }

    #[test]
    fn chol_closed_forms() {
        let id = DMatrix::<f64>::identity(3, 3);
        let f = chol_factor(&id, 0.0).unwrap();
        assert_eq!(f.l(), id);
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let l = chol_factor(&m, 0.0).unwrap().l();
        assert!((l[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((l[(1, 0)] - 0.5).abs() < 1e-15);
        assert!((l[(1, 1)] - 0.75f64.sqrt()).abs() < 1e-15);
        assert_eq!(l[(0, 1)], 0.0);
    }

    #[test]
    fn chol_escalates_jitter_on_singular_input() {
        let ones = DMatrix::from_element(3, 3, 1.0);
        let f = chol_factor(&ones, 0.0).unwrap();
        assert!(f.jitter() >= DEFAULT_JITTER);
        let l = f.l();
        let resid = &l * l.transpose() - (&ones + DMatrix::identity(3, 3) * f.jitter());
        assert!(resid.amax() < 1e-12);

        let neg = -DMatrix::<f64>::identity(2, 2);
        assert!(matches!(chol_factor(&neg, 0.0), Err(Error::NotPositiveDefinite { dim: 2, .. })));
    }

    #[test]
    fn chol_near_duplicate_sites() {
        let s = SiteSet::new(vec![[0.0, 0.0], [1e-7, 0.0], [0.5, 0.5], [0.5, 0.5 + 1e-7]]).unwrap();
        let c = corr_matrix(&s, &ExpKernel::new(0.3).unwrap());
        let f = chol_factor(&c, DEFAULT_JITTER).unwrap();
        let l = f.l();
        let resid = &l * l.transpose() - (&c + DMatrix::identity(4, 4) * f.jitter());
        assert!(resid.amax() < 1e-6);
    }

    #[test]
    fn neighbor_index_collinear() {
        let s = SiteSet::new((0..5).map(|i| [i as f64, 0.0]).collect()).unwrap();
        let idx = build_neighbor_index(&s, 2).unwrap();
        assert_eq!(idx.ordering(), &[0, 1, 2, 3, 4]);
        assert!(idx.neighbors(0).is_empty());
        assert_eq!(idx.neighbors(1), &[0]);
        assert_eq!(idx.neighbors(2), &[1, 0]);
        assert_eq!(idx.neighbors(4), &[3, 2]);
        assert_eq!(idx.children(2), &[(3, 0), (4, 1)]);

        let single = SiteSet::new(vec![[0.3, 0.3]]).unwrap();
        assert!(build_neighbor_index(&single, 3).unwrap().neighbors(0).is_empty());
        assert!(build_neighbor_index(&single, 0).is_err());
    }

    #[test]
    fn neighbor_index_matches_brute_force() {
        let s = random_sites(40, 9);
        let m = 4;
        let idx = build_neighbor_index(&s, m).unwrap();
        let order = idx.ordering();
        for (pos, &i) in order.iter().enumerate() {
            let mut prior: Vec<usize> = order[..pos].to_vec();
            prior.sort_by(|&a, &b| s.distance(i, a).partial_cmp(&s.distance(i, b)).unwrap().then(a.cmp(&b)));
            prior.truncate(m);
            assert_eq!(idx.neighbors(i), prior.as_slice());
            assert_eq!(idx.neighbors(i).len(), m.min(pos));
        }
    }

    #[test]
    fn nngp_boundary_coefficients() {
        let d = 0.4;
        let g = 0.7;
        let s = SiteSet::new(vec![[0.0, 0.0], [d, 0.0]]).unwrap();
        let k = ExpKernel::new(g).unwrap();
        let idx = build_neighbor_index(&s, 3).unwrap();
        let c = nngp_coefficients(&idx, &s, &k).unwrap();
        assert!(c.b(0).is_empty());
        assert_eq!(c.f(0), 1.0);
        assert!((c.b(1)[0] - (-d / g).exp()).abs() < 1e-14);
        assert!((c.f(1) - (1.0 - (-2.0 * d / g).exp())).abs() < 1e-14);
    }

    #[test]
    fn nngp_saturated_matches_dense_density() {
        for seed in 0..5u64 {
            let n = 6;
            let s = random_sites(n, 100 + seed);
            let k = ExpKernel::new(0.3 + 0.2 * seed as f64).unwrap();
            let idx = build_neighbor_index(&s, n - 1).unwrap();
            let coeffs = nngp_coefficients(&idx, &s, &k).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let field: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let dense = chol_factor(&corr_matrix(&s, &k), 0.0).unwrap();
            let a = coeffs.log_density(&idx, &field, 0.2, 1.3);
            let b = gaussian_field_log_density(&field, 0.2, 1.3, &dense);
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn kriging_limits() {
        let s = SiteSet::new(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        let k = ExpKernel::new(0.5).unwrap();
        let field = [0.3, -1.2, 2.0];
        let (m, v) = gp_conditional(&[1.0, 0.0], &s, &field, 0.5, 2.0, &k).unwrap();
        assert!((m + 1.2).abs() < 1e-6);
        assert!(v.abs() < 1e-6);
        let far = ExpKernel::new(1e-3).unwrap();
        let (m, v) = gp_conditional(&[50.0, 50.0], &s, &field, 0.5, 2.0, &far).unwrap();
        assert!((m - 0.5).abs() < 1e-12);
        assert!((v - 2.0).abs() < 1e-12);
    }

    #[test]
    fn kriging_matches_partitioned_covariance() {
        // joint covariance over (train, new), conditional via explicit inverse
        let s = SiteSet::new(vec![[0.1, 0.2], [0.7, 0.4], [0.3, 0.9]]).unwrap();
        let new = [0.5, 0.5];
        let g = 0.6;
        let tau = 1.7;
        let level = 0.25;
        let field = [0.9, -0.4, 0.1];
        let all = SiteSet::new(vec![s.get(0), s.get(1), s.get(2), new]).unwrap();
        let joint = corr_matrix(&all, &ExpKernel::new(g).unwrap()) * tau;
        let s11 = joint.view((0, 0), (3, 3)).into_owned() + DMatrix::identity(3, 3) * (tau * DEFAULT_JITTER);
        let s21 = joint.view((3, 0), (1, 3)).into_owned();
        let inv = s11.try_inverse().unwrap();
        let dev = DVector::from_iterator(3, field.iter().map(|v| v - level));
        let mean = level + (&s21 * &inv * dev)[0];
        let var = tau - (&s21 * &inv * s21.transpose())[0];
        let (m, v) = gp_conditional(&new, &s, &field, level, tau, &ExpKernel::new(g).unwrap()).unwrap();
        assert!((m - mean).abs() < 1e-10, "{m} {mean}");
        assert!((v - var).abs() < 1e-10, "{v} {var}");
    }

    #[test]
    fn gp_samples() {
        let s = random_sites(4, 2);
        let k = ExpKernel::new(0.4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_gp(&s, 0.0, &k, &mut rng).unwrap().iter().all(|&v| v == 0.0));
        let one = SiteSet::new(vec![[0.0, 0.0]]).unwrap();
        let draws: Vec<f64> = (0..20000)
            .map(|_| sample_gp(&one, 2.0, &k, &mut rng).unwrap()[0])
            .collect();
        let var = draws.iter().map(|v| v * v).sum::<f64>() / draws.len() as f64;
        assert!((var - 4.0).abs() < 0.2);
    }

    #[test]
    fn gp_sample_covariance_monte_carlo() {
        let s = SiteSet::new(vec![[0.0, 0.0], [0.2, 0.1], [0.5, 0.6]]).unwrap();
        let g = 0.5;
        let sd = 1.5;
        let k = ExpKernel::new(g).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n_draws = 100_000;
        let mut acc = DMatrix::<f64>::zeros(3, 3);
        for _ in 0..n_draws {
            let x = DVector::from_vec(sample_gp(&s, sd, &k, &mut rng).unwrap());
            acc += &x * x.transpose();
        }
        acc /= n_draws as f64;
        for i in 0..3 {
            for j in 0..3 {
                let want = sd * sd * k.correlation(s.distance(i, j));
                assert!((acc[(i, j)] - want).abs() < 0.02 * sd * sd, "{i}{j}: {} vs {want}", acc[(i, j)]);
            }
        }
    }

    mod props {
        use super::*;
        use rand::Rng;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn corr_symmetric_unit_diagonal(seed in 0u64..1000, log_g in -6.0f64..6.0) {
                let s = random_sites(7, seed);
                let c = corr_matrix(&s, &ExpKernel::new(10f64.powf(log_g)).unwrap());
                for i in 0..7 {
                    prop_assert_eq!(c[(i, i)], 1.0);
                    for j in 0..7 {
                        prop_assert_eq!(c[(i, j)], c[(j, i)]);
                    }
                }
            }

            #[test]
            fn chol_residual_small(seed in 0u64..1000, n in 1usize..12) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = DMatrix::from_fn(n, n, |_, _| rng.gen::<f64>() - 0.5);
                let spd = &a * a.transpose() + DMatrix::identity(n, n) * 0.1;
                let f = chol_factor(&spd, 0.0).unwrap();
                let l = f.l();
                let resid = &l * l.transpose() - (&spd + DMatrix::identity(n, n) * f.jitter());
                prop_assert!(resid.amax() < 1e-8);
            }

            #[test]
            fn kriging_variance_bounded(seed in 0u64..1000, x in -1.0f64..2.0, y in -1.0f64..2.0) {
                let s = random_sites(6, seed);
                let k = ExpKernel::new(0.4).unwrap();
                let field = vec![0.0; 6];
                let (_, v) = gp_conditional(&[x, y], &s, &field, 0.0, 1.3, &k).unwrap();
                prop_assert!((0.0..=1.3).contains(&v));
            }

            #[test]
            fn nngp_saturated_equivalence(seed in 0u64..500, n in 2usize..=12) {
                let s = random_sites(n, seed);
                let k = ExpKernel::new(0.35).unwrap();
                let idx = build_neighbor_index(&s, n - 1).unwrap();
                let coeffs = nngp_coefficients(&idx, &s, &k).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
                let field: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let dense = chol_factor(&corr_matrix(&s, &k), 0.0).unwrap();
                let a = coeffs.log_density(&idx, &field, 0.0, 0.8);
                let b = gaussian_field_log_density(&field, 0.0, 0.8, &dense);
                prop_assert!((a - b).abs() < 1e-8);
            }
        }
    }
}
