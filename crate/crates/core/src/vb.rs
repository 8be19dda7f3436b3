//! Mean-field variational Bayes for the Gaussian-response synthesis model.
//!
//! The variational family factorizes as
//!
//! ```text
//! q(f_ji) = N(m_ji, s2_ji)        q(beta_j) = N(mu_j, Sigma_j)
//! q(tau_j) = IG(a_tau_j, b_tau_j) q(g_j) = Categorical(p_j) over a range grid
//! q(sigma2) = IG(a_sigma, b_sigma)
//! ```
//!
//! and is fitted by coordinate ascent. Each sweep updates the factors, the
//! coefficient fields, the scales, the range weights and the error variance,
//! always using the freshest values.

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::agents::{AgentForecastSet, ForecastKind};
use crate::error::{Error, Result};
use crate::gibbs::{PosteriorSamples, PriorConfig};
use crate::spatial::{chol_factor, corr_matrix, cross_correlation, ExpKernel, SiteSet, DEFAULT_JITTER};
use crate::stats::{mean, variance};

/// Default number of grid points for the range parameters.
pub const DEFAULT_GRID_SIZE: usize = 20;

/// Finite support for the range parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct RangeGrid {
    points: Vec<f64>,
}

impl RangeGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidConfig("range grid needs at least one point".into()));
        }
        if points.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
            return Err(Error::InvalidConfig("range grid points must be positive".into()));
        }
        if points.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidConfig("range grid must be strictly increasing".into()));
        }
        Ok(Self { points })
    }

    /// `len` points evenly spaced on the log scale over `[lo, hi]`.
    pub fn log_spaced(lo: f64, hi: f64, len: usize) -> Result<Self> {
        if !(lo > 0.0 && hi >= lo) || len == 0 {
            return Err(Error::InvalidConfig(format!("bad grid [{lo}, {hi}] with {len} points")));
        }
        if len == 1 {
            return Self::new(vec![(lo * hi).sqrt()]);
        }
        let (a, b) = (lo.ln(), hi.ln());
        Self::new((0..len).map(|k| (a + (b - a) * k as f64 / (len - 1) as f64).exp()).collect())
    }

    /// The default grid over the prior support of the ranges.
    pub fn for_priors(priors: &PriorConfig) -> Result<Self> {
        Self::log_spaced(priors.g_lo, priors.g_hi, DEFAULT_GRID_SIZE)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Inverse correlation matrices and their log-determinants at each grid point.
#[derive(Clone, Debug)]
pub struct GridCache {
    grid: RangeGrid,
    inverses: Vec<DMatrix<f64>>,
    log_dets: Vec<f64>,
}

impl GridCache {
    pub fn new(sites: &SiteSet, grid: &RangeGrid) -> Result<Self> {
        let mut inverses = Vec::with_capacity(grid.len());
        let mut log_dets = Vec::with_capacity(grid.len());
        for &g in grid.points() {
            let factor = chol_factor(&corr_matrix(sites, &ExpKernel::new(g)?), DEFAULT_JITTER)?;
            log_dets.push(factor.log_det());
            inverses.push(factor.inverse());
        }
        Ok(Self {
            grid: grid.clone(),
            inverses,
            log_dets,
        })
    }

    pub fn grid(&self) -> &RangeGrid {
        &self.grid
    }

    pub fn inverse(&self, l: usize) -> &DMatrix<f64> {
        &self.inverses[l]
    }

    pub fn log_det(&self, l: usize) -> f64 {
        self.log_dets[l]
    }

    /// `sum_l p_l G_l^{-1}`.
    fn expected_inverse(&self, p: &[f64]) -> DMatrix<f64> {
        let n = self.inverses[0].nrows();
        let mut out = DMatrix::zeros(n, n);
        for (w, inv) in p.iter().zip(&self.inverses) {
            if *w > 0.0 {
                out += inv * *w;
            }
        }
        out
    }
}

/// Variational parameters. Agent indices follow the forecast set (`m[j]` is
/// agent `j`); field indices follow the model (`mu[0]` is the intercept).
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalState {
    pub m: Vec<Vec<f64>>,
    pub s2: Vec<Vec<f64>>,
    pub mu: Vec<Vec<f64>>,
    pub sigma: Vec<DMatrix<f64>>,
    /// `ln |Sigma_j|`.
    pub sigma_log_det: Vec<f64>,
    pub a_tau: Vec<f64>,
    pub b_tau: Vec<f64>,
    pub p: Vec<Vec<f64>>,
    pub a_sigma: f64,
    pub b_sigma: f64,
}

impl VariationalState {
    /// Starting point at prior values: factors at the agent forecasts, fields
    /// at their prior means with covariance `tau0 G` at the middle grid point,
    /// uniform range weights and `E[1/sigma2] = 1 / var(y)`.
    pub fn init(
        y: &[f64],
        sites: &SiteSet,
        forecasts: &AgentForecastSet,
        priors: &PriorConfig,
        grid: &RangeGrid,
    ) -> Result<Self> {
        check(y, sites, forecasts, priors)?;
        let n = y.len();
        let p = forecasts.n_agents() + 1;
        let tau0 = priors.b_tau / (priors.a_tau + 1.0);
        let mid = grid.points()[grid.len() / 2];
        let g = corr_matrix(sites, &ExpKernel::new(mid)?) * tau0;
        let log_det = chol_factor(&g, DEFAULT_JITTER)?.log_det();
        let a_tau = priors.a_tau + 0.5 * n as f64;
        let a_sigma = priors.a_sigma + 0.5 * n as f64;
        Ok(Self {
            m: (0..p - 1).map(|j| forecasts.means(j).to_vec()).collect(),
            s2: (0..p - 1).map(|j| forecasts.variances(j).to_vec()).collect(),
            mu: priors.beta_bar.iter().map(|&b| vec![b; n]).collect(),
            sigma: vec![g; p],
            sigma_log_det: vec![log_det; p],
            a_tau: vec![a_tau; p],
            b_tau: vec![a_tau * tau0; p],
            p: vec![vec![1.0 / grid.len() as f64; grid.len()]; p],
            a_sigma,
            b_sigma: a_sigma * variance(y).max(1e-6),
        })
    }

    /// Warm start from posterior draws: moment-matched factors and fields
    /// (diagonal covariances), scale parameters matching `E[1/tau]` and
    /// `E[1/sigma2]`, and range weights from the draws snapped to the grid.
    pub fn from_samples(samples: &PosteriorSamples, priors: &PriorConfig, grid: &RangeGrid) -> Result<Self> {
        if samples.draws.is_empty() {
            return Err(Error::EmptyData);
        }
        if samples.response != ForecastKind::Gaussian {
            return Err(Error::KindMismatch {
                expected: ForecastKind::Gaussian.name(),
                found: samples.response.name(),
            });
        }
        let n = samples.n_sites();
        let p = samples.n_agents() + 1;
        let moments = |get: &dyn Fn(usize) -> Vec<f64>| -> Vec<(f64, f64)> {
            (0..n)
                .map(|i| {
                    let x = get(i);
                    (mean(&x), variance(&x).max(1e-10))
                })
                .collect()
        };
        let mut st = Self {
            m: Vec::new(),
            s2: Vec::new(),
            mu: Vec::new(),
            sigma: Vec::new(),
            sigma_log_det: Vec::new(),
            a_tau: vec![priors.a_tau + 0.5 * n as f64; p],
            b_tau: Vec::new(),
            p: Vec::new(),
            a_sigma: priors.a_sigma + 0.5 * n as f64,
            b_sigma: 0.0,
        };
        for j in 0..p - 1 {
            let (m, s2): (Vec<f64>, Vec<f64>) =
                moments(&|i| samples.draws.iter().map(|d| d.f[j][i]).collect()).into_iter().unzip();
            st.m.push(m);
            st.s2.push(s2);
        }
        for j in 0..p {
            let (mu, var): (Vec<f64>, Vec<f64>) = moments(&|i| samples.beta_trace(j, i)).into_iter().unzip();
            st.mu.push(mu);
            st.sigma_log_det.push(var.iter().map(|v| v.ln()).sum());
            st.sigma.push(DMatrix::from_diagonal(&DVector::from_vec(var)));
            let inv_tau = mean(&samples.tau_trace(j).iter().map(|t| 1.0 / t).collect::<Vec<_>>());
            st.b_tau.push(st.a_tau[j] / inv_tau);
            let mut counts = vec![1.0; grid.len()];
            for g in samples.g_trace(j) {
                counts[nearest_point(grid, g)] += 1.0;
            }
            let total: f64 = counts.iter().sum();
            st.p.push(counts.iter().map(|c| c / total).collect());
        }
        let inv_sigma2 = mean(&samples.sigma2_trace().iter().map(|s| 1.0 / s).collect::<Vec<_>>());
        st.b_sigma = st.a_sigma / inv_sigma2;
        Ok(st)
    }

    pub fn n_agents(&self) -> usize {
        self.m.len()
    }

    pub fn n_sites(&self) -> usize {
        self.mu[0].len()
    }

    pub fn expected_inv_sigma2(&self) -> f64 {
        self.a_sigma / self.b_sigma
    }

    pub fn expected_inv_tau(&self, j: usize) -> f64 {
        self.a_tau[j] / self.b_tau[j]
    }

    pub fn is_valid(&self) -> bool {
        let probs_ok = self
            .p
            .iter()
            .all(|row| row.iter().all(|&v| v >= 0.0) && (row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        self.s2.iter().flatten().all(|&v| v > 0.0)
            && probs_ok
            && self.a_tau.iter().chain(&self.b_tau).all(|&v| v > 0.0)
            && self.a_sigma > 0.0
            && self.b_sigma > 0.0
            && self.sigma.iter().all(|s| (s - s.transpose()).amax() <= 1e-10 * s.amax().max(1.0))
    }

    /// `E[x_ji]` and `E[x_ji^2]` for field `j` (intercept covariate is 1).
    fn covariate_moments(&self, j: usize, i: usize) -> (f64, f64) {
        if j == 0 {
            (1.0, 1.0)
        } else {
            let m = self.m[j - 1][i];
            (m, m * m + self.s2[j - 1][i])
        }
    }

    /// `y_i - sum_{k != skip} E[x_ki] mu_ki`.
    fn partial_residual(&self, y: &[f64], i: usize, skip: usize) -> f64 {
        let mut r = y[i];
        for k in 0..self.mu.len() {
            if k != skip {
                r -= self.covariate_moments(k, i).0 * self.mu[k][i];
            }
        }
        r
    }

    /// `sum_i E[(y_i - psi_i)^2]` under the variational distribution.
    pub fn expected_sq_residuals(&self, y: &[f64]) -> f64 {
        let mut total = 0.0;
        for i in 0..y.len() {
            let fitted = y[i] - self.partial_residual(y, i, usize::MAX);
            let mut spread = 0.0;
            for j in 0..self.mu.len() {
                let (ex, ex2) = self.covariate_moments(j, i);
                let (mu, var) = (self.mu[j][i], self.sigma[j][(i, i)]);
                spread += ex2 * (mu * mu + var) - ex * ex * mu * mu;
            }
            total += (y[i] - fitted).powi(2) + spread;
        }
        total
    }
}

fn nearest_point(grid: &RangeGrid, g: f64) -> usize {
    let mut best = 0;
    for (l, &pt) in grid.points().iter().enumerate() {
        if (pt.ln() - g.ln()).abs() < (grid.points()[best].ln() - g.ln()).abs() {
            best = l;
        }
    }
    best
}

fn check(y: &[f64], sites: &SiteSet, forecasts: &AgentForecastSet, priors: &PriorConfig) -> Result<()> {
    if y.is_empty() {
        return Err(Error::EmptyData);
    }
    forecasts.expect_kind(ForecastKind::Gaussian)?;
    if forecasts.n_sites() != y.len() || sites.len() != y.len() {
        return Err(Error::DimensionMismatch {
            what: "sites",
            expected: y.len(),
            found: if sites.len() != y.len() {
                sites.len()
            } else {
                forecasts.n_sites()
            },
        });
    }
    priors.validate(forecasts.n_agents())
}

/// `tr(G_l^{-1} (delta delta^T + Sigma))` for every grid point.
fn grid_traces(cache: &GridCache, delta: &DVector<f64>, sigma: &DMatrix<f64>) -> Vec<f64> {
    (0..cache.grid.len())
        .map(|l| {
            let inv = cache.inverse(l);
            (inv * delta).dot(delta) + inv.dot(sigma)
        })
        .collect()
}

fn centered(mu: &[f64], level: f64) -> DVector<f64> {
    DVector::from_iterator(mu.len(), mu.iter().map(|v| v - level))
}

/// One coordinate-ascent sweep.
pub fn vb_sweep(
    state: &mut VariationalState,
    y: &[f64],
    forecasts: &AgentForecastSet,
    priors: &PriorConfig,
    cache: &GridCache,
) -> Result<()> {
    forecasts.expect_kind(ForecastKind::Gaussian)?;
    let n = y.len();
    let n_fields = state.mu.len();
    let e_prec = state.expected_inv_sigma2();

    for j in 0..forecasts.n_agents() {
        let (a, b) = (forecasts.means(j), forecasts.variances(j));
        for i in 0..n {
            let (mu, var) = (state.mu[j + 1][i], state.sigma[j + 1][(i, i)]);
            let rest = state.partial_residual(y, i, j + 1);
            let s2 = 1.0 / (1.0 / b[i] + (mu * mu + var) * e_prec);
            state.m[j][i] = s2 * (a[i] / b[i] + mu * e_prec * rest);
            state.s2[j][i] = s2;
        }
    }

    let mut traces = Vec::with_capacity(n_fields);
    for j in 0..n_fields {
        let e_tau = state.expected_inv_tau(j);
        let kbar = cache.expected_inverse(&state.p[j]);
        let mut precision = &kbar * e_tau;
        let mut linear = &kbar * DVector::from_element(n, priors.beta_bar[j] * e_tau);
        for i in 0..n {
            let (ex, ex2) = state.covariate_moments(j, i);
            precision[(i, i)] += e_prec * ex2;
            linear[i] += e_prec * ex * state.partial_residual(y, i, j);
        }
        let factor = chol_factor(&precision, 0.0)?;
        let mu = factor.solve(&linear);
        state.mu[j] = mu.iter().copied().collect();
        state.sigma[j] = factor.inverse();
        state.sigma_log_det[j] = -factor.log_det();
        let delta = centered(&state.mu[j], priors.beta_bar[j]);
        traces.push(grid_traces(cache, &delta, &state.sigma[j]));
    }

    for j in 0..n_fields {
        let expected: f64 = state.p[j].iter().zip(&traces[j]).map(|(p, t)| p * t).sum();
        state.a_tau[j] = priors.a_tau + 0.5 * n as f64;
        state.b_tau[j] = priors.b_tau + 0.5 * expected;
    }

    for j in 0..n_fields {
        let e_tau = state.expected_inv_tau(j);
        let logw: Vec<f64> = (0..cache.grid.len())
            .map(|l| -0.5 * cache.log_det(l) - 0.5 * e_tau * traces[j][l])
            .collect();
        let top = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logw.iter().map(|v| (v - top).exp()).collect();
        let total: f64 = w.iter().sum();
        state.p[j] = w.iter().map(|v| v / total).collect();
    }

    state.a_sigma = priors.a_sigma + 0.5 * n as f64;
    state.b_sigma = priors.b_sigma + 0.5 * state.expected_sq_residuals(y);
    Ok(())
}

/// `E[ln p(x)] - E[ln q(x)]` summed over an inverse-gamma prior/posterior pair.
fn inv_gamma_terms(a0: f64, b0: f64, a: f64, b: f64) -> (f64, f64) {
    let e_log = b.ln() - digamma(a);
    let e_inv = a / b;
    let prior = a0 * b0.ln() - ln_gamma(a0) - (a0 + 1.0) * e_log - b0 * e_inv;
    let entropy = a + b.ln() + ln_gamma(a) - (1.0 + a) * digamma(a);
    (prior + entropy, e_log)
}

/// Evidence lower bound of the current state.
pub fn elbo(
    state: &VariationalState,
    y: &[f64],
    forecasts: &AgentForecastSet,
    priors: &PriorConfig,
    cache: &GridCache,
) -> f64 {
    let n = y.len() as f64;
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let (sigma_terms, e_log_sigma2) = inv_gamma_terms(priors.a_sigma, priors.b_sigma, state.a_sigma, state.b_sigma);
    let mut total = sigma_terms;
    total += -0.5 * n * (ln2pi + e_log_sigma2) - 0.5 * state.expected_inv_sigma2() * state.expected_sq_residuals(y);

    for j in 0..state.n_agents() {
        let (a, b) = (forecasts.means(j), forecasts.variances(j));
        for i in 0..y.len() {
            let (m, s2) = (state.m[j][i], state.s2[j][i]);
            total += -0.5 * (ln2pi + b[i].ln()) - ((m - a[i]).powi(2) + s2) / (2.0 * b[i]);
            total += 0.5 * (ln2pi + 1.0 + s2.ln());
        }
    }

    let ln_l = (cache.grid.len() as f64).ln();
    for j in 0..state.mu.len() {
        let (tau_terms, e_log_tau) = inv_gamma_terms(priors.a_tau, priors.b_tau, state.a_tau[j], state.b_tau[j]);
        total += tau_terms;
        let delta = centered(&state.mu[j], priors.beta_bar[j]);
        let traces = grid_traces(cache, &delta, &state.sigma[j]);
        let e_tau = state.expected_inv_tau(j);
        for (l, &p) in state.p[j].iter().enumerate() {
            if p > 0.0 {
                total += p * (-0.5 * cache.log_det(l) - 0.5 * e_tau * traces[l]);
                total -= p * (p.ln() + ln_l);
            }
        }
        total += -0.5 * n * (ln2pi + e_log_tau);
        total += 0.5 * state.sigma_log_det[j] + 0.5 * n * (ln2pi + 1.0);
    }
    total
}

/// Stopping rule and iteration cap for [`run_vb`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VbOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Record the ELBO after every sweep (costs one extra pass per sweep).
    pub track_elbo: bool,
}

impl Default for VbOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 500,
            track_elbo: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct VbFit {
    pub state: VariationalState,
    pub iterations: usize,
    pub converged: bool,
    /// ELBO after each sweep; empty when not tracked.
    pub elbo: Vec<f64>,
}

/// Largest change between two states over the factor means, field means and
/// the `a/b` ratios, relative to the old value with a floor of one.
pub fn max_relative_change(old: &VariationalState, new: &VariationalState) -> f64 {
    let rel = |a: f64, b: f64| (b - a).abs() / a.abs().max(1.0);
    let mut worst = rel(old.expected_inv_sigma2(), new.expected_inv_sigma2());
    for (a, b) in old.m.iter().flatten().zip(new.m.iter().flatten()) {
        worst = worst.max(rel(*a, *b));
    }
    for (a, b) in old.mu.iter().flatten().zip(new.mu.iter().flatten()) {
        worst = worst.max(rel(*a, *b));
    }
    for j in 0..old.a_tau.len() {
        worst = worst.max(rel(old.expected_inv_tau(j), new.expected_inv_tau(j)));
    }
    worst
}

/// Sweeps until [`max_relative_change`] drops below `tol` or `max_iter`
/// sweeps have run. Non-convergence is reported, not an error.
pub fn run_vb(
    y: &[f64],
    sites: &SiteSet,
    forecasts: &AgentForecastSet,
    priors: &PriorConfig,
    grid: &RangeGrid,
    options: &VbOptions,
    init: Option<VariationalState>,
) -> Result<VbFit> {
    check(y, sites, forecasts, priors)?;
    if !(options.tol > 0.0) {
        return Err(Error::InvalidConfig(format!("tolerance must be positive, got {}", options.tol)));
    }
    let cache = GridCache::new(sites, grid)?;
    let mut state = match init {
        Some(s) => s,
        None => VariationalState::init(y, sites, forecasts, priors, grid)?,
    };
    if state.mu.len() != forecasts.n_agents() + 1 || state.n_sites() != y.len() || state.p[0].len() != grid.len() {
        return Err(Error::DimensionMismatch {
            what: "initial variational state",
            expected: y.len(),
            found: state.n_sites(),
        });
    }
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < options.max_iter {
        let old = state.clone();
        vb_sweep(&mut state, y, forecasts, priors, &cache).map_err(|e| e.at_iteration(iterations))?;
        iterations += 1;
        if options.track_elbo {
            trace.push(elbo(&state, y, forecasts, priors, &cache));
        }
        if max_relative_change(&old, &state) < options.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("variational fit stopped after {iterations} sweeps without converging");
    }
    Ok(VbFit {
        state,
        iterations,
        converged,
        elbo: trace,
    })
}

/// Range-weighted kriging means of every field at `new_sites`:
/// `beta_bar_j + sum_l p_jl c_l^T G_l^{-1} (mu_j - beta_bar_j)`.
/// Returns `fields[j][k]` for field `j` at new site `k`.
pub fn vb_field_means(
    state: &VariationalState,
    train_sites: &SiteSet,
    new_sites: &SiteSet,
    priors: &PriorConfig,
    cache: &GridCache,
) -> Result<Vec<Vec<f64>>> {
    if train_sites.len() != state.n_sites() {
        return Err(Error::DimensionMismatch {
            what: "training sites",
            expected: state.n_sites(),
            found: train_sites.len(),
        });
    }
    let grid = cache.grid().points();
    let kernels = grid.iter().map(|&g| ExpKernel::new(g)).collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(state.mu.len());
    for j in 0..state.mu.len() {
        let level = priors.beta_bar[j];
        let delta = centered(&state.mu[j], level);
        let weights: Vec<Option<DVector<f64>>> = state.p[j]
            .iter()
            .enumerate()
            .map(|(l, &p)| (p > 1e-14).then(|| cache.inverse(l) * &delta))
            .collect();
        let field = new_sites
            .coords()
            .iter()
            .map(|s| {
                let mut acc = 0.0;
                let mut mass = 0.0;
                for (l, w) in weights.iter().enumerate() {
                    if let Some(w) = w {
                        let p = state.p[j][l];
                        acc += p * cross_correlation(s, train_sites, &kernels[l]).dot(w);
                        mass += p;
                    }
                }
                level + acc / mass
            })
            .collect();
        out.push(field);
    }
    Ok(out)
}

/// Plug-in predictive means at new sites: kriged intercept plus kriged
/// coefficients times the agent means there.
pub fn vb_point_predict(
    state: &VariationalState,
    train_sites: &SiteSet,
    new_sites: &SiteSet,
    forecasts_at_new: &AgentForecastSet,
    priors: &PriorConfig,
    cache: &GridCache,
) -> Result<Vec<f64>> {
    if forecasts_at_new.n_agents() != state.n_agents() {
        return Err(Error::DimensionMismatch {
            what: "agents at new sites",
            expected: state.n_agents(),
            found: forecasts_at_new.n_agents(),
        });
    }
    if forecasts_at_new.n_sites() != new_sites.len() {
        return Err(Error::DimensionMismatch {
            what: "forecast sites",
            expected: new_sites.len(),
            found: forecasts_at_new.n_sites(),
        });
    }
    let fields = vb_field_means(state, train_sites, new_sites, priors, cache)?;
    Ok((0..new_sites.len())
        .map(|k| {
            fields[0][k]
                + (0..state.n_agents())
                    .map(|j| fields[j + 1][k] * forecasts_at_new.means(j)[k])
                    .sum::<f64>()
        })
        .collect())
}
