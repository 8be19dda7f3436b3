//! Posterior sampler for the Gaussian-response synthesis model
//!
//! ```text
//! y_i = beta_0(s_i) + sum_j beta_j(s_i) f_j(s_i) + eps_i,   eps_i ~ N(0, sigma2)
//! beta_j ~ GP(beta_bar_j, tau_j G(g_j)),   f_j(s_i) ~ N(a_ji, b_ji)
//! ```
//!
//! Each iteration draws the latent factors, the coefficient fields, the
//! scales `tau_j`, the ranges `g_j` (random-walk Metropolis-Hastings) and the
//! error variance, in that order.

mod backend;

pub use backend::{
    covariate, dense_field_conditional, nngp_site_conditional, update_beta_dense_sweep, update_beta_nngp_sweep,
    Backend, FieldConditional, FieldPrior, SpatialPrior, WorkingLikelihood,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::agents::{AgentForecastSet, ForecastKind};
use crate::error::{Error, Result};
use crate::spatial::SiteSet;
use crate::stats::{mean, sample_inv_gamma, variance};

/// Target acceptance rate for the range sampler during burn-in.
pub const TARGET_ACCEPTANCE: f64 = 0.35;

/// Hyperparameters of the synthesis model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub a_sigma: f64,
    pub b_sigma: f64,
    pub a_tau: f64,
    pub b_tau: f64,
    pub g_lo: f64,
    pub g_hi: f64,
    /// Prior mean of each coefficient field, intercept first (length `J + 1`).
    pub beta_bar: Vec<f64>,
}

impl PriorConfig {
    /// Weakly informative defaults: IG(0.1, 0.1) for `sigma2` and `tau_j`,
    /// ranges uniform on `[0.01 d_max, d_max]`, prior weights `1/J`.
    pub fn default_for(sites: &SiteSet, n_agents: usize) -> Self {
        let d_max = sites.max_distance();
        let (g_lo, g_hi) = if d_max > 0.0 { (0.01 * d_max, d_max) } else { (0.01, 1.0) };
        let mut beta_bar = vec![0.0];
        beta_bar.extend(std::iter::repeat(1.0 / n_agents.max(1) as f64).take(n_agents));
        Self {
            a_sigma: 0.1,
            b_sigma: 0.1,
            a_tau: 0.1,
            b_tau: 0.1,
            g_lo,
            g_hi,
            beta_bar,
        }
    }

    pub fn validate(&self, n_agents: usize) -> Result<()> {
        let positive = [
            ("a_sigma", self.a_sigma),
            ("b_sigma", self.b_sigma),
            ("a_tau", self.a_tau),
            ("b_tau", self.b_tau),
            ("g_lo", self.g_lo),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.g_hi.is_finite() && self.g_hi > self.g_lo) {
            return Err(Error::InvalidConfig(format!(
                "need g_lo < g_hi, got [{}, {}]",
                self.g_lo, self.g_hi
            )));
        }
        if self.beta_bar.len() != n_agents + 1 {
            return Err(Error::DimensionMismatch {
                what: "beta_bar length",
                expected: n_agents + 1,
                found: self.beta_bar.len(),
            });
        }
        if self.beta_bar.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("beta_bar must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub n_burn: usize,
    pub n_keep: usize,
    pub thin: usize,
    pub backend: Backend,
    /// Initial random-walk scale for the ranges; `None` means `0.1 (g_hi - g_lo)`.
    pub mh_step: Option<f64>,
    pub seed: u64,
    /// Keep the latent factors at the agents' means instead of sampling them.
    pub fixed_factors: bool,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            n_burn: 1000,
            n_keep: 1000,
            thin: 1,
            backend: Backend::Nngp { m: 10 },
            mh_step: None,
            seed: 0,
            fixed_factors: false,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_keep == 0 || self.thin == 0 {
            return Err(Error::InvalidConfig("n_keep and thin must be at least 1".into()));
        }
        if let Backend::Nngp { m: 0 } = self.backend {
            return Err(Error::InvalidConfig("NNGP neighbor count must be at least 1".into()));
        }
        if let Some(s) = self.mh_step {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::InvalidConfig(format!("mh_step must be positive, got {s}")));
            }
        }
        Ok(())
    }

    pub fn total_iterations(&self) -> usize {
        self.n_burn + self.n_keep * self.thin
    }
}

/// Coefficient fields and their GP hyperparameters. `beta[0]` is the intercept field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientFields {
    pub beta: Vec<Vec<f64>>,
    pub tau: Vec<f64>,
    pub g: Vec<f64>,
}

impl CoefficientFields {
    pub fn n_fields(&self) -> usize {
        self.beta.len()
    }

    pub fn is_valid(&self, priors: &PriorConfig) -> bool {
        self.beta.iter().flatten().all(|v| v.is_finite())
            && self.tau.iter().all(|t| t.is_finite() && *t > 0.0)
            && self.g.iter().all(|g| (priors.g_lo..=priors.g_hi).contains(g))
    }

    /// Linear predictor `beta_0i + sum_j beta_ji f_ji`.
    pub fn linear_predictor(&self, f: &[Vec<f64>], i: usize) -> f64 {
        (0..self.beta.len()).map(|j| covariate(f, j, i) * self.beta[j][i]).sum()
    }
}

/// One state of the Gaussian-response chain. `f[j]` holds agent `j`'s latent
/// factor at every site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisState {
    pub f: Vec<Vec<f64>>,
    pub coef: CoefficientFields,
    pub sigma2: f64,
}

impl SynthesisState {
    pub fn is_valid(&self, priors: &PriorConfig) -> bool {
        self.sigma2.is_finite() && self.sigma2 > 0.0 && self.f.iter().flatten().all(|v| v.is_finite())
            && self.coef.is_valid(priors)
    }

    pub fn residual(&self, y: &[f64], i: usize) -> f64 {
        y[i] - self.coef.linear_predictor(&self.f, i)
    }
}

/// Retained draw; `sigma2` is absent for binary responses and `f` holds 0/1
/// indicators there.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraw {
    pub f: Vec<Vec<f64>>,
    pub coef: CoefficientFields,
    pub sigma2: Option<f64>,
}

/// Output of a chain run.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorSamples {
    pub response: ForecastKind,
    pub backend: Backend,
    pub sites: SiteSet,
    pub beta_bar: Vec<f64>,
    pub draws: Vec<PosteriorDraw>,
    /// Post-burn-in acceptance rate of each range sampler.
    pub acceptance: Vec<f64>,
    /// Random-walk scales after burn-in adaptation.
    pub mh_steps: Vec<f64>,
}

impl PosteriorSamples {
    pub fn n_agents(&self) -> usize {
        self.beta_bar.len() - 1
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    /// Posterior mean of every coefficient field.
    pub fn mean_beta(&self) -> Vec<Vec<f64>> {
        let p = self.beta_bar.len();
        let n = self.n_sites();
        let mut acc = vec![vec![0.0; n]; p];
        for d in &self.draws {
            for (a, b) in acc.iter_mut().zip(&d.coef.beta) {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
            }
        }
        let k = self.draws.len() as f64;
        acc.iter_mut().flatten().for_each(|v| *v /= k);
        acc
    }

    pub fn sigma2_trace(&self) -> Vec<f64> {
        self.draws.iter().filter_map(|d| d.sigma2).collect()
    }

    pub fn tau_trace(&self, j: usize) -> Vec<f64> {
        self.draws.iter().map(|d| d.coef.tau[j]).collect()
    }

    pub fn g_trace(&self, j: usize) -> Vec<f64> {
        self.draws.iter().map(|d| d.coef.g[j]).collect()
    }

    pub fn beta_trace(&self, j: usize, i: usize) -> Vec<f64> {
        self.draws.iter().map(|d| d.coef.beta[j][i]).collect()
    }
}

pub(crate) fn check_inputs(y: &[f64], forecasts: &AgentForecastSet, sites: &SiteSet, priors: &PriorConfig) -> Result<()> {
    if y.is_empty() {
        return Err(Error::EmptyData);
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig("responses must be finite".into()));
    }
    if forecasts.n_sites() != y.len() {
        return Err(Error::DimensionMismatch {
            what: "forecast sites",
            expected: y.len(),
            found: forecasts.n_sites(),
        });
    }
    if sites.len() != y.len() {
        return Err(Error::DimensionMismatch {
            what: "sites",
            expected: y.len(),
            found: sites.len(),
        });
    }
    priors.validate(forecasts.n_agents())
}

/// Initial state: factors at the agent means, fields at their prior means,
/// `sigma2` at the sample variance of `y` (at least `1e-6`), `tau_j` at the
/// prior mode and `g_j` at the middle of its support.
pub fn init_state(y: &[f64], forecasts: &AgentForecastSet, priors: &PriorConfig) -> Result<SynthesisState> {
    if y.is_empty() {
        return Err(Error::EmptyData);
    }
    forecasts.expect_kind(ForecastKind::Gaussian)?;
    priors.validate(forecasts.n_agents())?;
    let n = y.len();
    let p = forecasts.n_agents() + 1;
    Ok(SynthesisState {
        f: (0..forecasts.n_agents()).map(|j| forecasts.means(j).to_vec()).collect(),
        coef: init_fields(n, p, priors),
        sigma2: variance(y).max(1e-6),
    })
}

pub(crate) fn init_fields(n: usize, p: usize, priors: &PriorConfig) -> CoefficientFields {
    CoefficientFields {
        beta: priors.beta_bar.iter().map(|&b| vec![b; n]).collect(),
        tau: vec![priors.b_tau / (priors.a_tau + 1.0); p],
        g: vec![0.5 * (priors.g_lo + priors.g_hi); p],
    }
}

/// Mean and variance of `f_ji` given everything else:
/// `A = (beta^2 / sigma2 + 1 / b)^{-1}`, `B = beta resid / sigma2 + a / b`,
/// where `resid` excludes agent `j`'s own term.
pub fn factor_conditional(beta: f64, sigma2: f64, resid: f64, a: f64, b: f64) -> (f64, f64) {
    let var = 1.0 / (beta * beta / sigma2 + 1.0 / b);
    (var * (beta * resid / sigma2 + a / b), var)
}

/// Redraws every latent factor, agent by agent, from its normal full conditional.
pub fn update_factors<R: Rng + ?Sized>(
    state: &mut SynthesisState,
    y: &[f64],
    forecasts: &AgentForecastSet,
    rng: &mut R,
) -> Result<()> {
    forecasts.expect_kind(ForecastKind::Gaussian)?;
    let n = y.len();
    for j in 0..forecasts.n_agents() {
        let (a, b) = (forecasts.means(j), forecasts.variances(j));
        for i in 0..n {
            let beta = state.coef.beta[j + 1][i];
            let own = beta * state.f[j][i];
            let resid = state.residual(y, i) + own;
            let (m, v) = factor_conditional(beta, state.sigma2, resid, a[i], b[i]);
            state.f[j][i] = m + v.sqrt() * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(())
}

/// Dense-prior coefficient update for every field.
pub fn update_beta_full<R: Rng + ?Sized>(
    state: &mut SynthesisState,
    y: &[f64],
    priors: &PriorConfig,
    field_priors: &[FieldPrior],
    rng: &mut R,
) -> Result<()> {
    let lik = WorkingLikelihood::gaussian(y, state.sigma2);
    update_beta_dense_sweep(
        &state.f,
        &mut state.coef.beta,
        &lik,
        &priors.beta_bar,
        &state.coef.tau,
        field_priors,
        rng,
    )
}

/// NNGP coefficient update: joint draw of all fields site by site.
pub fn update_beta_nngp<R: Rng + ?Sized>(
    state: &mut SynthesisState,
    y: &[f64],
    priors: &PriorConfig,
    spatial: &SpatialPrior,
    field_priors: &[FieldPrior],
    rng: &mut R,
) -> Result<()> {
    let lik = WorkingLikelihood::gaussian(y, state.sigma2);
    update_beta_nngp_sweep(
        &state.f,
        &mut state.coef.beta,
        &lik,
        &priors.beta_bar,
        &state.coef.tau,
        field_priors,
        spatial,
        rng,
    )
}

/// Shape and scale of the inverse-gamma full conditional of `tau_j`.
pub fn tau_conditional(
    coef: &CoefficientFields,
    j: usize,
    priors: &PriorConfig,
    spatial: &SpatialPrior,
    prior: &FieldPrior,
) -> (f64, f64) {
    let centered: Vec<f64> = coef.beta[j].iter().map(|b| b - priors.beta_bar[j]).collect();
    let qf = prior.quad_form(spatial, &centered);
    (priors.a_tau + 0.5 * centered.len() as f64, priors.b_tau + 0.5 * qf)
}

/// Redraws each `tau_j` from `IG(a_tau + n/2, b_tau + q_j/2)`, with `q_j` the
/// prior quadratic form of the centered field.
pub fn update_tau<R: Rng + ?Sized>(
    coef: &mut CoefficientFields,
    priors: &PriorConfig,
    spatial: &SpatialPrior,
    field_priors: &[FieldPrior],
    rng: &mut R,
) {
    for j in 0..coef.n_fields() {
        let (shape, scale) = tau_conditional(coef, j, priors, spatial, &field_priors[j]);
        coef.tau[j] = sample_inv_gamma(shape, scale, rng);
    }
}

/// Random-walk scales for the range updates, with Robbins-Monro adaptation.
#[derive(Clone, Debug, PartialEq)]
pub struct RangeTuning {
    pub steps: Vec<f64>,
    width: f64,
}

impl RangeTuning {
    pub fn new(n_fields: usize, priors: &PriorConfig, initial: Option<f64>) -> Self {
        let width = priors.g_hi - priors.g_lo;
        Self {
            steps: vec![initial.unwrap_or(0.1 * width); n_fields],
            width,
        }
    }

    /// Moves each log-step toward the target acceptance rate.
    pub fn adapt(&mut self, accepted: &[bool], iteration: usize) {
        let gain = 1.0 / ((iteration + 1) as f64).powf(0.6);
        for (s, &acc) in self.steps.iter_mut().zip(accepted) {
            let delta = if acc { 1.0 } else { 0.0 } - TARGET_ACCEPTANCE;
            *s = (*s * (gain * delta).exp()).clamp(1e-6 * self.width, self.width);
        }
    }
}

/// Reflects `x` into `[lo, hi]`.
pub fn reflect(x: f64, lo: f64, hi: f64) -> f64 {
    let w = hi - lo;
    let mut r = (x - lo).rem_euclid(2.0 * w);
    if r > w {
        r = 2.0 * w - r;
    }
    lo + r
}

/// One Metropolis-Hastings step for each range `g_j`. Returns which proposals
/// were accepted; on acceptance the field prior is refreshed. Proposals whose
/// correlation matrices fail to factor are rejected.
pub fn update_g_mh<R: Rng + ?Sized>(
    coef: &mut CoefficientFields,
    priors: &PriorConfig,
    spatial: &SpatialPrior,
    field_priors: &mut [FieldPrior],
    tuning: &RangeTuning,
    rng: &mut R,
) -> Vec<bool> {
    let mut accepted = Vec::with_capacity(coef.n_fields());
    for j in 0..coef.n_fields() {
        let eps: f64 = rng.sample(StandardNormal);
        let proposal = reflect(coef.g[j] + tuning.steps[j] * eps, priors.g_lo, priors.g_hi);
        let u: f64 = rng.gen();
        let Ok(mut candidate) = spatial.field_prior(proposal) else {
            accepted.push(false);
            continue;
        };
        let (beta, bar, tau) = (&coef.beta[j], priors.beta_bar[j], coef.tau[j]);
        let current = field_priors[j].log_range_target(spatial, beta, bar, tau);
        let next = candidate.log_range_target(spatial, beta, bar, tau);
        if u.ln() < next - current {
            candidate.ensure_inverse();
            field_priors[j] = candidate;
            coef.g[j] = proposal;
            accepted.push(true);
        } else {
            accepted.push(false);
        }
    }
    accepted
}

/// Shape and scale of the inverse-gamma full conditional of `sigma2`.
pub fn sigma2_conditional(state: &SynthesisState, y: &[f64], priors: &PriorConfig) -> (f64, f64) {
    let rss: f64 = (0..y.len()).map(|i| state.residual(y, i).powi(2)).sum();
    (priors.a_sigma + 0.5 * y.len() as f64, priors.b_sigma + 0.5 * rss)
}

pub fn update_sigma2<R: Rng + ?Sized>(state: &mut SynthesisState, y: &[f64], priors: &PriorConfig, rng: &mut R) {
    let (shape, scale) = sigma2_conditional(state, y, priors);
    state.sigma2 = sample_inv_gamma(shape, scale, rng);
}

pub(crate) fn build_field_priors(spatial: &SpatialPrior, g: &[f64]) -> Result<Vec<FieldPrior>> {
    g.iter().map(|&g| spatial.field_prior_ready(g)).collect()
}

/// Runs the Gaussian-response sampler from [`init_state`].
pub fn run_chain(
    y: &[f64],
    sites: &SiteSet,
    forecasts: &AgentForecastSet,
    priors: &PriorConfig,
    config: &ChainConfig,
) -> Result<PosteriorSamples> {
    check_inputs(y, forecasts, sites, priors)?;
    let state = init_state(y, forecasts, priors)?;
    run_chain_from(state, y, sites, forecasts, priors, config)
}

/// Runs the Gaussian-response sampler from a given state.
pub fn run_chain_from(
    mut state: SynthesisState,
    y: &[f64],
    sites: &SiteSet,
    forecasts: &AgentForecastSet,
    priors: &PriorConfig,
    config: &ChainConfig,
) -> Result<PosteriorSamples> {
    check_inputs(y, forecasts, sites, priors)?;
    forecasts.expect_kind(ForecastKind::Gaussian)?;
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let spatial = SpatialPrior::new(sites, config.backend)?;
    let p = state.coef.n_fields();
    let mut field_priors = build_field_priors(&spatial, &state.coef.g)?;
    let mut tuning = RangeTuning::new(p, priors, config.mh_step);
    let mut accepts = vec![0usize; p];
    let mut draws = Vec::with_capacity(config.n_keep);

    for it in 0..config.total_iterations() {
        let step = |state: &mut SynthesisState,
                    field_priors: &mut Vec<FieldPrior>,
                    rng: &mut ChaCha8Rng|
         -> Result<Vec<bool>> {
            if !config.fixed_factors {
                update_factors(state, y, forecasts, rng)?;
            }
            match config.backend {
                Backend::FullGp => update_beta_full(state, y, priors, field_priors, rng)?,
                Backend::Nngp { .. } => update_beta_nngp(state, y, priors, &spatial, field_priors, rng)?,
            }
            update_tau(&mut state.coef, priors, &spatial, field_priors, rng);
            let acc = update_g_mh(&mut state.coef, priors, &spatial, field_priors, &tuning, rng);
            update_sigma2(state, y, priors, rng);
            Ok(acc)
        };
        let acc = step(&mut state, &mut field_priors, &mut rng).map_err(|e| e.at_iteration(it))?;
        if it < config.n_burn {
            tuning.adapt(&acc, it);
            continue;
        }
        for (c, a) in accepts.iter_mut().zip(&acc) {
            *c += usize::from(*a);
        }
        if (it - config.n_burn + 1) % config.thin == 0 {
            draws.push(PosteriorDraw {
                f: state.f.clone(),
                coef: state.coef.clone(),
                sigma2: Some(state.sigma2),
            });
        }
    }
    let kept_iters = (config.total_iterations() - config.n_burn) as f64;
    Ok(PosteriorSamples {
        response: ForecastKind::Gaussian,
        backend: config.backend,
        sites: sites.clone(),
        beta_bar: priors.beta_bar.clone(),
        draws,
        acceptance: accepts.iter().map(|&c| c as f64 / kept_iters).collect(),
        mh_steps: tuning.steps,
    })
}

/// Draws `(y, f)` from the sampling model given the coefficient state; used
/// by joint-distribution checks.
pub fn simulate_response<R: Rng + ?Sized>(
    coef: &CoefficientFields,
    forecasts: &AgentForecastSet,
    sigma2: f64,
    rng: &mut R,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = forecasts.n_sites();
    let f: Vec<Vec<f64>> = (0..forecasts.n_agents())
        .map(|j| {
            (0..n)
                .map(|i| {
                    let (a, b) = (forecasts.means(j)[i], forecasts.variances(j)[i]);
                    Normal::new(a, b.sqrt()).map(|d| rng.sample(d)).unwrap_or(a)
                })
                .collect()
        })
        .collect();
    let noise = sigma2.sqrt();
    let y = (0..n)
        .map(|i| coef.linear_predictor(&f, i) + noise * rng.sample::<f64, _>(StandardNormal))
        .collect();
    (y, f)
}

/// Posterior mean of `sigma2` over retained draws; NaN for binary chains.
pub fn posterior_mean_sigma2(samples: &PosteriorSamples) -> f64 {
    let t = samples.sigma2_trace();
    if t.is_empty() {
        f64::NAN
    } else {
        mean(&t)
    }
}
