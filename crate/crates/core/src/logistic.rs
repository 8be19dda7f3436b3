//! Binary-response synthesis through Pólya-gamma augmentation.
//!
//! ```text
//! y_i ~ Ber(expit(psi_i)),   psi_i = beta_0(s_i) + sum_j beta_j(s_i) f_j(s_i),
//! f_j(s_i) ~ Ber(a_ji),      omega_i | psi_i ~ PG(1, psi_i)
//! ```
//!
//! Given `omega`, the coefficient fields have Gaussian full conditionals with
//! per-site weight `omega_i` and working response `y_i - 1/2`. The scale and
//! range updates are the Gaussian sampler's own functions.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

pub use crate::gibbs::{update_g_mh, update_tau};

use crate::agents::{AgentForecastSet, ForecastKind};
use crate::error::{Error, Result};
use crate::gibbs::{
    build_field_priors, check_inputs, init_fields, update_beta_dense_sweep, update_beta_nngp_sweep, Backend,
    ChainConfig, CoefficientFields, FieldPrior, PosteriorDraw, PosteriorSamples, PriorConfig, RangeTuning,
    SpatialPrior, WorkingLikelihood,
};
use crate::spatial::SiteSet;
use crate::stats::softplus;

/// Truncation point between the two pieces of the Jacobi proposal.
const TRUNC: f64 = 0.64;
/// Proposal rounds before [`sample_pg1`] gives up.
pub const MAX_PG_ROUNDS: usize = 10_000;

/// `ln Phi(x)` for the standard normal CDF, accurate far into the lower tail.
fn ln_norm_cdf(x: f64) -> f64 {
    if x > -30.0 {
        (0.5 * erfc(-x / std::f64::consts::SQRT_2)).ln()
    } else {
        let x2 = x * x;
        let series = 1.0 - 1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2);
        -0.5 * x2 - (-x).ln() - 0.5 * (2.0 * PI).ln() + series.ln()
    }
}

/// Probability of drawing from the exponential (right) piece of the proposal.
fn mass_texpon(z: f64) -> f64 {
    let fz = PI * PI / 8.0 + 0.5 * z * z;
    let rt = (1.0 / TRUNC).sqrt();
    let b = rt * (TRUNC * z - 1.0);
    let a = -rt * (TRUNC * z + 1.0);
    let x0 = fz.ln() + fz * TRUNC;
    let xb = x0 - z + ln_norm_cdf(b);
    let xa = x0 + z + ln_norm_cdf(a);
    let qdivp = 4.0 / PI * (xb.exp() + xa.exp());
    1.0 / (1.0 + qdivp)
}

/// Inverse-Gaussian draw with mean `1/z` and shape 1, truncated to `(0, TRUNC)`.
fn rtigauss<R: Rng + ?Sized>(z: f64, rng: &mut R) -> f64 {
    let mu = 1.0 / z;
    if mu > TRUNC {
        loop {
            let e1 = loop {
                let e1: f64 = rng.sample(Exp1);
                let e2: f64 = rng.sample(Exp1);
                if e1 * e1 <= 2.0 * e2 / TRUNC {
                    break e1;
                }
            };
            let x = TRUNC / (1.0 + TRUNC * e1).powi(2);
            let alpha = (-0.5 * z * z * x).exp();
            if rng.gen::<f64>() <= alpha {
                return x;
            }
        }
    } else {
        loop {
            let n: f64 = rng.sample(StandardNormal);
            let y = n * n;
            let mut x = mu + 0.5 * mu * mu * y - 0.5 * mu * (4.0 * mu * y + (mu * y).powi(2)).sqrt();
            if rng.gen::<f64>() > mu / (mu + x) {
                x = mu * mu / x;
            }
            if x <= TRUNC {
                return x;
            }
        }
    }
}

/// `n`-th coefficient of the alternating series for the Jacobi density at `x`.
fn a_coef(n: usize, x: f64) -> f64 {
    let h = n as f64 + 0.5;
    let k = h * PI;
    if x > TRUNC {
        k * (-0.5 * k * k * x).exp()
    } else if x > 0.0 {
        (-1.5 * ((0.5 * PI).ln() + x.ln()) + k.ln() - 2.0 * h * h / x).exp()
    } else {
        0.0
    }
}

/// Exact draw from `PG(1, c)` by alternating-series rejection from a mixture
/// of a truncated inverse Gaussian and a shifted exponential.
pub fn sample_pg1<R: Rng + ?Sized>(c: f64, rng: &mut R) -> Result<f64> {
    let z = 0.5 * c.abs();
    let fz = PI * PI / 8.0 + 0.5 * z * z;
    let p_exp = mass_texpon(z);
    for _ in 0..MAX_PG_ROUNDS {
        let x = if rng.gen::<f64>() < p_exp {
            TRUNC + rng.sample::<f64, _>(Exp1) / fz
        } else {
            rtigauss(z, rng)
        };
        let mut s = a_coef(0, x);
        let y = rng.gen::<f64>() * s;
        let mut n = 0;
        loop {
            n += 1;
            if n % 2 == 1 {
                s -= a_coef(n, x);
                if y <= s {
                    return Ok(0.25 * x);
                }
            } else {
                s += a_coef(n, x);
                if y > s {
                    break;
                }
            }
        }
    }
    Err(Error::SamplerStall { rounds: MAX_PG_ROUNDS })
}

/// State of the binary-response sampler.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryState {
    /// Latent agent indicators `f[j][i]`, each 0 or 1.
    pub f: Vec<Vec<f64>>,
    pub coef: CoefficientFields,
    pub omega: Vec<f64>,
}

impl BinaryState {
    pub fn psi(&self, i: usize) -> f64 {
        self.coef.linear_predictor(&self.f, i)
    }

    pub fn is_valid(&self, priors: &PriorConfig) -> bool {
        self.coef.is_valid(priors)
            && self.f.iter().flatten().all(|&v| v == 0.0 || v == 1.0)
            && self.omega.iter().all(|&w| w > 0.0 && w.is_finite())
            && (0..self.omega.len()).all(|i| self.psi(i).is_finite())
    }
}

/// Initial state: indicators at the rounded agent probabilities, fields at
/// their prior means and `omega_i = 1/4`.
pub fn init_binary_state(y: &[f64], forecasts: &AgentForecastSet, priors: &PriorConfig) -> Result<BinaryState> {
    if y.is_empty() {
        return Err(Error::EmptyData);
    }
    forecasts.expect_kind(ForecastKind::Bernoulli)?;
    priors.validate(forecasts.n_agents())?;
    let n = y.len();
    Ok(BinaryState {
        f: (0..forecasts.n_agents())
            .map(|j| forecasts.means(j).iter().map(|&a| if a >= 0.5 { 1.0 } else { 0.0 }).collect())
            .collect(),
        coef: init_fields(n, forecasts.n_agents() + 1, priors),
        omega: vec![0.25; n],
    })
}

/// Redraws `omega_i ~ PG(1, psi_i)` at every site.
pub fn update_omega<R: Rng + ?Sized>(state: &mut BinaryState, rng: &mut R) -> Result<()> {
    for i in 0..state.omega.len() {
        let psi = state.psi(i);
        state.omega[i] = sample_pg1(psi, rng)?;
    }
    Ok(())
}

/// Draws the coefficient fields given `omega`, dense (field by field) or
/// NNGP (site by site) depending on the spatial prior.
pub fn update_beta_logistic<R: Rng + ?Sized>(
    state: &mut BinaryState,
    y: &[f64],
    priors: &PriorConfig,
    spatial: &SpatialPrior,
    field_priors: &[FieldPrior],
    rng: &mut R,
) -> Result<()> {
    let lik = WorkingLikelihood::polya_gamma(y, &state.omega);
    let (f, coef) = (&state.f, &mut state.coef);
    match spatial.backend() {
        Backend::FullGp => {
            update_beta_dense_sweep(f, &mut coef.beta, &lik, &priors.beta_bar, &coef.tau, field_priors, rng)
        }
        Backend::Nngp { .. } => update_beta_nngp_sweep(
            f,
            &mut coef.beta,
            &lik,
            &priors.beta_bar,
            &coef.tau,
            field_priors,
            spatial,
            rng,
        ),
    }
}

/// Posterior probability that `f = 1` given prior probability `a` and the
/// linear predictors `psi0`, `psi1` with the indicator at 0 and 1.
pub fn factor_posterior_prob(a: f64, y: f64, psi0: f64, psi1: f64) -> f64 {
    if a <= 0.0 {
        return 0.0;
    }
    if a >= 1.0 {
        return 1.0;
    }
    let log_l = (y * (psi0 - psi1) + softplus(psi1) - softplus(psi0)).clamp(-700.0, 700.0);
    a / (a + (1.0 - a) * log_l.exp())
}

/// Redraws every latent indicator from its Bernoulli full conditional.
pub fn update_factor_bernoulli<R: Rng + ?Sized>(
    state: &mut BinaryState,
    y: &[f64],
    forecasts: &AgentForecastSet,
    rng: &mut R,
) -> Result<()> {
    forecasts.expect_kind(ForecastKind::Bernoulli)?;
    for j in 0..forecasts.n_agents() {
        let a = forecasts.means(j);
        for i in 0..y.len() {
            let beta = state.coef.beta[j + 1][i];
            let psi0 = state.psi(i) - beta * state.f[j][i];
            let p = factor_posterior_prob(a[i], y[i], psi0, psi0 + beta);
            state.f[j][i] = if rng.gen::<f64>() < p { 1.0 } else { 0.0 };
        }
    }
    Ok(())
}

/// Default retention for binary runs: 3000 burn-in, 7000 kept.
pub fn binary_chain_defaults() -> ChainConfig {
    ChainConfig {
        n_burn: 3000,
        n_keep: 7000,
        ..ChainConfig::default()
    }
}

fn check_binary(y: &[f64]) -> Result<()> {
    match y.iter().position(|&v| v != 0.0 && v != 1.0) {
        Some(i) => Err(Error::InvalidConfig(format!("binary response at row {i} is {}, expected 0 or 1", y[i]))),
        None => Ok(()),
    }
}

/// Runs the binary-response sampler from [`init_binary_state`].
pub fn run_chain_binary(
    y: &[f64],
    sites: &SiteSet,
    forecasts: &AgentForecastSet,
    priors: &PriorConfig,
    config: &ChainConfig,
) -> Result<PosteriorSamples> {
    check_inputs(y, forecasts, sites, priors)?;
    check_binary(y)?;
    let state = init_binary_state(y, forecasts, priors)?;
    run_chain_binary_from(state, y, sites, forecasts, priors, config)
}

pub fn run_chain_binary_from(
    mut state: BinaryState,
    y: &[f64],
    sites: &SiteSet,
    forecasts: &AgentForecastSet,
    priors: &PriorConfig,
    config: &ChainConfig,
) -> Result<PosteriorSamples> {
    check_inputs(y, forecasts, sites, priors)?;
    check_binary(y)?;
    forecasts.expect_kind(ForecastKind::Bernoulli)?;
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let spatial = SpatialPrior::new(sites, config.backend)?;
    let p = state.coef.n_fields();
    let mut field_priors = build_field_priors(&spatial, &state.coef.g)?;
    let mut tuning = RangeTuning::new(p, priors, config.mh_step);
    let mut accepts = vec![0usize; p];
    let mut draws = Vec::with_capacity(config.n_keep);

    for it in 0..config.total_iterations() {
        let mut step = || -> Result<Vec<bool>> {
            if !config.fixed_factors {
                update_factor_bernoulli(&mut state, y, forecasts, &mut rng)?;
            }
            update_beta_logistic(&mut state, y, priors, &spatial, &field_priors, &mut rng)?;
            update_tau(&mut state.coef, priors, &spatial, &field_priors, &mut rng);
            let acc = update_g_mh(&mut state.coef, priors, &spatial, &mut field_priors, &tuning, &mut rng);
            update_omega(&mut state, &mut rng)?;
            Ok(acc)
        };
        let acc = step().map_err(|e| e.at_iteration(it))?;
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
                sigma2: None,
            });
        }
    }
    let kept_iters = (config.total_iterations() - config.n_burn) as f64;
    Ok(PosteriorSamples {
        response: ForecastKind::Bernoulli,
        backend: config.backend,
        sites: sites.clone(),
        beta_bar: priors.beta_bar.clone(),
        draws,
        acceptance: accepts.iter().map(|&c| c as f64 / kept_iters).collect(),
        mh_steps: tuning.steps,
    })
}

/// Posterior mean of `psi_i` at each training site.
pub fn posterior_mean_psi(samples: &PosteriorSamples) -> Vec<f64> {
    let n = samples.n_sites();
    let k = samples.draws.len() as f64;
    let mut out = vec![0.0; n];
    for d in &samples.draws {
        for (i, o) in out.iter_mut().enumerate() {
            *o += d.coef.linear_predictor(&d.f, i) / k;
        }
    }
    out
}
