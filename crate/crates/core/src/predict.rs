//! Posterior predictive distributions at new sites.
//!
//! For every retained draw the agent factors at a new site are drawn from the
//! agents' forecasts there, each coefficient field is drawn from its Gaussian
//! conditional given the draw's values at the training sites, and the response
//! is drawn from the synthesis model (Gaussian) or reported as the success
//! probability (binary).

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::agents::{AgentForecastSet, ForecastKind};
use crate::error::{Error, Result};
use crate::gibbs::{PosteriorDraw, PosteriorSamples};
use crate::spatial::{
    chol_factor, cholesky_in_place, euclidean, forward_solve, CholFactor, ExpKernel, Kriging, SiteSet, DEFAULT_JITTER,
};
use crate::stats::{expit, mean, quantile_sorted};

/// Which training sites the coefficient conditionals condition on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Conditioning {
    /// All training sites.
    Full,
    /// The `m` training sites nearest to each new site.
    Neighbors(usize),
}

impl Conditioning {
    /// Neighbor conditioning for NNGP chains, full conditioning otherwise.
    pub fn for_samples(samples: &PosteriorSamples) -> Self {
        match samples.backend {
            crate::gibbs::Backend::FullGp => Conditioning::Full,
            crate::gibbs::Backend::Nngp { m } => Conditioning::Neighbors(m),
        }
    }
}

/// Predictive draws, site-major: `values[k][d]` for new site `k`, draw `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveDraws {
    pub kind: ForecastKind,
    pub values: Vec<Vec<f64>>,
    /// Posterior mean of each coefficient field at each new site, `weights[j][k]`.
    pub weights: Vec<Vec<f64>>,
}

impl PredictiveDraws {
    pub fn n_sites(&self) -> usize {
        self.values.len()
    }

    pub fn n_draws(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveSummary {
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub alpha: f64,
}

/// Per-draw conditional of one coefficient field at the new sites.
enum FieldKriger {
    Full { kriging: Kriging, weights: DVector<f64> },
    Neighbors { kernel: ExpKernel },
}

struct Setup<'a> {
    samples: &'a PosteriorSamples,
    new_sites: &'a SiteSet,
    forecasts: &'a AgentForecastSet,
    conditioning: Conditioning,
    neighbors: Vec<Vec<usize>>,
    /// Row-major distances among each new site's neighbors.
    local_dist: Vec<Vec<f64>>,
    /// Distances from each new site to its neighbors.
    cross_dist: Vec<Vec<f64>>,
    seed: u64,
}

impl Setup<'_> {
    fn conditional(
        &self,
        kriger: &FieldKriger,
        field: &[f64],
        level: f64,
        tau: f64,
        k: usize,
    ) -> Result<(f64, f64)> {
        let site = self.new_sites.get(k);
        match kriger {
            FieldKriger::Full { kriging, weights } => Ok(kriging.conditional_with_weights(&site, weights, level, tau)),
            FieldKriger::Neighbors { kernel } => {
                let idx = &self.neighbors[k];
                let m = idx.len();
                let local = &self.local_dist[k];
                let mut chol = vec![0.0; m * m];
                for r in 0..m {
                    chol[r * m + r] = 1.0 + DEFAULT_JITTER;
                    for c in 0..r {
                        chol[r * m + c] = kernel.correlation(local[r * m + c]);
                    }
                }
                let mut u: Vec<f64> = self.cross_dist[k].iter().map(|&d| kernel.correlation(d)).collect();
                let mut v: Vec<f64> = idx.iter().map(|&i| field[i] - level).collect();
                if cholesky_in_place(&mut chol, m) {
                    forward_solve(&chol, m, &mut u);
                    forward_solve(&chol, m, &mut v);
                    let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
                    let norm: f64 = u.iter().map(|a| a * a).sum();
                    return Ok((level + dot, (tau * (1.0 - norm)).clamp(0.0, tau)));
                }
                let c_nn = DMatrix::from_fn(m, m, |a, b| if a == b { 1.0 } else { kernel.correlation(local[a * m + b]) });
                let factor = chol_factor(&c_nn, DEFAULT_JITTER)?;
                let cross = DVector::from_iterator(m, self.cross_dist[k].iter().map(|&d| kernel.correlation(d)));
                let centered = DVector::from_iterator(m, idx.iter().map(|&i| field[i] - level));
                Ok(neighbor_conditional(&factor, &cross, &centered, level, tau))
            }
        }
    }

    /// Predictive values and conditional field means for draw `d`.
    fn draw(&self, d: usize, cache: &mut Vec<Option<(f64, Kriging)>>) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let draw: &PosteriorDraw = &self.samples.draws[d];
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(d as u64);
        let n_new = self.new_sites.len();
        let p = draw.coef.n_fields();
        let mut psi = vec![0.0; n_new];
        let mut field_means = vec![vec![0.0; n_new]; p];
        for j in 0..p {
            let (field, level, tau, g) = (
                &draw.coef.beta[j],
                self.samples.beta_bar[j],
                draw.coef.tau[j],
                draw.coef.g[j],
            );
            let kriger = match self.conditioning {
                Conditioning::Full => {
                    let kriging = match &cache[j] {
                        Some((cached_g, k)) if *cached_g == g => k.clone(),
                        _ => {
                            let k = Kriging::new(&self.samples.sites, ExpKernel::new(g)?)?;
                            cache[j] = Some((g, k.clone()));
                            k
                        }
                    };
                    let weights = kriging.weights(field, level);
                    FieldKriger::Full { kriging, weights }
                }
                Conditioning::Neighbors(_) => FieldKriger::Neighbors {
                    kernel: ExpKernel::new(g)?,
                },
            };
            for k in 0..n_new {
                let (m, v) = self.conditional(&kriger, field, level, tau, k)?;
                field_means[j][k] = m;
                let beta = m + v.sqrt() * rng.sample::<f64, _>(StandardNormal);
                let x = if j == 0 { 1.0 } else { self.factor_draw(j - 1, k, &mut rng) };
                psi[k] += beta * x;
            }
        }
        let values = match self.samples.response {
            ForecastKind::Gaussian => {
                let sd = draw.sigma2.unwrap_or(0.0).sqrt();
                psi.iter().map(|p| p + sd * rng.sample::<f64, _>(StandardNormal)).collect()
            }
            ForecastKind::Bernoulli => psi.iter().map(|&p| expit(p)).collect(),
        };
        Ok((values, field_means))
    }

    fn factor_draw(&self, j: usize, k: usize, rng: &mut ChaCha8Rng) -> f64 {
        let a = self.forecasts.means(j)[k];
        match self.forecasts.kind() {
            ForecastKind::Gaussian => a + self.forecasts.variances(j)[k].sqrt() * rng.sample::<f64, _>(StandardNormal),
            ForecastKind::Bernoulli => f64::from(rng.gen::<f64>() < a),
        }
    }
}

/// Conditional mean and variance from a factored neighbor block: `level +
/// c^T C^{-1} x` and `tau (1 - c^T C^{-1} c)`, clamped to `[0, tau]`.
fn neighbor_conditional(factor: &CholFactor, cross: &DVector<f64>, centered: &DVector<f64>, level: f64, tau: f64) -> (f64, f64) {
    let u = factor.solve_lower(cross);
    let v = factor.solve_lower(centered);
    let mean = level + u.dot(&v);
    let var = (tau * (1.0 - u.norm_squared())).clamp(0.0, tau);
    (mean, var)
}

/// Draws the posterior predictive at `new_sites`, one value per retained
/// draw. Draw `d` uses its own random stream derived from `seed`, so the
/// result does not depend on how draws are scheduled across threads.
pub fn predictive_draws(
    samples: &PosteriorSamples,
    new_sites: &SiteSet,
    forecasts_at_new: &AgentForecastSet,
    conditioning: Conditioning,
    seed: u64,
) -> Result<PredictiveDraws> {
    if samples.draws.is_empty() {
        return Err(Error::EmptyData);
    }
    if forecasts_at_new.n_agents() != samples.n_agents() {
        return Err(Error::DimensionMismatch {
            what: "agents at new sites",
            expected: samples.n_agents(),
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
    if samples.n_agents() > 0 {
        forecasts_at_new.expect_kind(samples.response)?;
    }
    let neighbors = match conditioning {
        Conditioning::Full => Vec::new(),
        Conditioning::Neighbors(0) => return Err(Error::InvalidConfig("neighbor count must be at least 1".into())),
        Conditioning::Neighbors(m) => new_sites.coords().iter().map(|s| samples.sites.nearest(s, m)).collect(),
    };
    let train = &samples.sites;
    let cross_dist = neighbors
        .iter()
        .enumerate()
        .map(|(k, nb): (usize, &Vec<usize>)| nb.iter().map(|&i| euclidean(&new_sites.get(k), &train.get(i))).collect())
        .collect();
    let local_dist = neighbors
        .iter()
        .map(|nb| nb.iter().flat_map(|&r| nb.iter().map(move |&c| train.distance(r, c))).collect())
        .collect();
    let setup = Setup {
        samples,
        new_sites,
        forecasts: forecasts_at_new,
        conditioning,
        neighbors,
        local_dist,
        cross_dist,
        seed,
    };
    let n_draws = samples.draws.len();
    let p = samples.n_agents() + 1;
    let chunk = 32;
    let run_chunk = |c: usize| -> Result<Vec<(Vec<f64>, Vec<Vec<f64>>)>> {
        let mut cache = vec![None; p];
        (c * chunk..((c + 1) * chunk).min(n_draws))
            .map(|d| setup.draw(d, &mut cache))
            .collect()
    };
    let n_chunks = n_draws.div_ceil(chunk);
    #[cfg(feature = "parallel")]
    let chunks: Vec<_> = (0..n_chunks).into_par_iter().map(run_chunk).collect::<Result<_>>()?;
    #[cfg(not(feature = "parallel"))]
    let chunks: Vec<_> = (0..n_chunks).map(run_chunk).collect::<Result<_>>()?;

    let n_new = new_sites.len();
    let mut values = vec![Vec::with_capacity(n_draws); n_new];
    let mut weights = vec![vec![0.0; n_new]; p];
    for (vals, means) in chunks.into_iter().flatten() {
        for (k, v) in vals.into_iter().enumerate() {
            values[k].push(v);
        }
        for j in 0..p {
            for k in 0..n_new {
                weights[j][k] += means[j][k] / n_draws as f64;
            }
        }
    }
    Ok(PredictiveDraws {
        kind: samples.response,
        values,
        weights,
    })
}

/// Sample means and equal-tailed `(alpha/2, 1 - alpha/2)` intervals using
/// type-7 (linear interpolation) quantiles.
pub fn summarize(draws: &PredictiveDraws, alpha: f64) -> Result<PredictiveSummary> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidConfig(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if draws.n_draws() < 2 {
        return Err(Error::InvalidConfig("need at least two draws per site to summarize".into()));
    }
    let mut out = PredictiveSummary {
        mean: Vec::with_capacity(draws.n_sites()),
        lower: Vec::with_capacity(draws.n_sites()),
        upper: Vec::with_capacity(draws.n_sites()),
        alpha,
    };
    for v in &draws.values {
        let mut s = v.clone();
        s.sort_by(f64::total_cmp);
        out.mean.push(mean(v));
        out.lower.push(quantile_sorted(&s, 0.5 * alpha));
        out.upper.push(quantile_sorted(&s, 1.0 - 0.5 * alpha));
    }
    Ok(out)
}

/// `|a| / (|a| + |b|)`, or one half when both are zero.
pub fn weight_ratio(a: f64, b: f64) -> f64 {
    let (a, b) = (a.abs(), b.abs());
    if a + b == 0.0 {
        0.5
    } else {
        a / (a + b)
    }
}

/// Ratio of posterior-mean coefficient magnitudes of fields `j` and `k` at
/// every training site.
pub fn weight_ratio_map(samples: &PosteriorSamples, j: usize, k: usize) -> Result<Vec<f64>> {
    let p = samples.n_agents() + 1;
    if j == k || j >= p || k >= p {
        return Err(Error::InvalidConfig(format!("need two distinct fields below {p}, got ({j}, {k})")));
    }
    let beta = samples.mean_beta();
    Ok(beta[j].iter().zip(&beta[k]).map(|(&a, &b)| weight_ratio(a, b)).collect())
}
