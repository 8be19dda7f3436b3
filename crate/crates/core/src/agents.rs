//! Agent predictive distributions, least-squares agents and the two baseline
//! combiners (BIC-weighted model averaging and simple averaging).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Normal predictive distribution `N(mean, variance)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianForecast {
    pub mean: f64,
    pub variance: f64,
}

impl GaussianForecast {
    pub fn new(mean: f64, variance: f64) -> Result<Self> {
        if !mean.is_finite() || !variance.is_finite() || variance <= 0.0 {
            return Err(Error::InvalidForecast {
                site: 0,
                agent: 0,
                reason: format!("need finite mean and positive variance, got N({mean}, {variance})"),
            });
        }
        Ok(Self { mean, variance })
    }
}

/// Bernoulli predictive distribution with event probability `prob`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BernoulliForecast {
    pub prob: f64,
}

impl BernoulliForecast {
    pub const CLAMP: f64 = 1e-9;

    pub fn new(prob: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&prob) {
            return Err(Error::InvalidForecast {
                site: 0,
                agent: 0,
                reason: format!("probability {prob} outside [0, 1]"),
            });
        }
        Ok(Self { prob })
    }

    /// Probability clamped away from 0 and 1.
    pub fn clamped(&self) -> f64 {
        self.prob.clamp(Self::CLAMP, 1.0 - Self::CLAMP)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForecastKind {
    Gaussian,
    Bernoulli,
}

impl ForecastKind {
    pub fn name(&self) -> &'static str {
        match self {
            ForecastKind::Gaussian => "gaussian",
            ForecastKind::Bernoulli => "bernoulli",
        }
    }
}

/// Forecasts from `J` agents at `n` sites, all of one kind. Agents are
/// indexed `0..J`; the synthesis model's coefficient `j + 1` belongs to agent `j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentForecastSet {
    kind: ForecastKind,
    n_sites: usize,
    means: Vec<Vec<f64>>,
    variances: Vec<Vec<f64>>,
}

impl AgentForecastSet {
    /// `means[j][i]` and `variances[j][i]` for agent `j` at site `i`.
    pub fn gaussian(means: Vec<Vec<f64>>, variances: Vec<Vec<f64>>) -> Result<Self> {
        let n_sites = check_rectangular(&means)?;
        if variances.len() != means.len() {
            return Err(Error::DimensionMismatch {
                what: "agents with variances",
                expected: means.len(),
                found: variances.len(),
            });
        }
        for (j, (a, b)) in means.iter().zip(&variances).enumerate() {
            if b.len() != n_sites {
                return Err(Error::DimensionMismatch {
                    what: "variance count",
                    expected: n_sites,
                    found: b.len(),
                });
            }
            for (i, (&a, &b)) in a.iter().zip(b).enumerate() {
                if GaussianForecast::new(a, b).is_err() {
                    return Err(Error::InvalidForecast {
                        site: i,
                        agent: j,
                        reason: format!("need finite mean and positive variance, got N({a}, {b})"),
                    });
                }
            }
        }
        Ok(Self {
            kind: ForecastKind::Gaussian,
            n_sites,
            means,
            variances,
        })
    }

    /// `probs[j][i]` for agent `j` at site `i`.
    pub fn bernoulli(probs: Vec<Vec<f64>>) -> Result<Self> {
        let n_sites = check_rectangular(&probs)?;
        for (j, p) in probs.iter().enumerate() {
            if let Some(i) = p.iter().position(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidForecast {
                    site: i,
                    agent: j,
                    reason: format!("probability {} outside [0, 1]", p[i]),
                });
            }
        }
        Ok(Self {
            kind: ForecastKind::Bernoulli,
            n_sites,
            means: probs,
            variances: Vec::new(),
        })
    }

    /// A set with no agents at `n_sites` sites (intercept-only synthesis).
    pub fn empty(kind: ForecastKind, n_sites: usize) -> Self {
        Self {
            kind,
            n_sites,
            means: Vec::new(),
            variances: Vec::new(),
        }
    }

    pub fn kind(&self) -> ForecastKind {
        self.kind
    }

    pub fn n_agents(&self) -> usize {
        self.means.len()
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    /// Predictive means (Gaussian) or event probabilities (Bernoulli) of agent `j`.
    pub fn means(&self, j: usize) -> &[f64] {
        &self.means[j]
    }

    /// Predictive variances of agent `j`; empty for Bernoulli forecasts.
    pub fn variances(&self, j: usize) -> &[f64] {
        self.variances.get(j).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn gaussian_at(&self, j: usize, i: usize) -> Result<GaussianForecast> {
        self.expect_kind(ForecastKind::Gaussian)?;
        Ok(GaussianForecast {
            mean: self.means[j][i],
            variance: self.variances[j][i],
        })
    }

    pub fn bernoulli_at(&self, j: usize, i: usize) -> Result<BernoulliForecast> {
        self.expect_kind(ForecastKind::Bernoulli)?;
        Ok(BernoulliForecast { prob: self.means[j][i] })
    }

    pub fn expect_kind(&self, kind: ForecastKind) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::KindMismatch {
                expected: kind.name(),
                found: self.kind.name(),
            })
        }
    }

    /// Forecasts restricted to the given sites.
    pub fn subset_sites(&self, idx: &[usize]) -> Self {
        let pick = |rows: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            rows.iter().map(|r| idx.iter().map(|&i| r[i]).collect()).collect()
        };
        Self {
            kind: self.kind,
            n_sites: idx.len(),
            means: pick(&self.means),
            variances: pick(&self.variances),
        }
    }
}

fn check_rectangular(rows: &[Vec<f64>]) -> Result<usize> {
    let n = rows.first().map(Vec::len).unwrap_or(0);
    for r in rows {
        if r.len() != n {
            return Err(Error::DimensionMismatch {
                what: "sites per agent",
                expected: n,
                found: r.len(),
            });
        }
    }
    Ok(n)
}

/// Ordinary least-squares fit with the classical predictive distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct OlsFit {
    coefficients: Vec<f64>,
    residual_variance: f64,
    rss: f64,
    n_obs: usize,
    xtx_inv: DMatrix<f64>,
}

impl OlsFit {
    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    /// `RSS / (n - p)`.
    pub fn residual_variance(&self) -> f64 {
        self.residual_variance
    }

    pub fn rss(&self) -> f64 {
        self.rss
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    /// Predictive mean and variance `s^2 (1 + x^T (X^T X)^{-1} x)` at a design row.
    pub fn predict(&self, row: &[f64]) -> (f64, f64) {
        let x = DVector::from_column_slice(row);
        let mean = row.iter().zip(&self.coefficients).map(|(a, b)| a * b).sum();
        let lev = (x.transpose() * &self.xtx_inv * &x)[0];
        (mean, self.residual_variance * (1.0 + lev))
    }

    /// BIC of the fit on its own training data.
    pub fn bic(&self) -> f64 {
        bic(self.rss, self.n_obs, self.coefficients.len())
    }
}

/// Least-squares fit of `responses` on `rows` via a QR decomposition.
pub fn fit_ols(rows: &[Vec<f64>], responses: &[f64]) -> Result<OlsFit> {
    let n = rows.len();
    if n != responses.len() {
        return Err(Error::LengthMismatch {
            left: n,
            right: responses.len(),
        });
    }
    if n == 0 {
        return Err(Error::EmptyData);
    }
    let p = rows[0].len();
    if n < p + 1 {
        return Err(Error::RankDeficient { rows: n, cols: p });
    }
    let x = DMatrix::from_fn(n, p, |i, k| rows[i][k]);
    let y = DVector::from_column_slice(responses);
    let qr = x.clone().qr();
    let r = qr.r();
    let max_diag = (0..p).map(|k| r[(k, k)].abs()).fold(0.0, f64::max);
    if (0..p).any(|k| r[(k, k)].abs() <= 1e-10 * max_diag.max(f64::MIN_POSITIVE)) {
        return Err(Error::RankDeficient { rows: n, cols: p });
    }
    let qty = qr.q().transpose() * &y;
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or(Error::RankDeficient { rows: n, cols: p })?;
    let r_inv = r
        .clone()
        .try_inverse()
        .ok_or(Error::RankDeficient { rows: n, cols: p })?;
    let xtx_inv = &r_inv * r_inv.transpose();
    let resid = &y - &x * &beta;
    let rss = resid.norm_squared();
    Ok(OlsFit {
        coefficients: beta.iter().copied().collect(),
        residual_variance: rss / (n - p) as f64,
        rss,
        n_obs: n,
        xtx_inv,
    })
}

/// Gaussian profile BIC `n ln(RSS / n) + k ln n` with `k = n_coefficients + 1`
/// (the extra parameter is the error variance). Lower is better.
pub fn bic(rss: f64, n: usize, n_coefficients: usize) -> f64 {
    let nf = n as f64;
    nf * (rss / nf).ln() + (n_coefficients + 1) as f64 * nf.ln()
}

/// Model weights `w_j` proportional to `exp(-(BIC_j - min BIC) / 2)`.
pub fn bma_weights(bics: &[f64]) -> Result<Vec<f64>> {
    if bics.is_empty() {
        return Err(Error::EmptyData);
    }
    if bics.iter().any(|b| !b.is_finite()) {
        return Err(Error::InvalidConfig("BIC values must be finite".into()));
    }
    let min = bics.iter().copied().fold(f64::INFINITY, f64::min);
    let raw: Vec<f64> = bics.iter().map(|b| (-(b - min) / 2.0).exp()).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Per-site mixture moments of a weighted combination of forecasts.
#[derive(Clone, Debug, PartialEq)]
pub struct CombinedForecast {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

fn check_weights(forecasts: &AgentForecastSet, weights: &[f64]) -> Result<()> {
    if weights.len() != forecasts.n_agents() {
        return Err(Error::DimensionMismatch {
            what: "weights",
            expected: forecasts.n_agents(),
            found: weights.len(),
        });
    }
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|w| *w < 0.0) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!("weights must be nonnegative and sum to 1, sum is {total}")));
    }
    Ok(())
}

/// `sum_j w_j a_j` per site; valid for either forecast kind.
pub fn combine_means(forecasts: &AgentForecastSet, weights: &[f64]) -> Result<Vec<f64>> {
    check_weights(forecasts, weights)?;
    Ok((0..forecasts.n_sites())
        .map(|i| {
            weights
                .iter()
                .enumerate()
                .map(|(j, w)| w * forecasts.means(j)[i])
                .sum()
        })
        .collect())
}

/// Model-averaged mean and mixture variance `sum_j w_j (b_j + a_j^2) - mean^2`.
pub fn synthesize_bma(forecasts: &AgentForecastSet, weights: &[f64]) -> Result<CombinedForecast> {
    forecasts.expect_kind(ForecastKind::Gaussian)?;
    let mean = combine_means(forecasts, weights)?;
    let variance = mean
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let second: f64 = weights
                .iter()
                .enumerate()
                .map(|(j, w)| {
                    let a = forecasts.means(j)[i];
                    w * (forecasts.variances(j)[i] + a * a)
                })
                .sum();
            (second - m * m).max(0.0)
        })
        .collect();
    Ok(CombinedForecast { mean, variance })
}

/// Equal-weight average of agent means.
pub fn synthesize_sa(forecasts: &AgentForecastSet) -> Result<Vec<f64>> {
    let j = forecasts.n_agents();
    if j == 0 {
        return Err(Error::EmptyData);
    }
    combine_means(forecasts, &vec![1.0 / j as f64; j])
}
