//! Gaussian-process priors over the coefficient fields, in dense and
//! nearest-neighbor form, and the Gaussian full conditionals of the fields.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spatial::{
    build_neighbor_index, chol_factor, corr_matrix, nngp_coefficients, CholFactor, ExpKernel, NeighborIndex,
    NngpCoeffs, SiteSet, DEFAULT_JITTER,
};

/// How the coefficient-field GP priors are represented.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Backend {
    /// Dense `n x n` correlation matrices.
    FullGp,
    /// m-nearest-neighbor GP with sparse precision.
    Nngp { m: usize },
}

impl Backend {
    pub fn name(&self) -> &'static str {
        match self {
            Backend::FullGp => "full",
            Backend::Nngp { .. } => "nngp",
        }
    }
}

/// Site geometry plus whatever the backend needs independent of the range.
#[derive(Clone, Debug)]
pub struct SpatialPrior {
    sites: SiteSet,
    backend: Backend,
    index: Option<NeighborIndex>,
}

impl SpatialPrior {
    pub fn new(sites: &SiteSet, backend: Backend) -> Result<Self> {
        let index = match backend {
            Backend::FullGp => None,
            Backend::Nngp { m } => Some(build_neighbor_index(sites, m)?),
        };
        Ok(Self {
            sites: sites.clone(),
            backend,
            index,
        })
    }

    pub fn sites(&self) -> &SiteSet {
        &self.sites
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    pub fn neighbor_index(&self) -> Option<&NeighborIndex> {
        self.index.as_ref()
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    /// Prior artifacts for one field at range `g`. Dense priors carry the
    /// explicit inverse only after [`FieldPrior::ensure_inverse`].
    pub fn field_prior(&self, g: f64) -> Result<FieldPrior> {
        let kernel = ExpKernel::new(g)?;
        match &self.index {
            None => {
                let factor = chol_factor(&corr_matrix(&self.sites, &kernel), DEFAULT_JITTER)?;
                Ok(FieldPrior::Full { factor, inverse: None })
            }
            Some(index) => Ok(FieldPrior::Nngp(nngp_coefficients(index, &self.sites, &kernel)?)),
        }
    }

    /// Prior artifacts with everything the coefficient updates need.
    pub fn field_prior_ready(&self, g: f64) -> Result<FieldPrior> {
        let mut fp = self.field_prior(g)?;
        fp.ensure_inverse();
        Ok(fp)
    }
}

/// GP prior of a single coefficient field at a fixed range.
#[derive(Clone, Debug)]
pub enum FieldPrior {
    Full {
        factor: CholFactor,
        inverse: Option<DMatrix<f64>>,
    },
    Nngp(NngpCoeffs),
}

impl FieldPrior {
    pub fn ensure_inverse(&mut self) {
        if let FieldPrior::Full { factor, inverse } = self {
            if inverse.is_none() {
                *inverse = Some(factor.inverse());
            }
        }
    }

    /// `log |G|` of the (implied) correlation matrix.
    pub fn log_det(&self) -> f64 {
        match self {
            FieldPrior::Full { factor, .. } => factor.log_det(),
            FieldPrior::Nngp(c) => c.log_det(),
        }
    }

    /// `x^T G^{-1} x` for a centered field `x`.
    pub fn quad_form(&self, spatial: &SpatialPrior, x: &[f64]) -> f64 {
        match self {
            FieldPrior::Full { factor, .. } => factor.quad_form(&DVector::from_column_slice(x)),
            FieldPrior::Nngp(c) => c.quad_form(spatial.neighbor_index().expect("nngp prior has an index"), x),
        }
    }

    /// Log of the range's full conditional up to a constant:
    /// `-log|G|/2 - (beta - beta_bar)^T G^{-1} (beta - beta_bar) / (2 tau)`.
    pub fn log_range_target(&self, spatial: &SpatialPrior, beta: &[f64], beta_bar: f64, tau: f64) -> f64 {
        let centered: Vec<f64> = beta.iter().map(|b| b - beta_bar).collect();
        -0.5 * self.log_det() - 0.5 * self.quad_form(spatial, &centered) / tau
    }

    fn dense_inverse(&self) -> Result<&DMatrix<f64>> {
        match self {
            FieldPrior::Full {
                inverse: Some(inv), ..
            } => Ok(inv),
            FieldPrior::Full { inverse: None, .. } => Err(Error::InvalidConfig(
                "dense prior used before its inverse was formed".into(),
            )),
            FieldPrior::Nngp(_) => Err(Error::InvalidConfig("dense update requested for an NNGP prior".into())),
        }
    }

    fn nngp(&self) -> Result<&NngpCoeffs> {
        match self {
            FieldPrior::Nngp(c) => Ok(c),
            FieldPrior::Full { .. } => Err(Error::InvalidConfig("site update requested for a dense prior".into())),
        }
    }
}

/// Observation model expressed through its quadratic form in the linear
/// predictor `psi_i`: the log-likelihood contributes
/// `-weight_i psi_i^2 / 2 + linear_i psi_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct WorkingLikelihood {
    pub weight: Vec<f64>,
    pub linear: Vec<f64>,
}

impl WorkingLikelihood {
    /// `y_i ~ N(psi_i, sigma2)`.
    pub fn gaussian(y: &[f64], sigma2: f64) -> Self {
        Self {
            weight: vec![1.0 / sigma2; y.len()],
            linear: y.iter().map(|v| v / sigma2).collect(),
        }
    }

    /// Logistic likelihood after Polya-gamma augmentation with auxiliaries `omega`.
    pub fn polya_gamma(y: &[f64], omega: &[f64]) -> Self {
        Self {
            weight: omega.to_vec(),
            linear: y.iter().map(|v| v - 0.5).collect(),
        }
    }
}

/// Covariate multiplying coefficient `j` at site `i`: 1 for the intercept,
/// otherwise the latent factor of agent `j - 1`.
#[inline]
pub fn covariate(f: &[Vec<f64>], j: usize, i: usize) -> f64 {
    if j == 0 {
        1.0
    } else {
        f[j - 1][i]
    }
}

/// Precision factor and mean of the full conditional of field `j` under a dense prior.
pub struct FieldConditional {
    pub precision: CholFactor,
    pub mean: DVector<f64>,
}

impl FieldConditional {
    pub fn covariance(&self) -> DMatrix<f64> {
        self.precision.inverse()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let n = self.mean.len();
        let z = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let dev = self.precision.solve_upper_transpose(&z);
        (&self.mean + dev).iter().copied().collect()
    }
}

/// Full conditional `N(A B, A)` of coefficient field `j` with
/// `A^{-1} = diag(w_i x_ji^2) + G^{-1} / tau_j` and
/// `B = x_j o (linear - w o sum_{k != j} x_k o beta_k) + (beta_bar_j / tau_j) G^{-1} 1`.
pub fn dense_field_conditional(
    j: usize,
    f: &[Vec<f64>],
    beta: &[Vec<f64>],
    lik: &WorkingLikelihood,
    beta_bar: f64,
    tau: f64,
    prior: &FieldPrior,
) -> Result<FieldConditional> {
    let inv = prior.dense_inverse()?;
    let n = beta[j].len();
    let mut precision = inv / tau;
    let mut b = DVector::zeros(n);
    for i in 0..n {
        let x = covariate(f, j, i);
        let others: f64 = (0..beta.len())
            .filter(|&k| k != j)
            .map(|k| covariate(f, k, i) * beta[k][i])
            .sum();
        precision[(i, i)] += lik.weight[i] * x * x;
        let prior_pull: f64 = inv.row(i).sum() * beta_bar / tau;
        b[i] = x * (lik.linear[i] - lik.weight[i] * others) + prior_pull;
    }
    let factor = chol_factor(&precision, 0.0)?;
    let mean = factor.solve(&b);
    Ok(FieldConditional { precision: factor, mean })
}

/// Joint full conditional of `(beta_0(s_i), ..., beta_J(s_i))` under NNGP priors:
/// returns the Cholesky factor of the precision and the mean.
pub fn nngp_site_conditional(
    i: usize,
    f: &[Vec<f64>],
    beta: &[Vec<f64>],
    lik: &WorkingLikelihood,
    beta_bar: &[f64],
    tau: &[f64],
    priors: &[FieldPrior],
    index: &NeighborIndex,
) -> Result<(CholFactor, DVector<f64>)> {
    let p = beta.len();
    let x = DVector::from_iterator(p, (0..p).map(|j| covariate(f, j, i)));
    let mut precision = &x * x.transpose() * lik.weight[i];
    let mut b = &x * lik.linear[i];
    for j in 0..p {
        let coeffs = priors[j].nngp()?;
        let field = &beta[j];
        let level = beta_bar[j];
        let fi = coeffs.f(i);
        // centered-field contributions from the site's own conditional ...
        let own_mean: f64 = index
            .neighbors(i)
            .iter()
            .zip(coeffs.b(i))
            .map(|(&k, bk)| bk * (field[k] - level))
            .sum();
        let mut gamma = 1.0 / fi;
        let mut m = own_mean / fi;
        // ... and from every site that conditions on it
        for &(t, pos) in index.children(i) {
            let bt = coeffs.b(t);
            let ft = coeffs.f(t);
            let rest: f64 = index
                .neighbors(t)
                .iter()
                .zip(bt)
                .enumerate()
                .filter(|&(k, _)| k != pos)
                .map(|(_, (&s, w))| w * (field[s] - level))
                .sum();
            gamma += bt[pos] * bt[pos] / ft;
            m += bt[pos] * ((field[t] - level) - rest) / ft;
        }
        gamma /= tau[j];
        m /= tau[j];
        precision[(j, j)] += gamma;
        b[j] += m + gamma * level;
    }
    let factor = chol_factor(&precision, 0.0)?;
    let mean = factor.solve(&b);
    Ok((factor, mean))
}

/// Sweeps the sites in NNGP order, drawing each site's coefficient vector jointly.
pub fn update_beta_nngp_sweep<R: Rng + ?Sized>(
    f: &[Vec<f64>],
    beta: &mut [Vec<f64>],
    lik: &WorkingLikelihood,
    beta_bar: &[f64],
    tau: &[f64],
    priors: &[FieldPrior],
    spatial: &SpatialPrior,
    rng: &mut R,
) -> Result<()> {
    let index = spatial
        .neighbor_index()
        .ok_or_else(|| Error::InvalidConfig("NNGP update without a neighbor index".into()))?;
    let p = beta.len();
    for &i in index.ordering() {
        let (factor, mean) = nngp_site_conditional(i, f, beta, lik, beta_bar, tau, priors, index)?;
        let z = DVector::from_iterator(p, (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let draw = mean + factor.solve_upper_transpose(&z);
        for j in 0..p {
            beta[j][i] = draw[j];
        }
    }
    Ok(())
}

/// Draws every field from its dense full conditional, `j = 0..=J` in turn.
pub fn update_beta_dense_sweep<R: Rng + ?Sized>(
    f: &[Vec<f64>],
    beta: &mut [Vec<f64>],
    lik: &WorkingLikelihood,
    beta_bar: &[f64],
    tau: &[f64],
    priors: &[FieldPrior],
    rng: &mut R,
) -> Result<()> {
    for j in 0..beta.len() {
        let cond = dense_field_conditional(j, f, beta, lik, beta_bar[j], tau[j], &priors[j])?;
        beta[j] = cond.sample(rng);
    }
    Ok(())
}
