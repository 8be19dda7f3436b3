//! Simulation studies: data generators, built-in agents, evaluation metrics
//! and a replication runner.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::agents::{bic, bma_weights, fit_ols, synthesize_bma, AgentForecastSet};
use crate::error::{Error, Result};
use crate::gibbs::{run_chain, Backend, ChainConfig, PriorConfig};
use crate::predict::{predictive_draws, summarize, Conditioning};
use crate::spatial::{sample_gp, ExpKernel, SiteSet};
use crate::stats::{deciles, mean, quantile};
use crate::vb::{run_vb, vb_point_predict, GridCache, RangeGrid, VbOptions};

/// Sites, covariates (`covariates[i]` is the row at site `i`), latent spatial
/// effect and responses of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub sites: SiteSet,
    pub covariates: Vec<Vec<f64>>,
    pub w: Vec<f64>,
    pub y: Vec<f64>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn covariate(&self, k: usize) -> Vec<f64> {
        self.covariates.iter().map(|r| r[k]).collect()
    }
}

/// Two-region toy sample on `[-1, 1]^2`; region one is `s1 <= 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub train: Split,
    pub test: Split,
}

impl ToyDataset {
    pub fn in_region_one(split: &Split) -> Vec<bool> {
        split.sites.coords().iter().map(|s| s[0] <= 0.0).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyConfig {
    pub n_train: usize,
    pub n_test: usize,
    /// Correlation parameter linking the two covariates.
    pub r: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            n_train: 300,
            n_test: 200,
            r: 0.2,
        }
    }
}

/// Noise-free toy regression function.
pub fn toy_mean(s: [f64; 2], x1: f64, x2: f64) -> f64 {
    if s[0] <= 0.0 {
        x1 - 0.5 * x2 * x2
    } else {
        x1 * x1 + x2 * x2
    }
}

fn uniform_sites<R: Rng>(n: usize, lo: f64, hi: f64, rng: &mut R) -> Result<SiteSet> {
    let coords = (0..n)
        .map(|_| [lo + (hi - lo) * rng.gen::<f64>(), lo + (hi - lo) * rng.gen::<f64>()])
        .collect();
    SiteSet::with_dedup_jitter(coords, rng)
}

/// Correlated covariate pair: `x1 = z1`, `x2 = r z1 + sqrt(1 - r^2) z2` with
/// `z1, z2` independent unit-variance exponential-kernel fields of range 0.5.
fn covariate_pair<R: Rng>(sites: &SiteSet, r: f64, rng: &mut R) -> Result<(Vec<f64>, Vec<f64>)> {
    let kernel = ExpKernel::new(0.5)?;
    let z1 = sample_gp(sites, 1.0, &kernel, rng)?;
    let z2 = sample_gp(sites, 1.0, &kernel, rng)?;
    let x2 = z1.iter().zip(&z2).map(|(a, b)| r * a + (1.0 - r * r).sqrt() * b).collect();
    Ok((z1, x2))
}

fn split_rows(
    sites: &SiteSet,
    covariates: Vec<Vec<f64>>,
    w: Vec<f64>,
    y: Vec<f64>,
    n_train: usize,
) -> (Split, Split) {
    let n = y.len();
    let train: Vec<usize> = (0..n_train).collect();
    let test: Vec<usize> = (n_train..n).collect();
    let take = |idx: &[usize]| Split {
        sites: sites.subset(idx),
        covariates: idx.iter().map(|&i| covariates[i].clone()).collect(),
        w: idx.iter().map(|&i| w[i]).collect(),
        y: idx.iter().map(|&i| y[i]).collect(),
    };
    (take(&train), take(&test))
}

pub fn simulate_toy(seed: u64) -> Result<ToyDataset> {
    simulate_toy_with(&ToyConfig::default(), seed)
}

/// Draws all surfaces jointly over train and test sites, then splits.
pub fn simulate_toy_with(config: &ToyConfig, seed: u64) -> Result<ToyDataset> {
    if !(-1.0..=1.0).contains(&config.r) {
        return Err(Error::InvalidConfig(format!("r must lie in [-1, 1], got {}", config.r)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = config.n_train + config.n_test;
    let sites = uniform_sites(n, -1.0, 1.0, &mut rng)?;
    let (x1, x2) = covariate_pair(&sites, config.r, &mut rng)?;
    let w = sample_gp(&sites, 0.3, &ExpKernel::new(0.3)?, &mut rng)?;
    let y = (0..n)
        .map(|i| w[i] + toy_mean(sites.get(i), x1[i], x2[i]) + rng.sample::<f64, _>(StandardNormal))
        .collect();
    let covariates = (0..n).map(|i| vec![x1[i], x2[i]]).collect();
    let (train, test) = split_rows(&sites, covariates, w, y, config.n_train);
    Ok(ToyDataset { train, test })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    One,
    Two,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioDataset {
    pub scenario: Scenario,
    pub p: usize,
    pub train: Split,
    pub test: Split,
}

/// Noise-free Scenario 1 mean: `x3^2 exp(-0.3 |s|^2) + s2 sin(2 x2)`; `x` holds `x1..xp`.
pub fn scenario_one_mean(s: [f64; 2], x: &[f64]) -> f64 {
    x[2] * x[2] * (-0.3 * (s[0] * s[0] + s[1] * s[1])).exp() + s[1] * (2.0 * x[1]).sin()
}

/// Noise-free Scenario 2 mean: `sin(pi x1 x2) / 2 + (x3 - 0.5)^2 + x4 / 2 + x5 / 4`.
pub fn scenario_two_mean(x: &[f64]) -> f64 {
    0.5 * (std::f64::consts::PI * x[0] * x[1]).sin() + (x[2] - 0.5).powi(2) + 0.5 * x[3] + 0.25 * x[4]
}

pub const SCENARIO_NOISE_SD: f64 = 0.7;

pub fn simulate_scenario(scenario: Scenario, p: usize, seed: u64) -> Result<ScenarioDataset> {
    simulate_scenario_with(scenario, p, 300, 100, seed)
}

pub fn simulate_scenario_with(
    scenario: Scenario,
    p: usize,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<ScenarioDataset> {
    if p < 5 {
        return Err(Error::InvalidConfig(format!("need at least 5 covariates, got {p}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n_train + n_test;
    let sites = uniform_sites(n, 0.0, 1.0, &mut rng)?;
    let (x1, x2) = covariate_pair(&sites, 0.2, &mut rng)?;
    let w = sample_gp(&sites, 0.3, &ExpKernel::new(0.3)?, &mut rng)?;
    let covariates: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row = vec![x1[i], x2[i]];
            row.extend((2..p).map(|_| rng.sample::<f64, _>(StandardNormal)));
            row
        })
        .collect();
    let y = (0..n)
        .map(|i| {
            let eps = SCENARIO_NOISE_SD * rng.sample::<f64, _>(StandardNormal);
            match scenario {
                Scenario::One => w[i] + scenario_one_mean(sites.get(i), &covariates[i]) + eps,
                Scenario::Two => 2.0 * w[i] + scenario_two_mean(&covariates[i]) + eps,
            }
        })
        .collect();
    let (train, test) = split_rows(&sites, covariates, w, y, n_train);
    Ok(ScenarioDataset {
        scenario,
        p,
        train,
        test,
    })
}

/// Agent forecasts at the training and test sites.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentPanel {
    pub names: Vec<String>,
    pub train: AgentForecastSet,
    pub test: AgentForecastSet,
    /// BIC of each agent from its squared errors over all training sites.
    pub bics: Vec<f64>,
}

/// Fits an OLS agent on the rows selected by `fit_on` and forecasts everywhere.
fn ols_agent(
    design: &dyn Fn(&[f64], [f64; 2]) -> Vec<f64>,
    data_train: &Split,
    data_test: &Split,
    fit_on: &[bool],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, usize)> {
    let rows = |split: &Split| -> Vec<Vec<f64>> {
        (0..split.len()).map(|i| design(&split.covariates[i], split.sites.get(i))).collect()
    };
    let train_rows = rows(data_train);
    let picked: Vec<Vec<f64>> = train_rows.iter().zip(fit_on).filter(|(_, &k)| k).map(|(r, _)| r.clone()).collect();
    let y: Vec<f64> = data_train.y.iter().zip(fit_on).filter(|(_, &k)| k).map(|(v, _)| *v).collect();
    let fit = fit_ols(&picked, &y)?;
    let predict = |rows: Vec<Vec<f64>>| -> (Vec<f64>, Vec<f64>) { rows.iter().map(|r| fit.predict(r)).unzip() };
    let (a_tr, b_tr) = predict(train_rows);
    let (a_te, b_te) = predict(rows(data_test));
    Ok((a_tr, b_tr, a_te, b_te, fit.coefficients().len()))
}

fn panel(
    names: Vec<String>,
    agents: Vec<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, usize)>,
    y_train: &[f64],
) -> Result<AgentPanel> {
    let n = y_train.len();
    let bics = agents
        .iter()
        .map(|(a, _, _, _, k)| {
            let rss: f64 = a.iter().zip(y_train).map(|(p, y)| (p - y).powi(2)).sum();
            bic(rss, n, *k)
        })
        .collect();
    let (mut am, mut bm, mut at, mut bt) = (vec![], vec![], vec![], vec![]);
    for (a, b, c, d, _) in agents {
        am.push(a);
        bm.push(b);
        at.push(c);
        bt.push(d);
    }
    Ok(AgentPanel {
        names,
        train: AgentForecastSet::gaussian(am, bm)?,
        test: AgentForecastSet::gaussian(at, bt)?,
        bics,
    })
}

/// Quadratic regressions `[1, x1, x1^2, x2, x2^2]` fitted separately on the
/// training sites of each region.
pub fn toy_agents(data: &ToyDataset) -> Result<AgentPanel> {
    let design = |x: &[f64], _: [f64; 2]| vec![1.0, x[0], x[0] * x[0], x[1], x[1] * x[1]];
    let d1 = ToyDataset::in_region_one(&data.train);
    let d2: Vec<bool> = d1.iter().map(|v| !v).collect();
    let qr1 = ols_agent(&design, &data.train, &data.test, &d1)?;
    let qr2 = ols_agent(&design, &data.train, &data.test, &d2)?;
    panel(vec!["QR1".into(), "QR2".into()], vec![qr1, qr2], &data.train.y)
}

/// Three least-squares agents fitted on all training sites: linear in the
/// covariates, additive quadratic, and linear plus a quadratic spatial trend.
pub fn scenario_agents(data: &ScenarioDataset) -> Result<AgentPanel> {
    let all = vec![true; data.train.len()];
    let linear = |x: &[f64], _: [f64; 2]| {
        let mut r = vec![1.0];
        r.extend_from_slice(x);
        r
    };
    let additive = |x: &[f64], _: [f64; 2]| {
        let mut r = vec![1.0];
        for &v in x {
            r.push(v);
            r.push(v * v);
        }
        r
    };
    let trend = |x: &[f64], s: [f64; 2]| {
        let mut r = vec![1.0];
        r.extend_from_slice(x);
        r.extend([s[0], s[1], s[0] * s[0], s[1] * s[1], s[0] * s[1]]);
        r
    };
    let agents = vec![
        ols_agent(&linear, &data.train, &data.test, &all)?,
        ols_agent(&additive, &data.train, &data.test, &all)?,
        ols_agent(&trend, &data.train, &data.test, &all)?,
    ];
    panel(vec!["LM".into(), "AQ".into(), "LMS".into()], agents, &data.train.y)
}

pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: truth.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::EmptyData);
    }
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64)
}

/// Coverage in percent and average length of the intervals `[lower, upper]`.
pub fn coverage_and_length(lower: &[f64], upper: &[f64], truth: &[f64]) -> Result<(f64, f64)> {
    if lower.len() != truth.len() || upper.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: lower.len().min(upper.len()),
            right: truth.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::EmptyData);
    }
    let n = truth.len() as f64;
    let covered = (0..truth.len()).filter(|&i| lower[i] <= truth[i] && truth[i] <= upper[i]).count();
    let length = lower.iter().zip(upper).map(|(l, u)| u - l).sum::<f64>() / n;
    Ok((100.0 * covered as f64 / n, length))
}

/// Area under the ROC curve via the Mann-Whitney rank statistic with
/// midranks for ties.
pub fn roc_auc(probs: &[f64], labels: &[bool]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: probs.len(),
            right: labels.len(),
        });
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[a].total_cmp(&probs[b]));
    let mut ranks = vec![0.0; probs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut k = i;
        while k + 1 < order.len() && probs[order[k + 1]] == probs[order[i]] {
            k += 1;
        }
        let mid = 0.5 * ((i + 1) + (k + 1)) as f64;
        for &idx in &order[i..=k] {
            ranks[idx] = mid;
        }
        i = k + 1;
    }
    let pos_rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Experiment {
    Toy,
    Scenario { scenario: Scenario, p: usize },
}

impl Experiment {
    /// Parses `toy`, `scenario1` or `scenario2`.
    pub fn parse(name: &str, p: usize) -> Result<Self> {
        match name {
            "toy" => Ok(Experiment::Toy),
            "scenario1" => Ok(Experiment::Scenario {
                scenario: Scenario::One,
                p,
            }),
            "scenario2" => Ok(Experiment::Scenario {
                scenario: Scenario::Two,
                p,
            }),
            other => Err(Error::InvalidConfig(format!(
                "unknown experiment '{other}' (expected toy, scenario1 or scenario2)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Experiment::Toy => "toy",
            Experiment::Scenario {
                scenario: Scenario::One,
                ..
            } => "scenario1",
            Experiment::Scenario {
                scenario: Scenario::Two,
                ..
            } => "scenario2",
        }
    }
}

/// What to run in each replication.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub experiment: Experiment,
    pub chain: ChainConfig,
    /// Condition predictive coefficient draws on neighbors (NNGP chains) or
    /// on all training sites.
    pub neighbor_prediction: bool,
    pub include_vb: bool,
    pub vb: VbOptions,
    pub alpha: f64,
}

impl ExperimentSpec {
    /// NNGP with 10 neighbors, 1000 burn-in and 1000 kept draws.
    pub fn new(experiment: Experiment) -> Self {
        Self {
            experiment,
            chain: ChainConfig {
                n_burn: 1000,
                n_keep: 1000,
                thin: 1,
                backend: Backend::Nngp { m: 10 },
                ..ChainConfig::default()
            },
            neighbor_prediction: true,
            include_vb: false,
            vb: VbOptions {
                tol: 1e-4,
                max_iter: 200,
                track_elbo: false,
            },
            alpha: 0.05,
        }
    }
}

/// Metrics of one method in one replication. Interval metrics are absent for
/// point predictors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: String,
    pub mse: f64,
    pub cp: Option<f64>,
    pub al: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicationResult {
    pub rep: usize,
    pub seed: u64,
    pub methods: Vec<MethodResult>,
    pub bma_weights: Vec<f64>,
    pub agent_names: Vec<String>,
}

impl ReplicationResult {
    pub fn method(&self, name: &str) -> Option<&MethodResult> {
        self.methods.iter().find(|m| m.method == name)
    }

    /// Largest interval length among the individual agents.
    pub fn worst_agent_al(&self) -> Option<f64> {
        self.agent_names
            .iter()
            .filter_map(|a| self.method(a).and_then(|m| m.al))
            .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))))
    }
}

fn z_value(alpha: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(1.0 - 0.5 * alpha)
}

fn normal_interval_metrics(name: &str, means: &[f64], vars: &[f64], truth: &[f64], alpha: f64) -> Result<MethodResult> {
    let z = z_value(alpha);
    let lower: Vec<f64> = means.iter().zip(vars).map(|(m, v)| m - z * v.sqrt()).collect();
    let upper: Vec<f64> = means.iter().zip(vars).map(|(m, v)| m + z * v.sqrt()).collect();
    let (cp, al) = coverage_and_length(&lower, &upper, truth)?;
    Ok(MethodResult {
        method: name.into(),
        mse: mse(means, truth)?,
        cp: Some(cp),
        al: Some(al),
    })
}

/// One replication: simulate, fit the agents, synthesize, score on the test split.
pub fn run_replication(spec: &ExperimentSpec, rep: usize, seed: u64) -> Result<ReplicationResult> {
    let (train, test, agents) = match spec.experiment {
        Experiment::Toy => {
            let d = simulate_toy(seed)?;
            let a = toy_agents(&d)?;
            (d.train, d.test, a)
        }
        Experiment::Scenario { scenario, p } => {
            let d = simulate_scenario(scenario, p, seed)?;
            let a = scenario_agents(&d)?;
            (d.train, d.test, a)
        }
    };
    let truth = &test.y;
    let mut methods = Vec::new();
    let priors = PriorConfig::default_for(&train.sites, agents.names.len());
    let chain = ChainConfig {
        seed,
        ..spec.chain.clone()
    };
    let samples = run_chain(&train.y, &train.sites, &agents.train, &priors, &chain)?;
    let conditioning = if spec.neighbor_prediction {
        Conditioning::for_samples(&samples)
    } else {
        Conditioning::Full
    };
    let draws = predictive_draws(&samples, &test.sites, &agents.test, conditioning, seed ^ 0x5eed)?;
    let summary = summarize(&draws, spec.alpha)?;
    let (cp, al) = coverage_and_length(&summary.lower, &summary.upper, truth)?;
    methods.push(MethodResult {
        method: "BSPS".into(),
        mse: mse(&summary.mean, truth)?,
        cp: Some(cp),
        al: Some(al),
    });

    if spec.include_vb {
        let grid = RangeGrid::for_priors(&priors)?;
        let fit = run_vb(&train.y, &train.sites, &agents.train, &priors, &grid, &spec.vb, None)?;
        let cache = GridCache::new(&train.sites, &grid)?;
        let pred = vb_point_predict(&fit.state, &train.sites, &test.sites, &agents.test, &priors, &cache)?;
        methods.push(MethodResult {
            method: "BSPS-VB".into(),
            mse: mse(&pred, truth)?,
            cp: None,
            al: None,
        });
    }

    let weights = bma_weights(&agents.bics)?;
    let bma = synthesize_bma(&agents.test, &weights)?;
    methods.push(normal_interval_metrics("BMA", &bma.mean, &bma.variance, truth, spec.alpha)?);
    let j = agents.names.len();
    let sa = synthesize_bma(&agents.test, &vec![1.0 / j as f64; j])?;
    methods.push(normal_interval_metrics("SA", &sa.mean, &sa.variance, truth, spec.alpha)?);
    for (k, name) in agents.names.iter().enumerate() {
        methods.push(normal_interval_metrics(
            name,
            agents.test.means(k),
            agents.test.variances(k),
            truth,
            spec.alpha,
        )?);
    }
    Ok(ReplicationResult {
        rep,
        seed,
        methods,
        bma_weights: weights,
        agent_names: agents.names,
    })
}

/// Aggregates over successful replications for one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub n: usize,
    pub mse_mean: f64,
    pub mse_deciles: [f64; 9],
    pub cp_mean: Option<f64>,
    pub cp_deciles: Option<[f64; 9]>,
    pub al_mean: Option<f64>,
    pub al_deciles: Option<[f64; 9]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub experiment: Experiment,
    pub base_seed: u64,
    pub replications: Vec<ReplicationResult>,
    /// `(rep, error message)` for replications that failed.
    pub failures: Vec<(usize, String)>,
}

impl MetricsReport {
    pub fn methods(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for r in &self.replications {
            for m in &r.methods {
                if !names.contains(&m.method) {
                    names.push(m.method.clone());
                }
            }
        }
        names
    }

    fn collect(&self, method: &str, f: impl Fn(&MethodResult) -> Option<f64>) -> Vec<f64> {
        self.replications
            .iter()
            .filter_map(|r| r.method(method).and_then(&f))
            .collect()
    }

    pub fn mse_values(&self, method: &str) -> Vec<f64> {
        self.collect(method, |m| Some(m.mse))
    }

    pub fn cp_values(&self, method: &str) -> Vec<f64> {
        self.collect(method, |m| m.cp)
    }

    pub fn al_values(&self, method: &str) -> Vec<f64> {
        self.collect(method, |m| m.al)
    }

    pub fn median_mse(&self, method: &str) -> f64 {
        let v = self.mse_values(method);
        if v.is_empty() {
            f64::NAN
        } else {
            quantile(&v, 0.5)
        }
    }

    pub fn summary(&self, method: &str) -> Option<MethodSummary> {
        let mse = self.mse_values(method);
        if mse.is_empty() {
            return None;
        }
        let opt = |v: Vec<f64>| (!v.is_empty()).then(|| (mean(&v), deciles(&v)));
        let cp = opt(self.cp_values(method));
        let al = opt(self.al_values(method));
        Some(MethodSummary {
            method: method.into(),
            n: mse.len(),
            mse_mean: mean(&mse),
            mse_deciles: deciles(&mse),
            cp_mean: cp.map(|c| c.0),
            cp_deciles: cp.map(|c| c.1),
            al_mean: al.map(|a| a.0),
            al_deciles: al.map(|a| a.1),
        })
    }

    pub fn summaries(&self) -> Vec<MethodSummary> {
        self.methods().iter().filter_map(|m| self.summary(m)).collect()
    }
}

/// Runs `n_reps` replications with seeds `base_seed + rep`. Results come back
/// in replication order whatever the number of threads; a failed replication
/// is recorded in the report rather than aborting the run.
pub fn run_replications(
    spec: &ExperimentSpec,
    n_reps: usize,
    base_seed: u64,
    threads: Option<usize>,
) -> Result<MetricsReport> {
    if n_reps == 0 {
        return Err(Error::InvalidConfig("need at least one replication".into()));
    }
    let one = |rep: usize| run_replication(spec, rep, base_seed.wrapping_add(rep as u64));
    let outcomes: Vec<Result<ReplicationResult>> = run_indexed(n_reps, threads, one)?;
    let mut replications = Vec::new();
    let mut failures = Vec::new();
    for (rep, out) in outcomes.into_iter().enumerate() {
        match out {
            Ok(r) => replications.push(r),
            Err(e) => failures.push((rep, e.to_string())),
        }
    }
    Ok(MetricsReport {
        experiment: spec.experiment,
        base_seed,
        replications,
        failures,
    })
}

#[cfg(feature = "parallel")]
fn run_indexed<T: Send>(n: usize, threads: Option<usize>, f: impl Fn(usize) -> T + Sync) -> Result<Vec<T>> {
    match threads {
        Some(1) => Ok((0..n).map(f).collect()),
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
            Ok(pool.install(|| (0..n).into_par_iter().map(&f).collect()))
        }
        None => Ok((0..n).into_par_iter().map(&f).collect()),
    }
}

#[cfg(not(feature = "parallel"))]
fn run_indexed<T>(n: usize, _threads: Option<usize>, f: impl Fn(usize) -> T) -> Result<Vec<T>> {
    Ok((0..n).map(f).collect())
}
