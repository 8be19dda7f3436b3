//! Run configuration from a `key = value` file plus command-line overrides.

use std::path::Path;

use bsps_core::experiments::Experiment;
use bsps_core::gibbs::{Backend, PriorConfig};
use bsps_core::spatial::SiteSet;
use serde_json::json;

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Mcmc,
    Vb,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Mcmc => "mcmc",
            Method::Vb => "vb",
        }
    }
}

/// Every tunable of every command. Unset options fall back to
/// data-dependent or response-dependent defaults when the command runs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub method: Method,
    pub backend: String,
    pub m: usize,
    pub burn: Option<usize>,
    pub keep: Option<usize>,
    pub thin: usize,
    pub mh_step: Option<f64>,
    pub a_sigma: f64,
    pub b_sigma: f64,
    pub a_tau: f64,
    pub b_tau: f64,
    pub g_lo: Option<f64>,
    pub g_hi: Option<f64>,
    pub beta_bar: Option<Vec<f64>>,
    pub vb_tol: f64,
    pub vb_max_iter: usize,
    pub vb_grid_size: usize,
    pub alpha: f64,
    pub reps: usize,
    pub experiment: String,
    pub p: usize,
    pub include_vb: bool,
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            method: Method::Mcmc,
            backend: "nngp".into(),
            m: 10,
            burn: None,
            keep: None,
            thin: 1,
            mh_step: None,
            a_sigma: 0.1,
            b_sigma: 0.1,
            a_tau: 0.1,
            b_tau: 0.1,
            g_lo: None,
            g_hi: None,
            beta_bar: None,
            vb_tol: 1e-6,
            vb_max_iter: 500,
            vb_grid_size: bsps_core::vb::DEFAULT_GRID_SIZE,
            alpha: 0.05,
            reps: 20,
            experiment: "toy".into(),
            p: 5,
            include_vb: false,
            threads: None,
        }
    }
}

pub const KEYS: &[&str] = &[
    "seed",
    "method",
    "threads",
    "chain.backend",
    "chain.m",
    "chain.burn",
    "chain.keep",
    "chain.thin",
    "chain.mh_step",
    "priors.a_sigma",
    "priors.b_sigma",
    "priors.a_tau",
    "priors.b_tau",
    "priors.g_lo",
    "priors.g_hi",
    "priors.beta_bar",
    "vb.tol",
    "vb.max_iter",
    "vb.grid_size",
    "predict.alpha",
    "bench.reps",
    "bench.experiment",
    "bench.p",
    "bench.include_vb",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> CliResult<T> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("{key}: cannot parse '{value}'")))
}

fn positive(key: &str, value: &str) -> CliResult<f64> {
    let v: f64 = parse_num(key, value)?;
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(CliError::Usage(format!("{key} must be positive, got {value}")))
    }
}

fn at_least_one(key: &str, value: &str) -> CliResult<usize> {
    let v: usize = parse_num(key, value)?;
    if v == 0 {
        return Err(CliError::Usage(format!("{key} must be at least 1")));
    }
    Ok(v)
}

impl RunConfig {
    /// Sets one dotted key, validating the value against its type's constraints.
    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        let value = value.trim();
        match key {
            "seed" => self.seed = parse_num(key, value)?,
            "method" => {
                self.method = match value {
                    "mcmc" => Method::Mcmc,
                    "vb" => Method::Vb,
                    _ => return Err(CliError::Usage(format!("method must be mcmc or vb, got '{value}'"))),
                }
            }
            "threads" => self.threads = Some(at_least_one(key, value)?),
            "chain.backend" => {
                if value != "full" && value != "nngp" {
                    return Err(CliError::Usage(format!("backend must be full or nngp, got '{value}'")));
                }
                self.backend = value.into();
            }
            "chain.m" => self.m = at_least_one(key, value)?,
            "chain.burn" => self.burn = Some(parse_num(key, value)?),
            "chain.keep" => self.keep = Some(at_least_one(key, value)?),
            "chain.thin" => self.thin = at_least_one(key, value)?,
            "chain.mh_step" => self.mh_step = Some(positive(key, value)?),
            "priors.a_sigma" => self.a_sigma = positive(key, value)?,
            "priors.b_sigma" => self.b_sigma = positive(key, value)?,
            "priors.a_tau" => self.a_tau = positive(key, value)?,
            "priors.b_tau" => self.b_tau = positive(key, value)?,
            "priors.g_lo" => self.g_lo = Some(positive(key, value)?),
            "priors.g_hi" => self.g_hi = Some(positive(key, value)?),
            "priors.beta_bar" => {
                let v = value
                    .split(',')
                    .map(|s| {
                        let x: f64 = parse_num(key, s.trim())?;
                        if x.is_finite() {
                            Ok(x)
                        } else {
                            Err(CliError::Usage(format!("{key} entries must be finite")))
                        }
                    })
                    .collect::<CliResult<Vec<f64>>>()?;
                self.beta_bar = Some(v);
            }
            "vb.tol" => self.vb_tol = positive(key, value)?,
            "vb.max_iter" => self.vb_max_iter = at_least_one(key, value)?,
            "vb.grid_size" => self.vb_grid_size = at_least_one(key, value)?,
            "predict.alpha" => {
                let a: f64 = parse_num(key, value)?;
                if !(a > 0.0 && a < 1.0) {
                    return Err(CliError::Usage(format!("alpha must lie strictly between 0 and 1, got {value}")));
                }
                self.alpha = a;
            }
            "bench.reps" => self.reps = at_least_one(key, value)?,
            "bench.experiment" => {
                Experiment::parse(value, 5).map_err(|_| {
                    CliError::Usage(format!(
                        "unknown experiment '{value}' (expected toy, scenario1 or scenario2)"
                    ))
                })?;
                self.experiment = value.into();
            }
            "bench.p" => {
                let p: usize = parse_num(key, value)?;
                if p < 5 {
                    return Err(CliError::Usage(format!("p must be at least 5, got {p}")));
                }
                self.p = p;
            }
            "bench.include_vb" => self.include_vb = parse_num(key, value)?,
            _ => return Err(CliError::Usage(format!("unknown configuration key '{key}'"))),
        }
        Ok(())
    }

    /// Applies a `key = value` file; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> CliResult<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("{origin}:{}: expected 'key = value'", n + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| e.context(&format!("{origin}:{}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> CliResult<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn backend(&self) -> Backend {
        if self.backend == "full" {
            Backend::FullGp
        } else {
            Backend::Nngp { m: self.m }
        }
    }

    pub fn experiment(&self) -> CliResult<Experiment> {
        Experiment::parse(&self.experiment, self.p).map_err(CliError::from)
    }

    /// Priors for a data set, filling range bounds and prior means from the data.
    pub fn priors(&self, sites: &SiteSet, n_agents: usize) -> CliResult<PriorConfig> {
        let base = PriorConfig::default_for(sites, n_agents);
        let priors = PriorConfig {
            a_sigma: self.a_sigma,
            b_sigma: self.b_sigma,
            a_tau: self.a_tau,
            b_tau: self.b_tau,
            g_lo: self.g_lo.unwrap_or(base.g_lo),
            g_hi: self.g_hi.unwrap_or(base.g_hi),
            beta_bar: self.beta_bar.clone().unwrap_or(base.beta_bar),
        };
        priors.validate(n_agents).map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(priors)
    }

    /// Settings that determine a fit, for embedding in artifacts. The thread
    /// count is left out because it never changes results.
    pub fn echo(&self) -> serde_json::Value {
        json!({
            "seed": self.seed,
            "method": self.method.name(),
            "chain": {
                "backend": self.backend,
                "m": self.m,
                "burn": self.burn,
                "keep": self.keep,
                "thin": self.thin,
                "mh_step": self.mh_step,
            },
            "vb": {
                "tol": self.vb_tol,
                "max_iter": self.vb_max_iter,
                "grid_size": self.vb_grid_size,
            },
        })
    }
}
