//! Command-line front end for Bayesian spatial predictive synthesis.

pub mod commands;
pub mod config;
pub mod data;
pub mod error;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

#[derive(Parser, Debug)]
#[command(name = "bsps", version, about = "Bayesian spatial predictive synthesis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Default)]
pub struct Common {
    /// `key = value` configuration file; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true, env = "BSPS_THREADS")]
    pub threads: Option<String>,
}

#[derive(Args, Debug, Default)]
pub struct ChainArgs {
    /// Prior representation: full or nngp.
    #[arg(long)]
    pub backend: Option<String>,
    /// Neighbors per site for the nngp backend.
    #[arg(long)]
    pub m: Option<String>,
    #[arg(long)]
    pub burn: Option<String>,
    #[arg(long)]
    pub keep: Option<String>,
    #[arg(long)]
    pub thin: Option<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit the synthesis model to a training CSV.
    Fit {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// mcmc or vb.
        #[arg(long)]
        method: Option<String>,
        #[command(flatten)]
        chain: ChainArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Predict at new sites from a fitted artifact.
    Predict {
        /// Artifact written by `fit`.
        #[arg(long)]
        model: PathBuf,
        /// New-site CSV with agent forecasts.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Interval level is 1 - alpha.
        #[arg(long, allow_negative_numbers = true)]
        alpha: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Write a simulated study data set.
    Simulate {
        /// toy, scenario1 or scenario2.
        #[arg(long)]
        experiment: Option<String>,
        /// Covariate count for the scenarios.
        #[arg(long)]
        p: Option<String>,
        /// Output directory.
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run seeded replications of a study and tabulate metrics.
    Bench {
        #[arg(long)]
        experiment: Option<String>,
        #[arg(long)]
        p: Option<String>,
        #[arg(long)]
        reps: Option<String>,
        #[arg(long, allow_negative_numbers = true)]
        alpha: Option<String>,
        /// Also run the variational fit.
        #[arg(long)]
        vb: bool,
        #[command(flatten)]
        chain: ChainArgs,
        /// Decile table CSV.
        #[arg(long)]
        output: PathBuf,
        /// Optional per-replication CSV.
        #[arg(long)]
        reps_output: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

fn apply(cfg: &mut RunConfig, pairs: &[(&str, &Option<String>)]) -> CliResult<()> {
    for (key, value) in pairs {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    Ok(())
}

fn base_config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    apply(&mut cfg, &[("threads", &common.threads)])?;
    Ok(cfg)
}

fn apply_chain(cfg: &mut RunConfig, chain: &ChainArgs) -> CliResult<()> {
    apply(
        cfg,
        &[
            ("chain.backend", &chain.backend),
            ("chain.m", &chain.m),
            ("chain.burn", &chain.burn),
            ("chain.keep", &chain.keep),
            ("chain.thin", &chain.thin),
        ],
    )
}

fn configure_threads(cfg: &RunConfig) {
    if let Some(t) = cfg.threads {
        // a global pool can be installed once per process; later calls keep the first
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> CliResult<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    write!(out, "{}", e.render())?;
                    Ok(())
                }
                _ => Err(CliError::Usage(e.render().to_string().trim_end().to_string())),
            };
        }
    };
    match &cli.command {
        Command::Fit {
            input,
            output,
            method,
            chain,
            common,
        } => {
            let mut cfg = base_config(common)?;
            apply(&mut cfg, &[("method", method)])?;
            apply_chain(&mut cfg, chain)?;
            configure_threads(&cfg);
            commands::cmd_fit(&cfg, input, output, out)
        }
        Command::Predict {
            model,
            input,
            output,
            alpha,
            common,
        } => {
            let mut cfg = base_config(common)?;
            apply(&mut cfg, &[("predict.alpha", alpha)])?;
            configure_threads(&cfg);
            commands::cmd_predict(&cfg, model, input, output, out)
        }
        Command::Simulate {
            experiment,
            p,
            output,
            common,
        } => {
            let mut cfg = base_config(common)?;
            apply(&mut cfg, &[("bench.experiment", experiment), ("bench.p", p)])?;
            commands::cmd_simulate(&cfg, output, out)
        }
        Command::Bench {
            experiment,
            p,
            reps,
            alpha,
            vb,
            chain,
            output,
            reps_output,
            common,
        } => {
            let mut cfg = base_config(common)?;
            apply(
                &mut cfg,
                &[
                    ("bench.experiment", experiment),
                    ("bench.p", p),
                    ("bench.reps", reps),
                    ("predict.alpha", alpha),
                ],
            )?;
            if *vb {
                cfg.include_vb = true;
            }
            apply_chain(&mut cfg, chain)?;
            commands::cmd_bench(&cfg, output, reps_output.as_deref(), out)
        }
    }
}
