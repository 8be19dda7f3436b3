//! The `fit`, `predict`, `simulate` and `bench` commands.

use std::io::Write;
use std::path::Path;

use bsps_core::agents::{AgentForecastSet, ForecastKind};
use bsps_core::artifact::{Artifact, ArtifactKind};
use bsps_core::experiments::{
    run_replications, scenario_agents, simulate_scenario, simulate_toy, toy_agents, AgentPanel, Experiment,
    ExperimentSpec, MetricsReport, Split,
};
use bsps_core::gibbs::{posterior_mean_sigma2, run_chain, ChainConfig};
use bsps_core::logistic::{binary_chain_defaults, run_chain_binary};
use bsps_core::predict::{predictive_draws, summarize, Conditioning};
use bsps_core::vb::{run_vb, vb_field_means, vb_point_predict, GridCache, RangeGrid, VbOptions};

use crate::config::{Method, RunConfig};
use crate::data::{read_sites, site_header, site_row, write_csv, write_text_csv};
use crate::error::{CliError, CliResult};

fn chain_config(cfg: &RunConfig, kind: ForecastKind) -> ChainConfig {
    let base = match kind {
        ForecastKind::Gaussian => ChainConfig::default(),
        ForecastKind::Bernoulli => binary_chain_defaults(),
    };
    ChainConfig {
        n_burn: cfg.burn.unwrap_or(base.n_burn),
        n_keep: cfg.keep.unwrap_or(base.n_keep),
        thin: cfg.thin,
        backend: cfg.backend(),
        mh_step: cfg.mh_step,
        seed: cfg.seed,
        fixed_factors: false,
    }
}

fn vb_options(cfg: &RunConfig) -> VbOptions {
    VbOptions {
        tol: cfg.vb_tol,
        max_iter: cfg.vb_max_iter,
        track_elbo: true,
    }
}

/// Fits the synthesis model to a training CSV and writes the fitted artifact.
pub fn cmd_fit(cfg: &RunConfig, input: &Path, output: &Path, out: &mut dyn Write) -> CliResult<()> {
    let data = read_sites(input, true, None)?;
    let n_agents = data.forecasts.n_agents();
    let priors = cfg.priors(&data.sites, n_agents)?;
    let artifact = match cfg.method {
        Method::Mcmc => {
            let chain = chain_config(cfg, data.kind());
            let samples = match data.kind() {
                ForecastKind::Gaussian => run_chain(data.y(), &data.sites, &data.forecasts, &priors, &chain)?,
                ForecastKind::Bernoulli => run_chain_binary(data.y(), &data.sites, &data.forecasts, &priors, &chain)?,
            };
            writeln!(
                out,
                "fit: mcmc, {} sites, {} agents, {} draws ({} burn-in, thin {}), backend {}",
                data.sites.len(),
                n_agents,
                samples.draws.len(),
                chain.n_burn,
                chain.thin,
                chain.backend.name()
            )?;
            for (j, (a, s)) in samples.acceptance.iter().zip(&samples.mh_steps).enumerate() {
                writeln!(out, "  range g_{j}: acceptance {a:.3}, step {s:.4}")?;
            }
            if data.kind() == ForecastKind::Gaussian {
                writeln!(out, "  posterior mean sigma2: {:.6}", posterior_mean_sigma2(&samples))?;
            }
            Artifact::from_samples(&samples, &priors, cfg.echo())
        }
        Method::Vb => {
            if data.kind() != ForecastKind::Gaussian {
                return Err(CliError::Usage(
                    "variational fits need Gaussian agent forecasts; use --method mcmc for binary data".into(),
                ));
            }
            let grid = RangeGrid::log_spaced(priors.g_lo, priors.g_hi, cfg.vb_grid_size)?;
            let fit = run_vb(data.y(), &data.sites, &data.forecasts, &priors, &grid, &vb_options(cfg), None)?;
            writeln!(
                out,
                "fit: vb, {} sites, {} agents, {} sweeps, converged {}",
                data.sites.len(),
                n_agents,
                fit.iterations,
                fit.converged
            )?;
            if let Some(last) = fit.elbo.last() {
                writeln!(out, "  final ELBO: {last:.6}")?;
            }
            Artifact::from_vb(&fit.state, &data.sites, &grid, &priors, cfg.echo())
        }
    };
    artifact.save(output).map_err(|e| CliError::from(e).context(&output.display().to_string()))?;
    writeln!(out, "wrote {}", output.display())?;
    Ok(())
}

/// `|w_j| / sum_k |w_k|` over the agent coefficients (excluding the intercept).
pub fn agent_ratios(weights: &[f64]) -> Vec<f64> {
    let agents = &weights[1..];
    let total: f64 = agents.iter().map(|w| w.abs()).sum();
    agents
        .iter()
        .map(|w| if total > 0.0 { w.abs() / total } else { 1.0 / agents.len() as f64 })
        .collect()
}

/// Predicts at the sites of a new-site CSV from a fitted artifact.
pub fn cmd_predict(cfg: &RunConfig, model: &Path, input: &Path, output: &Path, out: &mut dyn Write) -> CliResult<()> {
    let artifact = Artifact::load(model).map_err(|e| CliError::from(e).context(&model.display().to_string()))?;
    let h = &artifact.header;
    if h.kernel != "exponential" {
        return Err(CliError::Data(format!("unsupported kernel family '{}' in {}", h.kernel, model.display())));
    }
    let data = read_sites(input, false, Some(h.response))?;
    if data.forecasts.n_agents() != h.n_agents {
        return Err(CliError::Data(format!(
            "artifact mismatch: {} was fitted with {} agents but {} has {}",
            model.display(),
            h.n_agents,
            input.display(),
            data.forecasts.n_agents()
        )));
    }
    if h.n_agents > 0 && data.kind() != h.response {
        return Err(CliError::Data(format!(
            "artifact mismatch: {} holds a {} fit but {} has {} forecasts",
            model.display(),
            h.response.name(),
            input.display(),
            data.kind().name()
        )));
    }
    let n_new = data.sites.len();
    let p = h.n_agents + 1;
    let (mean, lower, upper, weights) = match h.kind {
        ArtifactKind::Mcmc => {
            let samples = artifact.to_samples()?;
            let draws = predictive_draws(
                &samples,
                &data.sites,
                &data.forecasts,
                Conditioning::for_samples(&samples),
                cfg.seed,
            )?;
            let s = summarize(&draws, cfg.alpha)?;
            (s.mean, s.lower, s.upper, draws.weights)
        }
        ArtifactKind::Vb => {
            let (state, grid) = artifact.to_vb()?;
            let train = artifact.sites()?;
            let cache = GridCache::new(&train, &grid)?;
            let priors = &artifact.header.priors;
            let weights = vb_field_means(&state, &train, &data.sites, priors, &cache)?;
            let mean = vb_point_predict(&state, &train, &data.sites, &data.forecasts, priors, &cache)?;
            (mean, vec![f64::NAN; n_new], vec![f64::NAN; n_new], weights)
        }
    };
    let mut header = vec!["s1".to_string(), "s2".into(), "mean".into(), "lower".into(), "upper".into()];
    header.extend((0..p).map(|j| format!("w_{j}")));
    header.extend((1..p).map(|j| format!("ratio_{j}")));
    let rows = (0..n_new).map(|k| {
        let s = data.sites.get(k);
        let w: Vec<f64> = (0..p).map(|j| weights[j][k]).collect();
        let mut row = vec![s[0], s[1], mean[k], lower[k], upper[k]];
        row.extend_from_slice(&w);
        if p > 1 {
            row.extend(agent_ratios(&w));
        }
        row
    });
    write_csv(output, &header, rows)?;
    writeln!(out, "predicted {n_new} sites, wrote {}", output.display())?;
    Ok(())
}

fn write_split(dir: &Path, name: &str, split: &Split, forecasts: &AgentForecastSet, with_y: bool) -> CliResult<()> {
    let header = site_header(ForecastKind::Gaussian, forecasts.n_agents(), with_y);
    let y = with_y.then_some(split.y.as_slice());
    let rows = (0..split.len()).map(|i| site_row(&split.sites, y, forecasts, i));
    write_csv(&dir.join(name), &header, rows)
}

fn write_truth(dir: &Path, split: &Split) -> CliResult<()> {
    let p = split.covariates.first().map_or(0, Vec::len);
    let mut header = vec!["s1".to_string(), "s2".into(), "y".into(), "w".into()];
    header.extend((1..=p).map(|k| format!("x_{k}")));
    let rows = (0..split.len()).map(|i| {
        let s = split.sites.get(i);
        let mut row = vec![s[0], s[1], split.y[i], split.w[i]];
        row.extend_from_slice(&split.covariates[i]);
        row
    });
    write_csv(&dir.join("truth.csv"), &header, rows)
}

/// Simulates a study data set and writes `train.csv` (fit layout with the
/// built-in agents), `test.csv` (new-site layout) and `truth.csv` (test
/// responses, latent effect and covariates) into `dir`.
pub fn cmd_simulate(cfg: &RunConfig, dir: &Path, out: &mut dyn Write) -> CliResult<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))?;
    let (train, test, panel): (Split, Split, AgentPanel) = match cfg.experiment()? {
        Experiment::Toy => {
            let d = simulate_toy(cfg.seed)?;
            let a = toy_agents(&d)?;
            (d.train, d.test, a)
        }
        Experiment::Scenario { scenario, p } => {
            let d = simulate_scenario(scenario, p, cfg.seed)?;
            let a = scenario_agents(&d)?;
            (d.train, d.test, a)
        }
    };
    write_split(dir, "train.csv", &train, &panel.train, true)?;
    write_split(dir, "test.csv", &test, &panel.test, false)?;
    write_truth(dir, &test)?;
    writeln!(
        out,
        "simulated {} (seed {}): {} training and {} test sites, agents {}; wrote {}",
        cfg.experiment,
        cfg.seed,
        train.len(),
        test.len(),
        panel.names.join(", "),
        dir.display()
    )?;
    Ok(())
}

fn experiment_spec(cfg: &RunConfig) -> CliResult<ExperimentSpec> {
    let mut spec = ExperimentSpec::new(cfg.experiment()?);
    if let Some(b) = cfg.burn {
        spec.chain.n_burn = b;
    }
    if let Some(k) = cfg.keep {
        spec.chain.n_keep = k;
    }
    spec.chain.thin = cfg.thin;
    spec.chain.backend = cfg.backend();
    spec.chain.mh_step = cfg.mh_step;
    spec.include_vb = cfg.include_vb;
    spec.vb.tol = cfg.vb_tol;
    spec.vb.max_iter = cfg.vb_max_iter;
    spec.alpha = cfg.alpha;
    Ok(spec)
}

/// Rows `method, metric, n, mean, q10..q90` for every method and metric.
pub fn summary_rows(report: &MetricsReport) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for s in report.summaries() {
        let mut push = |metric: &str, mean: f64, dec: &[f64; 9]| {
            let mut row = vec![s.method.clone(), metric.to_string(), s.n.to_string(), format!("{mean}")];
            row.extend(dec.iter().map(|v| format!("{v}")));
            rows.push(row);
        };
        push("mse", s.mse_mean, &s.mse_deciles);
        if let (Some(m), Some(d)) = (s.cp_mean, s.cp_deciles) {
            push("cp", m, &d);
        }
        if let (Some(m), Some(d)) = (s.al_mean, s.al_deciles) {
            push("al", m, &d);
        }
    }
    rows
}

pub const SUMMARY_HEADER: [&str; 13] = [
    "method", "metric", "n", "mean", "q10", "q20", "q30", "q40", "q50", "q60", "q70", "q80", "q90",
];

/// Runs seeded replications and writes the per-method decile table, plus the
/// per-replication values when `reps_output` is given.
pub fn cmd_bench(
    cfg: &RunConfig,
    output: &Path,
    reps_output: Option<&Path>,
    out: &mut dyn Write,
) -> CliResult<()> {
    let spec = experiment_spec(cfg)?;
    let report = run_replications(&spec, cfg.reps, cfg.seed, cfg.threads)?;
    write_text_csv(output, &SUMMARY_HEADER, &summary_rows(&report))?;
    if let Some(path) = reps_output {
        let mut rows = Vec::new();
        for r in &report.replications {
            for m in &r.methods {
                let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
                rows.push(vec![
                    r.rep.to_string(),
                    r.seed.to_string(),
                    m.method.clone(),
                    format!("{}", m.mse),
                    opt(m.cp),
                    opt(m.al),
                ]);
            }
        }
        write_text_csv(path, &["rep", "seed", "method", "mse", "cp", "al"], &rows)?;
    }
    writeln!(
        out,
        "bench {}: {} replications ({} failed)",
        cfg.experiment,
        cfg.reps,
        report.failures.len()
    )?;
    writeln!(out, "{:<8} {:>12} {:>8} {:>8}", "method", "median MSE", "CP", "AL")?;
    for s in report.summaries() {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
        writeln!(
            out,
            "{:<8} {:>12.4} {:>8} {:>8}",
            s.method,
            s.mse_deciles[4],
            opt(s.cp_mean),
            opt(s.al_mean)
        )?;
    }
    for (rep, msg) in &report.failures {
        writeln!(out, "replication {rep} failed: {msg}")?;
    }
    writeln!(out, "wrote {}", output.display())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratios() {
        let r = agent_ratios(&[5.0, 0.3, -0.1]);
        assert!((r[0] - 0.75).abs() < 1e-15 && (r[1] - 0.25).abs() < 1e-15);
        assert_eq!(agent_ratios(&[1.0, 0.0, 0.0]), vec![0.5, 0.5]);
        assert_eq!(agent_ratios(&[1.0, -2.0]), vec![1.0]);
    }
}
