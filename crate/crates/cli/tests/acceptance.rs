//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when a criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use bsps_core::agents::{AgentForecastSet, ForecastKind};
use bsps_core::artifact::Artifact;
use bsps_core::experiments::{run_replications, Experiment, ExperimentSpec, MetricsReport, Scenario};
use bsps_core::gibbs::*;
use bsps_core::logistic::{factor_posterior_prob, sample_pg1, update_beta_logistic, update_omega, BinaryState};
use bsps_core::predict::{predictive_draws, Conditioning};
use bsps_core::spatial::{
    build_neighbor_index, chol_factor, corr_matrix, gaussian_field_log_density, nngp_coefficients, sample_gp,
    ExpKernel, NeighborIndex, SiteSet, DEFAULT_JITTER,
};
use bsps_core::stats::{batch_means_se, ks_two_sample, mean, quantile, variance};
use bsps_core::vb::{elbo, run_vb, vb_sweep, GridCache, RangeGrid, VariationalState, VbOptions};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const TOY_REPS: usize = 20;
const SCENARIO_REPS: usize = 50;
const TOY_SEED: u64 = 1000;
const SCENARIO_SEED: u64 = 5000;

/// Outcome of one sub-check.
struct Check {
    name: String,
    pass: bool,
    detail: String,
}

fn check(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Check {
    Check {
        name: name.into(),
        pass,
        detail: detail.into(),
    }
}

fn random_sites(n: usize, seed: u64) -> SiteSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SiteSet::new((0..n).map(|_| [rng.gen(), rng.gen()]).collect()).unwrap()
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn z_score(x: &[f64], y: &[f64]) -> f64 {
    let se = (batch_means_se(x).powi(2) + batch_means_se(y).powi(2)).sqrt();
    (mean(x) - mean(y)).abs() / se
}

fn median(x: &[f64]) -> f64 {
    quantile(x, 0.5)
}

fn field_prior(spatial: &SpatialPrior, g: f64) -> FieldPrior {
    spatial.field_prior_ready(g).unwrap()
}

// ---------------------------------------------------------------- 1 and 2

fn toy_study() -> (MetricsReport, f64) {
    let start = Instant::now();
    let spec = ExperimentSpec::new(Experiment::Toy);
    let report = run_replications(&spec, TOY_REPS, TOY_SEED, None).unwrap();
    (report, start.elapsed().as_secs_f64())
}

fn criterion_1(report: &MetricsReport, secs: f64) -> Vec<Check> {
    let med = |m: &str| report.median_mse(m);
    let (bsps, bma, qr1, qr2, sa) = (med("BSPS"), med("BMA"), med("QR1"), med("QR2"), med("SA"));
    let n = report.replications.len();
    vec![
        check(
            "replications",
            n >= 20 && report.failures.is_empty(),
            format!("{n} completed, {} failed", report.failures.len()),
        ),
        check(
            "ordering BSPS < BMA <= QR1 < SA",
            bsps < bma && bma <= qr1 && qr1 < sa,
            format!("medians BSPS {bsps:.3}, BMA {bma:.3}, QR1 {qr1:.3}, SA {sa:.3} (QR2 {qr2:.3})"),
        ),
        check("BSPS median in [0.9, 1.9]", (0.9..=1.9).contains(&bsps), format!("{bsps:.3}")),
        check("BMA median in [2.0, 3.3]", (2.0..=3.3).contains(&bma), format!("{bma:.3}")),
        check("runtime under 10 min", secs < 600.0, format!("{secs:.0} s")),
    ]
}

fn criterion_2(report: &MetricsReport) -> Vec<Check> {
    // every replication has the same number of test sites, so pooling is averaging
    let cp = mean(&report.cp_values("BSPS"));
    vec![check(
        "pooled 95% coverage in [92, 99]",
        (92.0..=99.0).contains(&cp),
        format!("{cp:.2}% over {} replications", report.replications.len()),
    )]
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Vec<Check> {
    let mut out = Vec::new();
    for (k, scenario) in [Scenario::One, Scenario::Two].into_iter().enumerate() {
        let label = format!("scenario {}", k + 1);
        let spec = ExperimentSpec::new(Experiment::Scenario { scenario, p: 5 });
        let report = run_replications(&spec, SCENARIO_REPS, SCENARIO_SEED + 1000 * k as u64, None).unwrap();
        let n = report.replications.len();
        out.push(check(
            format!("{label}: replications"),
            n >= 50 && report.failures.is_empty(),
            format!("{n} completed"),
        ));
        let cp = report.cp_values("BSPS");
        let cp_med = median(&cp);
        out.push(check(
            format!("{label}: BSPS CP in [92, 98]"),
            (92.0..=98.0).contains(&cp_med),
            format!("median {cp_med:.2}, mean {:.2}", mean(&cp)),
        ));
        let al = median(&report.al_values("BSPS"));
        let names = report.replications[0].agent_names.clone();
        let (worst_name, worst_al) = names
            .iter()
            .map(|a| (a.clone(), median(&report.al_values(a))))
            .fold((String::new(), f64::NEG_INFINITY), |acc, v| if v.1 > acc.1 { v } else { acc });
        out.push(check(
            format!("{label}: BSPS AL below worst agent"),
            al < worst_al,
            format!("median BSPS {al:.3} vs {worst_name} {worst_al:.3}"),
        ));
    }
    out
}

// ---------------------------------------------------------------- 4

/// One-agent data set drawn from the synthesis model.
fn model_fixture(n: usize, seed: u64) -> (Vec<f64>, SiteSet, AgentForecastSet) {
    let sites = random_sites(n, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
    let a: Vec<f64> = (0..n).map(|_| 2.0 * rng.gen::<f64>() - 1.0).collect();
    let b = vec![0.1f64; n];
    let kern = ExpKernel::new(0.4).unwrap();
    let b0 = sample_gp(&sites, 0.3, &kern, &mut rng).unwrap();
    let b1: Vec<f64> = sample_gp(&sites, 0.3, &kern, &mut rng).unwrap().iter().map(|v| v + 1.0).collect();
    let y = (0..n)
        .map(|i| {
            let f = a[i] + b[i].sqrt() * normal(&mut rng);
            b0[i] + b1[i] * f + 0.3 * normal(&mut rng)
        })
        .collect();
    (y, sites, AgentForecastSet::gaussian(vec![a], vec![b]).unwrap())
}

fn criterion_4() -> Vec<Check> {
    let mut worst_density: f64 = 0.0;
    for n in 1..=12 {
        for rep in 0..5u64 {
            let seed = 100 * n as u64 + rep;
            let sites = random_sites(n, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
            let kernel = ExpKernel::new(0.05 + rng.gen::<f64>()).unwrap();
            let field: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
            let (level, tau) = (rng.gen::<f64>() - 0.5, 0.2 + rng.gen::<f64>());
            let index = build_neighbor_index(&sites, n.saturating_sub(1).max(1)).unwrap();
            let coeffs = nngp_coefficients(&index, &sites, &kernel).unwrap();
            let sparse = coeffs.log_density(&index, &field, level, tau);
            let dense = gaussian_field_log_density(
                &field,
                level,
                tau,
                &chol_factor(&corr_matrix(&sites, &kernel), 0.0).unwrap(),
            );
            worst_density = worst_density.max((sparse - dense).abs());
        }
    }

    let (y, sites, a) = model_fixture(10, 21);
    let priors = PriorConfig::default_for(&sites, 1);
    let config = |backend, seed| ChainConfig {
        n_burn: 2000,
        n_keep: 30_000,
        backend,
        seed,
        ..ChainConfig::default()
    };
    let full = run_chain(&y, &sites, &a, &priors, &config(Backend::FullGp, 1)).unwrap();
    let nngp = run_chain(&y, &sites, &a, &priors, &config(Backend::Nngp { m: 9 }, 2)).unwrap();
    let mut worst_z: f64 = 0.0;
    for j in 0..2 {
        for i in 0..10 {
            worst_z = worst_z.max(z_score(&full.beta_trace(j, i), &nngp.beta_trace(j, i)));
        }
    }
    vec![
        check(
            "log-density, n <= 12, m = n - 1",
            worst_density < 1e-8,
            format!("largest difference {worst_density:.2e}"),
        ),
        check(
            "posterior means, n = 10",
            worst_z < 3.0,
            format!("largest standardized difference {worst_z:.2} over 20 coefficients"),
        ),
    ]
}

// ---------------------------------------------------------------- 5

fn pg_mean(c: f64) -> f64 {
    if c.abs() < 1e-8 {
        0.25
    } else {
        (c / 2.0).tanh() / (2.0 * c)
    }
}

fn criterion_5() -> Vec<Check> {
    let start = Instant::now();
    let mut out = Vec::new();
    for (k, c) in [0.1, 1.0, 2.0, 5.0].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(40 + k as u64);
        let draws = 1_000_000;
        let total: f64 = (0..draws).map(|_| sample_pg1(c, &mut rng).unwrap()).sum();
        let got = total / draws as f64;
        let want = pg_mean(c);
        let rel = (got - want).abs() / want;
        out.push(check(
            format!("mean at c = {c}"),
            rel < 0.01,
            format!("{got:.5} vs {want:.5} ({:.3}%)", 100.0 * rel),
        ));
    }
    let mut worst_ks: f64 = 0.0;
    for (k, c) in [0.5, 3.0].into_iter().enumerate() {
        let mut r1 = ChaCha8Rng::seed_from_u64(60 + k as u64);
        let mut r2 = ChaCha8Rng::seed_from_u64(70 + k as u64);
        let pos: Vec<f64> = (0..100_000).map(|_| sample_pg1(c, &mut r1).unwrap()).collect();
        let neg: Vec<f64> = (0..100_000).map(|_| sample_pg1(-c, &mut r2).unwrap()).collect();
        worst_ks = worst_ks.max(ks_two_sample(&pos, &neg));
    }
    out.push(check(
        "symmetry in c",
        worst_ks < 0.01,
        format!("largest KS statistic {worst_ks:.4}"),
    ));
    let secs = start.elapsed().as_secs_f64();
    out.push(check("runtime under 30 s", secs < 30.0, format!("{secs:.1} s")));
    out
}

// ---------------------------------------------------------------- 6

/// Two-agent data set with smooth agent surfaces and spatially varying weights.
fn two_agent_fixture(n: usize, seed: u64) -> (Vec<f64>, SiteSet, AgentForecastSet) {
    let sites = random_sites(n, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let kern = ExpKernel::new(0.5).unwrap();
    let b0 = sample_gp(&sites, 0.2, &kern, &mut rng).unwrap();
    let b1 = sample_gp(&sites, 0.2, &kern, &mut rng).unwrap();
    let b2 = sample_gp(&sites, 0.2, &kern, &mut rng).unwrap();
    let mut means = vec![Vec::with_capacity(n), Vec::with_capacity(n)];
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let s = sites.get(i);
        let a1 = (3.0 * s[0]).sin() + s[1];
        let a2 = 1.0 - 2.0 * s[0] * s[1];
        let (f1, f2) = (a1 + 0.3 * normal(&mut rng), a2 + 0.3 * normal(&mut rng));
        y.push(b0[i] + (0.6 + b1[i]) * f1 + (0.4 + b2[i]) * f2 + 0.2 * normal(&mut rng));
        means[0].push(a1);
        means[1].push(a2);
    }
    let vars = vec![vec![0.09; n]; 2];
    (y, sites, AgentForecastSet::gaussian(means, vars).unwrap())
}

fn criterion_6() -> Vec<Check> {
    let (y, sites, fc) = two_agent_fixture(30, 11);
    let priors = PriorConfig::default_for(&sites, 2);
    let grid = RangeGrid::for_priors(&priors).unwrap();
    let options = VbOptions {
        tol: 1e-8,
        max_iter: 2000,
        track_elbo: true,
    };
    let fit = run_vb(&y, &sites, &fc, &priors, &grid, &options, None).unwrap();
    let chain = ChainConfig {
        n_burn: 5000,
        n_keep: 20_000,
        backend: Backend::FullGp,
        seed: 3,
        ..ChainConfig::default()
    };
    let samples = run_chain(&y, &sites, &fc, &priors, &chain).unwrap();
    let reference = samples.mean_beta();
    let mut sq = 0.0;
    let mut count = 0;
    for (vb, mc) in fit.state.mu.iter().zip(&reference) {
        for (u, v) in vb.iter().zip(mc) {
            sq += (u - v).powi(2);
            count += 1;
        }
    }
    let rmse = (sq / count as f64).sqrt();
    let worst_drop = fit
        .elbo
        .windows(2)
        .map(|w| w[0] - w[1])
        .fold(f64::NEG_INFINITY, f64::max);
    vec![
        check(
            "field means within 0.15 RMSE of 20k-draw chain",
            rmse < 0.15,
            format!("RMSE {rmse:.4} over {count} coefficients, {} sweeps", fit.iterations),
        ),
        check(
            "ELBO non-decreasing within 1e-8",
            fit.elbo.len() > 1 && worst_drop <= 1e-8,
            format!("largest decrease {worst_drop:.2e} over {} sweeps", fit.elbo.len()),
        ),
    ]
}

// ---------------------------------------------------------------- 7

fn random_state(n: usize, j: usize, seed: u64) -> SynthesisState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SynthesisState {
        f: (0..j).map(|_| (0..n).map(|_| normal(&mut rng)).collect()).collect(),
        coef: CoefficientFields {
            beta: (0..=j).map(|_| (0..n).map(|_| normal(&mut rng)).collect()).collect(),
            tau: (0..=j).map(|k| 0.5 + 0.3 * k as f64).collect(),
            g: (0..=j).map(|k| 0.2 + 0.1 * k as f64).collect(),
        },
        sigma2: 0.7,
    }
}

fn check_factors() -> Check {
    let (m, v) = factor_conditional(1.0, 1.0, 2.0, 0.0, 1.0);
    let hand = (m - 1.0).abs() < 1e-14 && (v - 0.5).abs() < 1e-14;
    let prior = factor_conditional(0.0, 2.0, 5.0, 1.5, 0.3) == (1.5, 0.3);
    let (dm, dv) = factor_conditional(2.0, 1.0, 3.0, 0.7, 1e-12);
    let dogmatic = (dm - 0.7).abs() < 1e-9 && dv < 1e-11;

    // the update itself on the hand case: one site, residual 2 once f is removed
    let forecasts = AgentForecastSet::gaussian(vec![vec![0.0]], vec![vec![1.0]]).unwrap();
    let mut state = SynthesisState {
        f: vec![vec![0.0]],
        coef: CoefficientFields {
            beta: vec![vec![0.0], vec![1.0]],
            tau: vec![1.0; 2],
            g: vec![0.5; 2],
        },
        sigma2: 1.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let draws: Vec<f64> = (0..40_000)
        .map(|_| {
            update_factors(&mut state, &[2.0], &forecasts, &mut rng).unwrap();
            state.f[0][0]
        })
        .collect();
    let (em, ev) = (mean(&draws), variance(&draws));
    let sampled = (em - 1.0).abs() < 4.0 * (0.5f64 / 40_000.0).sqrt() && (ev - 0.5).abs() < 0.02;
    check(
        "update_factors",
        hand && prior && dogmatic && sampled,
        format!("hand A = {v}, mean = {m}; sampled mean {em:.4}, variance {ev:.4}"),
    )
}

/// Dense oracle for the coefficient-field full conditional under any working likelihood.
fn dense_oracle(
    sites: &SiteSet,
    state: &SynthesisState,
    lik: &WorkingLikelihood,
    j: usize,
    beta_bar: f64,
) -> (DVector<f64>, DMatrix<f64>) {
    let n = sites.len();
    let p = state.coef.beta.len();
    let g = corr_matrix(sites, &ExpKernel::new(state.coef.g[j]).unwrap()) + DMatrix::identity(n, n) * DEFAULT_JITTER;
    let g_inv = g.try_inverse().unwrap();
    let x = |k: usize, i: usize| if k == 0 { 1.0 } else { state.f[k - 1][i] };
    let weights = DVector::from_iterator(n, (0..n).map(|i| lik.weight[i] * x(j, i) * x(j, i)));
    let a = (DMatrix::from_diagonal(&weights) + &g_inv / state.coef.tau[j]).try_inverse().unwrap();
    let mut b = DVector::zeros(n);
    for i in 0..n {
        let others: f64 = (0..p).filter(|&k| k != j).map(|k| x(k, i) * state.coef.beta[k][i]).sum();
        b[i] = x(j, i) * (lik.linear[i] - lik.weight[i] * others);
    }
    b += &g_inv * DVector::from_element(n, beta_bar / state.coef.tau[j]);
    (&a * b, a)
}

fn check_beta_full() -> Check {
    let n = 8;
    let sites = random_sites(n, 10);
    let state = random_state(n, 2, 11);
    let y: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
    let spatial = SpatialPrior::new(&sites, Backend::FullGp).unwrap();
    let lik = WorkingLikelihood::gaussian(&y, state.sigma2);
    let bar = [0.1, 0.5, 0.5];
    let mut worst: f64 = 0.0;
    for j in 0..3 {
        let prior = field_prior(&spatial, state.coef.g[j]);
        let cond = dense_field_conditional(j, &state.f, &state.coef.beta, &lik, bar[j], state.coef.tau[j], &prior).unwrap();
        let (mean, cov) = dense_oracle(&sites, &state, &lik, j, bar[j]);
        worst = worst.max((&cond.mean - mean).amax()).max((cond.covariance() - cov).amax());
    }

    // one site, intercept only: conjugate normal
    let one = SiteSet::new(vec![[0.0, 0.0]]).unwrap();
    let sp1 = SpatialPrior::new(&one, Backend::FullGp).unwrap();
    let (yv, sigma2, tau, level) = (2.0, 0.5, 1.5, 0.2);
    let lik1 = WorkingLikelihood::gaussian(&[yv], sigma2);
    let cond = dense_field_conditional(0, &[], &[vec![0.0]], &lik1, level, tau, &field_prior(&sp1, 0.3)).unwrap();
    let prec = 1.0 / sigma2 + 1.0 / tau;
    let conj = (cond.mean[0] - (yv / sigma2 + level / tau) / prec).abs() < 1e-7
        && (cond.covariance()[(0, 0)] - 1.0 / prec).abs() < 1e-7;
    check(
        "update_beta_full",
        worst < 1e-8 && conj,
        format!("largest deviation from dense solve {worst:.2e} at n = 8"),
    )
}

/// Implied NNGP precision `(I - B)^T F^{-1} (I - B)`.
fn nngp_precision(prior: &FieldPrior, index: &NeighborIndex, n: usize) -> DMatrix<f64> {
    let FieldPrior::Nngp(c) = prior else { panic!("expected an NNGP prior") };
    let mut ib = DMatrix::<f64>::identity(n, n);
    for i in 0..n {
        for (&k, b) in index.neighbors(i).iter().zip(c.b(i)) {
            ib[(i, k)] -= b;
        }
    }
    let finv = DMatrix::from_diagonal(&DVector::from_iterator(n, (0..n).map(|i| 1.0 / c.f(i))));
    ib.transpose() * finv * ib
}

fn check_beta_nngp() -> Check {
    let n = 12;
    let sites = random_sites(n, 21);
    let state = random_state(n, 2, 22);
    let y: Vec<f64> = (0..n).map(|i| 0.3 * i as f64 - 1.0).collect();
    let spatial = SpatialPrior::new(&sites, Backend::Nngp { m: 3 }).unwrap();
    let priors: Vec<FieldPrior> = state.coef.g.iter().map(|&g| field_prior(&spatial, g)).collect();
    let index = spatial.neighbor_index().unwrap();
    let lik = WorkingLikelihood::gaussian(&y, state.sigma2);
    let bar = [0.0, 0.5, 0.5];
    let qs: Vec<DMatrix<f64>> = (0..3).map(|j| nngp_precision(&priors[j], index, n) / state.coef.tau[j]).collect();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let (factor, mean) =
            nngp_site_conditional(i, &state.f, &state.coef.beta, &lik, &bar, &state.coef.tau, &priors, index).unwrap();
        let x = DVector::from_iterator(3, (0..3).map(|j| covariate(&state.f, j, i)));
        let mut prec = &x * x.transpose() / state.sigma2;
        let mut lin = &x * (y[i] / state.sigma2);
        for j in 0..3 {
            let q = &qs[j];
            prec[(j, j)] += q[(i, i)];
            let off: f64 = (0..n).filter(|&k| k != i).map(|k| q[(i, k)] * (state.coef.beta[j][k] - bar[j])).sum();
            lin[j] += q[(i, i)] * bar[j] - off;
        }
        let cov = prec.try_inverse().unwrap();
        worst = worst.max((mean - &cov * lin).amax()).max((factor.inverse() - cov).amax());
    }

    // boundary site: precision 1/tau plus its children's terms
    let sp = SpatialPrior::new(&sites, Backend::Nngp { m: 2 }).unwrap();
    let fp = vec![field_prior(&sp, 0.4)];
    let idx = sp.neighbor_index().unwrap();
    let first = idx.ordering()[0];
    let FieldPrior::Nngp(c) = &fp[0] else { unreachable!() };
    let flat = WorkingLikelihood::gaussian(&vec![0.0; n], 1e300);
    let tau = 2.0;
    let (factor, _) = nngp_site_conditional(first, &[], &[vec![0.0; n]], &flat, &[0.0], &[tau], &fp, idx).unwrap();
    let children: f64 = idx.children(first).iter().map(|&(t, k)| c.b(t)[k].powi(2) / c.f(t)).sum();
    let boundary = (1.0 / factor.inverse()[(0, 0)] - (1.0 + children) / tau).abs() < 1e-10;
    check(
        "update_beta_nngp",
        worst < 1e-9 && boundary,
        format!("largest deviation from dense precision solve {worst:.2e} at n = 12, m = 3"),
    )
}

fn check_tau() -> Check {
    let n = 6;
    let sites = random_sites(n, 40);
    let priors = PriorConfig::default_for(&sites, 1);
    let spatial = SpatialPrior::new(&sites, Backend::Nngp { m: 5 }).unwrap();
    let prior = field_prior(&spatial, 0.3);
    let mut coef = CoefficientFields {
        beta: vec![vec![0.0; n], vec![priors.beta_bar[1]; n]],
        tau: vec![1.0; 2],
        g: vec![0.3; 2],
    };
    let zero = tau_conditional(&coef, 1, &priors, &spatial, &prior) == (priors.a_tau + 3.0, priors.b_tau);
    coef.beta[0] = vec![0.3, -1.0, 0.8, 0.1, 2.0, -0.4];
    let (_, scale) = tau_conditional(&coef, 0, &priors, &spatial, &prior);
    let dense = chol_factor(&corr_matrix(&sites, &ExpKernel::new(0.3).unwrap()), 0.0).unwrap();
    let qf = dense.quad_form(&DVector::from_column_slice(&coef.beta[0]));
    let diff = ((scale - priors.b_tau) * 2.0 - qf).abs();

    let one = SiteSet::new(vec![[0.0, 0.0]]).unwrap();
    let p1 = PriorConfig::default_for(&one, 0);
    let sp1 = SpatialPrior::new(&one, Backend::FullGp).unwrap();
    let c1 = CoefficientFields {
        beta: vec![vec![1.5]],
        tau: vec![1.0],
        g: vec![0.5],
    };
    let (shape, scale1) = tau_conditional(&c1, 0, &p1, &sp1, &field_prior(&sp1, 0.5));
    let single = shape == p1.a_tau + 0.5 && (scale1 - (p1.b_tau + 0.5 * 2.25)).abs() < 1e-7;
    check(
        "update_tau",
        zero && diff < 1e-8 && single,
        format!("NNGP vs dense quadratic form differ by {diff:.2e} at n = 6, m = 5"),
    )
}

fn check_range() -> Check {
    let sites = random_sites(8, 3);
    let priors = PriorConfig::default_for(&sites, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let field = sample_gp(&sites, 1.0, &ExpKernel::new(0.5).unwrap(), &mut rng).unwrap();
    let spatial = SpatialPrior::new(&sites, Backend::FullGp).unwrap();
    let mut coef = CoefficientFields {
        beta: vec![field.clone()],
        tau: vec![1.0],
        g: vec![0.5 * (priors.g_lo + priors.g_hi)],
    };
    let mut fps = vec![field_prior(&spatial, coef.g[0])];

    let mut frozen = RangeTuning::new(1, &priors, None);
    frozen.steps = vec![0.0];
    let still = (0..50).all(|_| update_g_mh(&mut coef.clone(), &priors, &spatial, &mut fps.clone(), &frozen, &mut rng) == [true]);

    let mut tuning = RangeTuning::new(1, &priors, None);
    let (burn, thin, n_draws) = (2000, 20, 5000);
    let mut mh = Vec::with_capacity(n_draws);
    for it in 0..burn + thin * n_draws {
        let acc = update_g_mh(&mut coef, &priors, &spatial, &mut fps, &tuning, &mut rng);
        if it < burn {
            tuning.adapt(&acc, it);
        } else if (it - burn + 1) % thin == 0 {
            mh.push(coef.g[0]);
        }
    }
    let cells = 200;
    let h = (priors.g_hi - priors.g_lo) / cells as f64;
    let logp: Vec<f64> = (0..cells)
        .map(|c| {
            let g = priors.g_lo + (c as f64 + 0.5) * h;
            let factor = chol_factor(&corr_matrix(&sites, &ExpKernel::new(g).unwrap()), DEFAULT_JITTER).unwrap();
            gaussian_field_log_density(&field, 0.0, 1.0, &factor)
        })
        .collect();
    let top = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logp.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut cum = vec![0.0; cells + 1];
    for c in 0..cells {
        cum[c + 1] = cum[c] + w[c] / total;
    }
    let cdf = |x: f64| {
        let t = ((x - priors.g_lo) / h).clamp(0.0, cells as f64);
        let c = (t.floor() as usize).min(cells - 1);
        cum[c] + (t - c as f64) * (cum[c + 1] - cum[c])
    };
    let ks = bsps_core::stats::ks_one_sample(&mh, cdf);

    let one = SiteSet::new(vec![[0.2, 0.2]]).unwrap();
    let fc = AgentForecastSet::gaussian(vec![vec![0.3]], vec![vec![0.5]]).unwrap();
    let flat_cfg = ChainConfig {
        n_burn: 20,
        n_keep: 200,
        seed: 4,
        ..ChainConfig::default()
    };
    let flat = run_chain(&[1.3], &one, &fc, &PriorConfig::default_for(&one, 1), &flat_cfg).unwrap();
    let flat_ok = flat.acceptance.iter().all(|&a| a == 1.0);
    check(
        "update_g_mh",
        still && flat_ok && ks < 0.1,
        format!("KS {ks:.4} against 200-cell grid posterior at n = 8; zero step always accepted: {still}"),
    )
}

fn check_sigma2() -> Check {
    let priors = PriorConfig {
        a_sigma: 1.0,
        b_sigma: 1.0,
        a_tau: 1.0,
        b_tau: 1.0,
        g_lo: 0.1,
        g_hi: 1.0,
        beta_bar: vec![0.0],
    };
    let state = SynthesisState {
        f: vec![],
        coef: CoefficientFields {
            beta: vec![vec![0.0, 0.0]],
            tau: vec![1.0],
            g: vec![0.5],
        },
        sigma2: 1.0,
    };
    let hand = sigma2_conditional(&state, &[1.0, -1.0], &priors);
    let perfect = sigma2_conditional(&state, &[0.0, 0.0], &priors);
    // IG(2, 2) has mean 2; check the draws too
    let mut st = state.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let draws: Vec<f64> = (0..200_000)
        .map(|_| {
            update_sigma2(&mut st, &[1.0, -1.0], &priors, &mut rng);
            1.0 / st.sigma2
        })
        .collect();
    // 1/sigma2 ~ Gamma(2, rate 2): mean 1
    let m = mean(&draws);
    check(
        "update_sigma2",
        hand == (2.0, 2.0) && perfect == (2.0, 1.0) && (m - 1.0).abs() < 0.01,
        format!("residuals (1, -1) give IG{hand:?}; mean precision of draws {m:.4}"),
    )
}

fn intercept_state(n: usize, level: f64) -> BinaryState {
    BinaryState {
        f: vec![],
        coef: CoefficientFields {
            beta: vec![vec![level; n]],
            tau: vec![1.0],
            g: vec![0.5],
        },
        omega: vec![0.25; n],
    }
}

fn check_omega() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut sample_mean = |psi: f64, total: usize| {
        let mut st = intercept_state(1000, psi);
        let mut acc = 0.0;
        for _ in 0..total / 1000 {
            update_omega(&mut st, &mut rng).unwrap();
            acc += st.omega.iter().sum::<f64>();
        }
        acc / total as f64
    };
    let zero = sample_mean(0.0, 1_000_000);
    let large = sample_mean(10.0, 100_000);
    let big_want = (5.0f64).tanh() / 20.0;
    let pass = (zero - 0.25).abs() / 0.25 < 0.01 && (large - big_want).abs() / big_want < 0.02;
    check(
        "update_omega",
        pass,
        format!("psi = 0: {zero:.5} vs 0.25; psi = 10: {large:.5} vs {big_want:.5}"),
    )
}

fn check_beta_logistic() -> Check {
    // one site, intercept only: precision omega + 1/tau, mean (y - 1/2) / precision
    let one = SiteSet::new(vec![[0.0, 0.0]]).unwrap();
    let sp1 = SpatialPrior::new(&one, Backend::FullGp).unwrap();
    let (omega, tau) = (0.3, 2.0);
    let lik = WorkingLikelihood::polya_gamma(&[1.0], &[omega]);
    let cond = dense_field_conditional(0, &[], &[vec![0.0]], &lik, 0.0, tau, &field_prior(&sp1, 0.5)).unwrap();
    let prec = omega + 1.0 / tau;
    let scalar = (cond.mean[0] - 0.5 / prec).abs() < 1e-7 && (cond.covariance()[(0, 0)] - 1.0 / prec).abs() < 1e-7;

    let mut st = BinaryState {
        omega: vec![omega],
        ..intercept_state(1, 0.0)
    };
    st.coef.tau = vec![tau];
    let priors = PriorConfig::default_for(&one, 0);
    let fps = vec![field_prior(&sp1, 0.5)];
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let draws: Vec<f64> = (0..100_000)
        .map(|_| {
            update_beta_logistic(&mut st, &[1.0], &priors, &sp1, &fps, &mut rng).unwrap();
            st.coef.beta[0][0]
        })
        .collect();
    let sampled = (mean(&draws) - 0.5 / prec).abs() < 4.0 * (1.0 / prec / 1e5).sqrt();

    let n = 8;
    let sites = random_sites(n, 14);
    let state = random_state(n, 2, 15);
    let mut r = ChaCha8Rng::seed_from_u64(16);
    let y: Vec<f64> = (0..n).map(|_| if r.gen::<bool>() { 1.0 } else { 0.0 }).collect();
    let om: Vec<f64> = (0..n).map(|_| 0.05 + 0.4 * r.gen::<f64>()).collect();
    let lik = WorkingLikelihood::polya_gamma(&y, &om);
    let spatial = SpatialPrior::new(&sites, Backend::FullGp).unwrap();
    let bar = [0.0, 0.5, 0.5];
    let mut worst: f64 = 0.0;
    for j in 0..3 {
        let prior = field_prior(&spatial, state.coef.g[j]);
        let c = dense_field_conditional(j, &state.f, &state.coef.beta, &lik, bar[j], state.coef.tau[j], &prior).unwrap();
        let (m, cov) = dense_oracle(&sites, &state, &lik, j, bar[j]);
        worst = worst.max((&c.mean - m).amax()).max((c.covariance() - cov).amax());
    }
    check(
        "update_beta_logistic",
        scalar && sampled && worst < 1e-8,
        format!("largest deviation from dense solve {worst:.2e} at n = 8; scalar case mean {:.4}", mean(&draws)),
    )
}

fn check_factor_bernoulli() -> Check {
    let e = std::f64::consts::E;
    let l = (1.0 + e) / (2.0 * e);
    let want = 0.5 / (0.5 + 0.5 * l);
    let got = factor_posterior_prob(0.5, 1.0, 0.0, 1.0);
    let zero = factor_posterior_prob(0.0, 1.0, 0.3, 2.0) == 0.0;
    let irrelevant = (factor_posterior_prob(0.37, 0.0, 0.8, 0.8) - 0.37).abs() < 1e-15;
    check(
        "update_factor_bernoulli",
        (got - want).abs() < 1e-12 && (got - 0.594).abs() < 5e-4 && zero && irrelevant,
        format!("hand case posterior probability {got:.6} (L = {l:.4})"),
    )
}

fn check_vb_sweep() -> Check {
    let n = 12;
    let sites = random_sites(n, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let y: Vec<f64> = (0..n).map(|i| sites.get(i)[0] + 0.2 * (rng.gen::<f64>() - 0.5)).collect();
    let fc = AgentForecastSet::empty(ForecastKind::Gaussian, n);
    let priors = PriorConfig {
        beta_bar: vec![0.3],
        ..PriorConfig::default_for(&sites, 0)
    };
    let grid = RangeGrid::new(vec![0.4]).unwrap();
    let opts = VbOptions {
        tol: 1e-13,
        max_iter: 5000,
        track_elbo: false,
    };
    let fit = run_vb(&y, &sites, &fc, &priors, &grid, &opts, None).unwrap();
    let st = &fit.state;
    let (sigma2, tau) = (1.0 / st.expected_inv_sigma2(), 1.0 / st.expected_inv_tau(0));
    let g = corr_matrix(&sites, &ExpKernel::new(0.4).unwrap()) + DMatrix::identity(n, n) * DEFAULT_JITTER;
    let cov = &g * tau + DMatrix::identity(n, n) * sigma2;
    let resid = DVector::from_iterator(n, y.iter().map(|v| v - 0.3));
    let want = (&g * tau) * cov.lu().solve(&resid).unwrap();
    let worst = (0..n).map(|i| (st.mu[0][i] - 0.3 - want[i]).abs()).fold(0.0, f64::max);

    // dogmatic agent
    let (_, sites2, fc2) = two_agent_fixture(10, 3);
    let means = (0..2).map(|j| fc2.means(j).to_vec()).collect();
    let fc2 = AgentForecastSet::gaussian(means, vec![vec![1e-12; 10], vec![0.2; 10]]).unwrap();
    let y2: Vec<f64> = (0..10).map(|i| fc2.means(0)[i] + 0.5 * fc2.means(1)[i]).collect();
    let p2 = PriorConfig::default_for(&sites2, 2);
    let grid2 = RangeGrid::for_priors(&p2).unwrap();
    let cache = GridCache::new(&sites2, &grid2).unwrap();
    let mut vs = VariationalState::init(&y2, &sites2, &fc2, &p2, &grid2).unwrap();
    let mut pinned = true;
    let mut last = f64::NEG_INFINITY;
    let mut monotone = true;
    for _ in 0..20 {
        vb_sweep(&mut vs, &y2, &fc2, &p2, &cache).unwrap();
        pinned &= (0..10).all(|i| (vs.m[0][i] - fc2.means(0)[i]).abs() < 1e-8 && vs.s2[0][i] < 1e-11);
        let e = elbo(&vs, &y2, &fc2, &p2, &cache);
        monotone &= e >= last - 1e-8;
        last = e;
    }
    check(
        "vb_sweep",
        fit.converged && worst < 1e-8 && pinned && monotone,
        format!("intercept-only fixed point within {worst:.2e} of the conjugate posterior mean"),
    )
}

fn criterion_7() -> Vec<Check> {
    vec![
        check_factors(),
        check_beta_full(),
        check_beta_nngp(),
        check_tau(),
        check_range(),
        check_sigma2(),
        check_omega(),
        check_beta_logistic(),
        check_factor_bernoulli(),
        check_vb_sweep(),
    ]
}

// ---------------------------------------------------------------- 8

fn bsps(args: &[&str], threads: &str) -> Vec<u8> {
    let out = Command::new(env!("CARGO_BIN_EXE_bsps"))
        .args(args)
        .env("BSPS_THREADS", threads)
        .output()
        .expect("run bsps");
    assert!(out.status.success(), "bsps {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out.stdout
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn files_equal(a: &Path, b: &Path, names: &[&str]) -> bool {
    names
        .iter()
        .all(|n| std::fs::read(a.join(n)).unwrap() == std::fs::read(b.join(n)).unwrap())
}

fn cli_round(dir: &Path, threads: &str) {
    let sim = dir.join("sim");
    bsps(&["simulate", "--experiment", "toy", "--seed", "11", "--output", p(&sim)], threads);
    let train = sim.join("train.csv");
    let test = sim.join("test.csv");
    let mcmc = dir.join("mcmc.bsps");
    let fit = ["fit", "--input", p(&train), "--output", p(&mcmc), "--seed", "5", "--burn", "100", "--keep", "100"];
    bsps(&fit, threads);
    // short variational runs: reproducibility does not need convergence
    let config = dir.join("short.cfg");
    std::fs::write(&config, "vb.max_iter = 15\nvb.grid_size = 6\n").unwrap();
    let vb = dir.join("vb.bsps");
    bsps(&["fit", "--method", "vb", "--config", p(&config), "--input", p(&train), "--output", p(&vb)], threads);
    for (model, out) in [(&mcmc, "pred_mcmc.csv"), (&vb, "pred_vb.csv")] {
        let out = dir.join(out);
        let args = ["predict", "--model", p(model), "--input", p(&test), "--output", p(&out), "--seed", "2"];
        bsps(&args, threads);
    }
    let (table, per_rep) = (dir.join("bench.csv"), dir.join("reps.csv"));
    let bench = [
        "bench", "--experiment", "scenario2", "--reps", "3", "--burn", "50", "--keep", "50", "--vb", "--seed", "4", "--config", p(&config),
        "--output", p(&table), "--reps-output", p(&per_rep),
    ];
    bsps(&bench, threads);
}

fn criterion_8() -> Vec<Check> {
    let mut out = Vec::new();
    let root = tempfile::tempdir().unwrap();
    let dirs: Vec<_> = ["1", "4", "1"]
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let d = root.path().join(format!("run{k}"));
            std::fs::create_dir(&d).unwrap();
            cli_round(&d, t);
            d
        })
        .collect();
    let names = [
        "sim/train.csv",
        "sim/test.csv",
        "sim/truth.csv",
        "mcmc.bsps",
        "vb.bsps",
        "pred_mcmc.csv",
        "pred_vb.csv",
        "bench.csv",
        "reps.csv",
    ];
    let same_seed = files_equal(&dirs[0], &dirs[2], &names);
    let across_threads = files_equal(&dirs[0], &dirs[1], &names);
    out.push(check(
        "commands byte-identical across runs and thread counts",
        same_seed && across_threads,
        format!("simulate, fit (mcmc, vb), predict, bench with 1 and 4 threads; {} files", names.len()),
    ));

    // library level: chains, artifacts, predictive draws and replications under different pools
    let (y, sites, fc) = model_fixture(40, 7);
    let priors = PriorConfig::default_for(&sites, 1);
    let cfg = ChainConfig {
        n_burn: 100,
        n_keep: 200,
        seed: 17,
        ..ChainConfig::default()
    };
    let pool = |t: usize| rayon::ThreadPoolBuilder::new().num_threads(t).build().unwrap();
    let run = |t: usize| {
        pool(t).install(|| {
            let samples = run_chain(&y, &sites, &fc, &priors, &cfg).unwrap();
            let mut bytes = Vec::new();
            Artifact::from_samples(&samples, &priors, serde_json::json!({"seed": 17}))
                .write_to(&mut bytes)
                .unwrap();
            let new_sites = random_sites(25, 8);
            let nf = AgentForecastSet::gaussian(vec![vec![0.4; 25]], vec![vec![0.1; 25]]).unwrap();
            let draws = predictive_draws(&samples, &new_sites, &nf, Conditioning::for_samples(&samples), 3).unwrap();
            (bytes, draws.values, draws.weights)
        })
    };
    let (a, b, c) = (run(1), run(3), run(1));
    out.push(check(
        "chain, artifact and predictive draws independent of threads",
        a == b && a == c,
        "1 vs 3 worker threads",
    ));
    let spec = ExperimentSpec {
        chain: ChainConfig {
            n_burn: 50,
            n_keep: 50,
            ..ExperimentSpec::new(Experiment::Toy).chain
        },
        ..ExperimentSpec::new(Experiment::Toy)
    };
    let r1 = run_replications(&spec, 3, 9, Some(1)).unwrap();
    let r8 = run_replications(&spec, 3, 9, Some(8)).unwrap();
    out.push(check("replications independent of threads", r1 == r8, "3 replications, 1 vs 8 threads"));
    out
}

// ---------------------------------------------------------------- driver

fn report(number: usize, title: &str, checks: &[Check], secs: f64) -> bool {
    let pass = checks.iter().all(|c| c.pass);
    println!(
        "criterion {number}: {} {title} ({secs:.1} s)",
        if pass { "PASS" } else { "FAIL" }
    );
    for c in checks {
        println!("    [{}] {}: {}", if c.pass { "ok" } else { "FAIL" }, c.name, c.detail);
    }
    pass
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64())
}

fn main() {
    // `cargo test -- --list` and filters should not trigger the full run
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    if let Some(filter) = args.iter().find(|a| !a.starts_with('-')) {
        if !"acceptance".contains(filter.as_str()) {
            return;
        }
    }

    // ACCEPTANCE_CRITERIA=4,5 runs a subset
    let selected: Vec<usize> = match std::env::var("ACCEPTANCE_CRITERIA") {
        Ok(list) => list.split(',').filter_map(|v| v.trim().parse().ok()).collect(),
        Err(_) => (1..=8).collect(),
    };
    let wanted = |k: usize| selected.contains(&k);
    let mut results = Vec::new();
    if wanted(1) || wanted(2) {
        let ((toy, toy_secs), secs) = timed(toy_study);
        if wanted(1) {
            results.push((1, report(1, "toy study reproduction", &criterion_1(&toy, toy_secs), secs)));
        }
        if wanted(2) {
            results.push((2, report(2, "toy coverage calibration", &criterion_2(&toy), secs)));
        }
    }
    let rest: [(usize, &str, fn() -> Vec<Check>); 6] = [
        (3, "scenario coverage and interval length", criterion_3),
        (4, "NNGP and full GP agree", criterion_4),
        (5, "Polya-gamma sampler", criterion_5),
        (6, "variational and MCMC agree", criterion_6),
        (7, "full-conditional oracles", criterion_7),
        (8, "determinism", criterion_8),
    ];
    for (k, title, f) in rest {
        if wanted(k) {
            let (c, secs) = timed(f);
            results.push((k, report(k, title, &c, secs)));
        }
    }

    let failed: Vec<usize> = results.iter().filter(|r| !r.1).map(|r| r.0).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria pass", results.len());
    } else {
        println!("acceptance: failing criteria {failed:?}");
        std::process::exit(1);
    }
}
