//! WebAssembly bindings for the browser demo in `www/`.

use bsps_core::experiments::{simulate_toy_with, toy_agents, ToyConfig};
use bsps_core::gibbs::PriorConfig;
use bsps_core::logistic::sample_pg1;
use bsps_core::spatial::{sample_gp, ExpKernel, SiteSet};
use bsps_core::vb::{run_vb, vb_field_means, GridCache, RangeGrid, VbOptions};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

fn js_err(e: bsps_core::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// Cell centers of an `n x n` lattice over `[-1, 1]^2`, row by row.
fn lattice(n: usize) -> Vec<[f64; 2]> {
    let step = 2.0 / n as f64;
    let mut pts = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            pts.push([-1.0 + (c as f64 + 0.5) * step, 1.0 - (r as f64 + 0.5) * step]);
        }
    }
    pts
}

/// One draw of a zero-mean exponential-kernel field on an `n x n` lattice.
#[wasm_bindgen]
pub fn gp_field(range: f64, sd: f64, n: usize, seed: u64) -> Result<Vec<f64>, JsValue> {
    if n == 0 || n > 48 {
        return Err(JsValue::from_str("lattice size must be between 1 and 48"));
    }
    let sites = SiteSet::new(lattice(n)).map_err(js_err)?;
    let kernel = ExpKernel::new(range).map_err(js_err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_gp(&sites, sd, &kernel, &mut rng).map_err(js_err)
}

/// Variational fit to a simulated two-region data set. Returns the posterior
/// mean weight of each agent on an `n x n` lattice (agent 1 first), followed
/// by the training sites as `x, y` pairs.
#[wasm_bindgen]
pub fn toy_weight_map(n_train: usize, n: usize, seed: u64) -> Result<Vec<f64>, JsValue> {
    if !(20..=400).contains(&n_train) || n == 0 || n > 48 {
        return Err(JsValue::from_str("need 20..=400 training sites and a lattice of 1..=48"));
    }
    let config = ToyConfig {
        n_train,
        n_test: 1,
        ..ToyConfig::default()
    };
    let data = simulate_toy_with(&config, seed).map_err(js_err)?;
    let agents = toy_agents(&data).map_err(js_err)?;
    let sites = &data.train.sites;
    let priors = PriorConfig::default_for(sites, 2);
    let grid = RangeGrid::for_priors(&priors).map_err(js_err)?;
    let options = VbOptions {
        tol: 1e-4,
        max_iter: 200,
        track_elbo: false,
    };
    let fit = run_vb(&data.train.y, sites, &agents.train, &priors, &grid, &options, None).map_err(js_err)?;
    let cache = GridCache::new(sites, &grid).map_err(js_err)?;
    let lattice = SiteSet::new(lattice(n)).map_err(js_err)?;
    let weights = vb_field_means(&fit.state, sites, &lattice, &priors, &cache).map_err(js_err)?;
    let mut out = Vec::with_capacity(2 * n * n + 2 * sites.len());
    out.extend_from_slice(&weights[1]);
    out.extend_from_slice(&weights[2]);
    for s in sites.coords() {
        out.extend_from_slice(s);
    }
    Ok(out)
}

/// Histogram of `draws` Polya-gamma PG(1, c) variates over `[0, upper)`.
/// The last two entries are the sample mean and the exact mean.
#[wasm_bindgen]
pub fn pg_histogram(c: f64, draws: usize, bins: usize, upper: f64, seed: u64) -> Result<Vec<f64>, JsValue> {
    if bins == 0 || draws == 0 || !(upper > 0.0) {
        return Err(JsValue::from_str("draws, bins and upper must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hist = vec![0.0; bins + 2];
    let mut total = 0.0;
    for _ in 0..draws {
        let w = sample_pg1(c, &mut rng).map_err(js_err)?;
        total += w;
        let k = (w / upper * bins as f64) as usize;
        if k < bins {
            hist[k] += 1.0;
        }
    }
    let width = upper / bins as f64;
    for h in hist.iter_mut().take(bins) {
        *h /= draws as f64 * width;
    }
    hist[bins] = total / draws as f64;
    hist[bins + 1] = pg1_mean(c);
    Ok(hist)
}

fn pg1_mean(c: f64) -> f64 {
    if c.abs() < 1e-6 {
        0.25
    } else {
        (c / 2.0).tanh() / (2.0 * c)
    }
}
