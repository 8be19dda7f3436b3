//! Small numerical helpers: moments, type-7 quantiles, Kolmogorov-Smirnov
//! statistics, batch-means Monte Carlo standard errors and samplers for the
//! inverse-gamma distribution.

use rand::Rng;
use rand_distr::{Distribution, Gamma};

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Unbiased sample variance; zero for fewer than two values.
pub fn variance(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() - 1) as f64
}

/// Quantile of already sorted data using linear interpolation between order
/// statistics (Hyndman-Fan type 7): `h = (n - 1) p`.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "quantile of empty data");
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(x: &[f64], p: f64) -> f64 {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    quantile_sorted(&s, p)
}

/// The nine deciles 10%, 20%, ..., 90%.
pub fn deciles(x: &[f64]) -> [f64; 9] {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    std::array::from_fn(|k| quantile_sorted(&s, (k + 1) as f64 / 10.0))
}

/// Two-sample Kolmogorov-Smirnov statistic `sup |F_a - F_b|`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d = 0.0f64;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// One-sample Kolmogorov-Smirnov statistic against a continuous CDF.
pub fn ks_one_sample(x: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(k, &v)| {
            let c = cdf(v);
            (c - k as f64 / n).abs().max(((k + 1) as f64 / n - c).abs())
        })
        .fold(0.0, f64::max)
}

/// Monte Carlo standard error of the mean of a correlated chain by
/// non-overlapping batch means with about `sqrt(n)` batches.
pub fn batch_means_se(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 4 {
        return (variance(x) / n.max(1) as f64).sqrt();
    }
    let n_batches = ((n as f64).sqrt().floor() as usize).max(2);
    let size = n / n_batches;
    let means: Vec<f64> = (0..n_batches)
        .map(|b| mean(&x[b * size..(b + 1) * size]))
        .collect();
    (variance(&means) / n_batches as f64).sqrt()
}

/// Draw from the inverse-gamma distribution with the given shape and scale
/// (density proportional to `x^{-shape-1} exp(-scale / x)`).
pub fn sample_inv_gamma<R: Rng + ?Sized>(shape: f64, scale: f64, rng: &mut R) -> f64 {
    let g = Gamma::new(shape, 1.0 / scale).expect("inverse-gamma parameters must be positive");
    1.0 / g.sample(rng)
}

/// Logistic function.
#[inline]
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn type7_quantiles() {
        let x: Vec<f64> = (1..=100).map(f64::from).collect();
        assert!((quantile(&x, 0.025) - 3.475).abs() < 1e-12);
        assert!((quantile(&x, 0.975) - 97.525).abs() < 1e-12);
        assert_eq!(quantile(&[4.0], 0.3), 4.0);
        assert_eq!(deciles(&[2.5]), [2.5; 9]);
    }

    #[test]
    fn ks_identical_and_disjoint() {
        let a = [1.0, 2.0, 3.0];
        assert_eq!(ks_two_sample(&a, &a), 0.0);
        assert_eq!(ks_two_sample(&a, &[10.0, 11.0]), 1.0);
        let u: Vec<f64> = (0..1000).map(|k| (k as f64 + 0.5) / 1000.0).collect();
        assert!(ks_one_sample(&u, |v| v.clamp(0.0, 1.0)) < 1e-3 + 1e-12);
    }

    #[test]
    fn inverse_gamma_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..200_000).map(|_| sample_inv_gamma(4.0, 3.0, &mut rng)).collect();
        assert!((mean(&x) - 1.0).abs() < 0.01);
    }

    #[test]
    fn logistic_helpers() {
        assert_eq!(expit(0.0), 0.5);
        assert!((expit(800.0) - 1.0).abs() < 1e-15);
        assert!(expit(-800.0) >= 0.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(1000.0) - 1000.0).abs() < 1e-12);
    }
}
