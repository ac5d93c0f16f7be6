//! Small statistics toolkit: order statistics, compensated moments, the
//! Kolmogorov–Smirnov test and the bootstrap.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::quadrature::NeumaierSum;

/// Sample quantile with linear interpolation between order statistics
/// (the "type 7" definition). `sorted` must be ascending and non-empty.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn sorted_copy(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

pub fn median(xs: &[f64]) -> f64 {
    quantile_sorted(&sorted_copy(xs), 0.5)
}

/// Interquartile range.
pub fn iqr(xs: &[f64]) -> f64 {
    let s = sorted_copy(xs);
    quantile_sorted(&s, 0.75) - quantile_sorted(&s, 0.25)
}

pub fn mean(xs: &[f64]) -> f64 {
    let mut s = NeumaierSum::default();
    xs.iter().for_each(|&x| s.add(x));
    s.total() / xs.len() as f64
}

/// Unbiased sample variance, two-pass with compensated sums.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let mut s = NeumaierSum::default();
    xs.iter().for_each(|&x| s.add((x - m) * (x - m)));
    s.total() / (xs.len() as f64 - 1.0)
}

/// Standard error of the mean.
pub fn std_error(xs: &[f64]) -> f64 {
    (variance(xs) / xs.len() as f64).sqrt()
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Asymptotic Kolmogorov tail `P(K > λ) = 2 Σ (−1)^{k−1} e^{−2k²λ²}`.
pub fn kolmogorov_tail(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = (-2.0 * k * k * lambda * lambda).exp();
        sum += if k as u64 % 2 == 1 { term } else { -term };
        if term < 1e-18 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// One-sample KS test of `xs` against `cdf`: `(D, p)`, with the p-value
/// from the Kolmogorov limit under Stephens' finite-sample correction.
pub fn ks_test<F: Fn(f64) -> f64>(xs: &[f64], cdf: F) -> (f64, f64) {
    let s = sorted_copy(xs);
    let n = s.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in s.iter().enumerate() {
        let f = cdf(x);
        d = d.max(f - i as f64 / n).max((i + 1) as f64 / n - f);
    }
    let sn = n.sqrt();
    (d, kolmogorov_tail((sn + 0.12 + 0.11 / sn) * d))
}

/// Bootstrap replicates of `stat` over resamples of `xs`.
pub fn bootstrap<F: Fn(&[f64]) -> f64>(xs: &[f64], reps: usize, seed: u64, stat: F) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf = vec![0.0; xs.len()];
    (0..reps)
        .map(|_| {
            for b in buf.iter_mut() {
                *b = xs[rng.random_range(0..xs.len())];
            }
            stat(&buf)
        })
        .collect()
}

/// Bootstrap standard error of `stat`.
pub fn bootstrap_se<F: Fn(&[f64]) -> f64>(xs: &[f64], reps: usize, seed: u64, stat: F) -> f64 {
    variance(&bootstrap(xs, reps, seed, stat)).sqrt()
}

/// Ordinary least squares `y = intercept + slope·x`: `(slope, intercept)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Insufficient("linear fit needs at least two paired points".into()));
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx) = (NeumaierSum::default(), NeumaierSum::default());
    for (&a, &b) in x.iter().zip(y) {
        sxy.add((a - mx) * (b - my));
        sxx.add((a - mx) * (a - mx));
    }
    if sxx.total() == 0.0 {
        return Err(Error::Insufficient("linear fit needs distinct abscissae".into()));
    }
    let slope = sxy.total() / sxx.total();
    Ok((slope, my - slope * mx))
}
