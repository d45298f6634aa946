//! Shared helpers for the integration suites.

/// One-sample Kolmogorov-Smirnov test against a known CDF.
/// Returns `(statistic, p_value)` using the asymptotic Kolmogorov
/// distribution with the Stephens small-sample correction.
pub fn ks_test<F: Fn(f64) -> f64>(sample: &[f64], cdf: F) -> (f64, f64) {
    let n = sample.len();
    assert!(n > 10, "KS test needs a real sample");
    let mut sorted = sample.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut d: f64 = 0.0;
    for (i, x) in sorted.iter().enumerate() {
        let f = cdf(*x);
        let hi = (i + 1) as f64 / n as f64 - f;
        let lo = f - i as f64 / n as f64;
        d = d.max(hi.max(lo));
    }
    let sqrt_n = (n as f64).sqrt();
    let lambda = (sqrt_n + 0.12 + 0.11 / sqrt_n) * d;
    let mut p = 0.0;
    for k in 1..101 {
        let term = (-2.0 * (k as f64) * (k as f64) * lambda * lambda).exp();
        p += if k % 2 == 1 { 2.0 * term } else { -2.0 * term };
    }
    (d, p.clamp(0.0, 1.0))
}

/// Batch-means standard error of a (possibly autocorrelated) chain mean.
pub fn batch_means_se(chain: &[f64], n_batches: usize) -> f64 {
    let nb = n_batches.min(chain.len() / 2).max(2);
    let len = chain.len() / nb;
    let means: Vec<f64> = (0..nb)
        .map(|k| chain[k * len..(k + 1) * len].iter().sum::<f64>() / len as f64)
        .collect();
    let grand = means.iter().sum::<f64>() / nb as f64;
    let var = means.iter().map(|m| (m - grand) * (m - grand)).sum::<f64>() / (nb as f64 - 1.0);
    (var / nb as f64).sqrt()
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[allow(dead_code)]
pub fn sd(values: &[f64]) -> f64 {
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() as f64 - 1.0)).sqrt()
}
