//! Small statistical helpers shared by the simulator, model, and tests.

pub const LN_2PI: f64 = 1.8378770664093453;

/// Numerically stable softplus.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Log density of N(mean, std²) at `x`.
pub fn normal_log_pdf(x: f64, mean: f64, std: f64) -> f64 {
    let z = (x - mean) / std;
    -std.ln() - 0.5 * LN_2PI - 0.5 * z * z
}

/// Error function, Abramowitz–Stegun 7.1.26 (|err| < 1.5e-7).
pub fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592 + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    sign * (1.0 - poly * (-x * x).exp())
}

/// CDF of N(mean, std²).
pub fn normal_cdf(x: f64, mean: f64, std: f64) -> f64 {
    0.5 * (1.0 + erf((x - mean) / (std * std::f64::consts::SQRT_2)))
}

/// Two-sided Kolmogorov–Smirnov statistic of `samples` against `cdf`.
/// Sorts a copy of the samples.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in s.iter().enumerate() {
        let f = cdf(x);
        let hi = (i as f64 + 1.0) / n - f;
        let lo = f - i as f64 / n;
        d = d.max(hi.abs()).max(lo.abs());
    }
    d
}

/// Large-sample critical value of the KS statistic at significance `alpha`.
pub fn ks_critical(alpha: f64, n: usize) -> f64 {
    (-0.5 * (alpha / 2.0).ln()).sqrt() / (n as f64).sqrt()
}

/// Sample mean and (unbiased) standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn erf_known_values() {
        assert!((erf(0.0)).abs() < 1e-8);
        assert!((erf(1.0) - 0.8427007929).abs() < 2e-7);
        assert!((erf(-1.0) + 0.8427007929).abs() < 2e-7);
        assert!((erf(3.0) - 0.9999779095).abs() < 2e-7);
    }

    #[test]
    fn ks_accepts_matching_distribution() {
        use rand::Rng;
        let mut rng = crate::rng::stream_rng(42, 2);
        let samples: Vec<f64> =
            (0..50_000).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        let d = ks_statistic(&samples, |x| normal_cdf(x, 0.0, 1.0));
        assert!(d < ks_critical(0.01, samples.len()), "d = {d}");
    }

    #[test]
    fn ks_rejects_shifted_distribution() {
        use rand::Rng;
        let mut rng = crate::rng::stream_rng(42, 1);
        let samples: Vec<f64> = (0..50_000)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) + 0.05)
            .collect();
        let d = ks_statistic(&samples, |x| normal_cdf(x, 0.0, 1.0));
        assert!(d > ks_critical(0.01, samples.len()), "d = {d}");
    }
}
