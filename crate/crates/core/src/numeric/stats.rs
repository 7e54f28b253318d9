//! Small statistics helpers used by tests and the self-check suite.

/// Standard normal CDF via the Abramowitz-Stegun 7.1.26 erf approximation
/// (absolute error < 1.5e-7, ample for KS thresholds around 5e-3).
pub fn normal_cdf(x: f64) -> f64 {
    let t = 1.0 / (1.0 + 0.3275911 * x.abs() / std::f64::consts::SQRT_2);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    let erf = 1.0 - poly * (-(x * x) / 2.0).exp();
    if x >= 0.0 {
        0.5 * (1.0 + erf)
    } else {
        0.5 * (1.0 - erf)
    }
}

/// Kolmogorov-Smirnov statistic of a sample against the standard normal.
pub fn ks_statistic_standard_normal(sample: &[f32]) -> f64 {
    assert!(!sample.is_empty(), "KS statistic of empty sample");
    let mut sorted: Vec<f64> = sample.iter().map(|&v| v as f64).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-finite sample value"));
    let n = sorted.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in sorted.iter().enumerate() {
        let cdf = normal_cdf(x);
        let lo = i as f64 / n;
        let hi = (i + 1) as f64 / n;
        d = d.max((cdf - lo).abs()).max((hi - cdf).abs());
    }
    d
}

/// Asymptotic KS critical value at significance alpha = 0.01: the statistic
/// of a true sample exceeds this with probability 1%.
pub fn ks_critical_alpha_01(n: usize) -> f64 {
    1.62762 / (n as f64).sqrt()
}

/// Pearson correlation coefficient of two equal-length samples.
pub fn pearson(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len(), "pearson length mismatch");
    assert!(a.len() > 1, "pearson needs at least two points");
    let n = a.len() as f64;
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let dx = x as f64 - ma;
        let dy = y as f64 - mb;
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cdf_reference_points() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-7);
        assert!((normal_cdf(1.0) - 0.841344746).abs() < 1e-6);
        assert!((normal_cdf(-1.959963985) - 0.025).abs() < 1e-6);
        assert!((normal_cdf(3.0) - 0.998650102).abs() < 1e-6);
    }

    #[test]
    fn ks_detects_shifted_sample() {
        // Uniform values are far from normal: D should be large.
        let sample: Vec<f32> = (0..1000).map(|i| i as f32 / 1000.0).collect();
        assert!(ks_statistic_standard_normal(&sample) > 0.3);
    }

    #[test]
    fn pearson_of_identical_is_one() {
        let a: Vec<f32> = (0..100).map(|i| (i as f32).sin()).collect();
        assert!((pearson(&a, &a) - 1.0).abs() < 1e-12);
    }
}
