//! Linear-beta noise schedule and the closed-form forward noising process.
//!
//! Steps are 1-based; alpha_bar(0) = 1 is the clean-data boundary. Cumulative
//! products are carried in f64 so late-step values keep full precision.

use crate::error::{Error, Result};
use crate::numeric::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    // alpha_bars[t-1] = product of (1 - beta_s) for s = 1..=t.
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// beta at 1-based step t.
    pub fn beta(&self, t: usize) -> f64 {
        assert!((1..=self.steps()).contains(&t), "step {t} outside 1..={}", self.steps());
        self.betas[t - 1]
    }

    /// Cumulative product of alphas through step t; alpha_bar(0) = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(t <= self.steps(), "step {t} outside 0..={}", self.steps());
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn sqrt_alpha_bar(&self, t: usize) -> f32 {
        self.alpha_bar(t).sqrt() as f32
    }

    pub fn sqrt_one_minus_alpha_bar(&self, t: usize) -> f32 {
        (1.0 - self.alpha_bar(t)).sqrt() as f32
    }
}

/// Linearly spaced betas from beta_start to beta_end over t_steps steps.
pub fn make_schedule(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_steps < 2 {
        return Err(Error::invalid(format!("schedule needs at least 2 steps, got {t_steps}")));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!(
            "beta range ({beta_start}, {beta_end}) must satisfy 0 < start <= end < 1"
        )));
    }
    let span = beta_end - beta_start;
    let mut betas = Vec::with_capacity(t_steps);
    let mut alpha_bars = Vec::with_capacity(t_steps);
    let mut running = 1.0f64;
    for i in 0..t_steps {
        let beta = beta_start + span * i as f64 / (t_steps - 1) as f64;
        running *= 1.0 - beta;
        betas.push(beta);
        alpha_bars.push(running);
    }
    Ok(NoiseSchedule { betas, alpha_bars })
}

/// Closed-form forward process: z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps.
pub fn add_noise(z0: &Tensor, eps: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    if z0.shape() != eps.shape() {
        return Err(Error::shape(format!(
            "add_noise shapes differ: {:?} vs {:?}",
            z0.shape(),
            eps.shape()
        )));
    }
    if t == 0 || t > sched.steps() {
        return Err(Error::invalid(format!("step {t} outside 1..={}", sched.steps())));
    }
    let (a, b) = (sched.sqrt_alpha_bar(t), sched.sqrt_one_minus_alpha_bar(t));
    let data = z0.data().iter().zip(eps.data()).map(|(&z, &e)| a * z + b * e).collect();
    Tensor::from_vec(z0.shape(), data)
}

/// Inverts the forward process given the (predicted) noise:
/// z0 = (z_t - sqrt(1 - alpha_bar_t) eps) / sqrt(alpha_bar_t).
pub fn predict_z0(z_t: &Tensor, eps: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    if z_t.shape() != eps.shape() {
        return Err(Error::shape(format!(
            "predict_z0 shapes differ: {:?} vs {:?}",
            z_t.shape(),
            eps.shape()
        )));
    }
    if t == 0 || t > sched.steps() {
        return Err(Error::invalid(format!("step {t} outside 1..={}", sched.steps())));
    }
    let (eps_coef, inv_a) = predict_z0_coefficients(t, sched);
    let data = z_t.data().iter().zip(eps.data()).map(|(&z, &e)| inv_a * z + eps_coef * e).collect();
    Tensor::from_vec(z_t.shape(), data)
}

/// predict_z0 as z0 = b * eps + a * z_t, returned as (b, a); the taped loss
/// path applies it as an affine op on the noise prediction with z_t constant.
pub fn predict_z0_coefficients(t: usize, sched: &NoiseSchedule) -> (f32, f32) {
    let sqrt_ab = sched.alpha_bar(t).sqrt();
    let eps_coef = (-((1.0 - sched.alpha_bar(t)).sqrt()) / sqrt_ab) as f32;
    (eps_coef, (1.0 / sqrt_ab) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::rng::{sample_standard_normal, RngState};

    #[test]
    fn two_step_schedule_matches_direct_product() {
        let s = make_schedule(2, 0.1, 0.2).unwrap();
        assert_eq!(s.steps(), 2);
        assert!((s.beta(1) - 0.1).abs() < 1e-12);
        assert!((s.beta(2) - 0.2).abs() < 1e-12);
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-12);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-12);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn constant_beta_matches_closed_form_power() {
        let s = make_schedule(1000, 1e-4, 1e-4).unwrap();
        let closed = (1.0f64 - 1e-4).powi(1000);
        assert!((s.alpha_bar(1000) - closed).abs() < 1e-4, "got {}", s.alpha_bar(1000));
        assert!((closed - 0.9048).abs() < 1e-3, "sanity on the expected magnitude");
    }

    #[test]
    fn alpha_bar_decreases_and_matches_log_sum_oracle() {
        let s = make_schedule(200, 1e-4, 0.02).unwrap();
        let mut log_sum = 0.0f64;
        for t in 1..=200 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1), "not strictly decreasing at {t}");
            // Independent accumulation through logs instead of products.
            log_sum += (1.0 - s.beta(t)).ln();
            assert!(
                (s.alpha_bar(t) - log_sum.exp()).abs() < 1e-6,
                "cumulative product drifts from the log-sum oracle at {t}"
            );
        }
    }

    #[test]
    fn schedule_rejects_bad_ranges() {
        assert!(make_schedule(1, 0.1, 0.2).is_err(), "min two steps");
        assert!(make_schedule(10, 0.0, 0.2).is_err(), "zero start");
        assert!(make_schedule(10, 0.3, 0.2).is_err(), "start above end");
        assert!(make_schedule(10, 0.1, 1.0).is_err(), "end at one");
    }

    #[test]
    fn add_noise_limits_and_range_checks() {
        let s = make_schedule(200, 1e-4, 0.02).unwrap();
        let mut rng = RngState::seed(9);
        let z0 = sample_standard_normal(&[100], &mut rng);
        let eps = sample_standard_normal(&[100], &mut rng);
        assert!(add_noise(&z0, &eps, 0, &s).is_err());
        assert!(add_noise(&z0, &eps, 201, &s).is_err());
        let short = Tensor::zeros(&[50]);
        assert!(add_noise(&z0, &short, 5, &s).is_err(), "shape mismatch");

        // Pure noise scaling when z0 = 0: identical arithmetic by hand.
        let zero = Tensor::zeros(&[100]);
        let zt = add_noise(&zero, &eps, 100, &s).unwrap();
        let b = s.sqrt_one_minus_alpha_bar(100);
        for (&got, &e) in zt.data().iter().zip(eps.data()) {
            assert_eq!(got, 0.0f32 * s.sqrt_alpha_bar(100) + b * e);
        }

        // Near the t=0 boundary the sample stays close to the data.
        let z1 = add_noise(&z0, &eps, 1, &s).unwrap();
        let drift = z1.max_abs_diff(&z0).unwrap();
        assert!(drift < 0.1, "tiny first-step beta keeps z_1 near z0, drift {drift}");
    }

    #[test]
    fn predict_z0_inverts_add_noise() {
        let s = make_schedule(200, 1e-4, 0.02).unwrap();
        let mut rng = RngState::seed(10);
        let z0 = sample_standard_normal(&[4096], &mut rng);
        let eps = sample_standard_normal(&[4096], &mut rng);
        for t in [1, 37, 100, 200] {
            let zt = add_noise(&z0, &eps, t, &s).unwrap();
            let back = predict_z0(&zt, &eps, t, &s).unwrap();
            let err = back.max_abs_diff(&z0).unwrap();
            assert!(err < 1e-5, "roundtrip error {err} at t {t}");
        }
        // eps' = 0 reduces to the pure rescale.
        let zt = add_noise(&z0, &eps, 150, &s).unwrap();
        let rescaled = predict_z0(&zt, &Tensor::zeros(&[4096]), 150, &s).unwrap();
        let inv = 1.0 / s.sqrt_alpha_bar(150);
        for (&got, &z) in rescaled.data().iter().zip(zt.data()) {
            assert!((got - z * inv).abs() < 1e-6);
        }
    }

    #[test]
    fn noised_moments_match_the_closed_form() {
        let s = make_schedule(200, 1e-4, 0.02).unwrap();
        let mut rng = RngState::seed(11);
        let z0 = Tensor::filled(&[100_000], 2.0);
        let eps = sample_standard_normal(&[100_000], &mut rng);
        let t = 120;
        let zt = add_noise(&z0, &eps, t, &s).unwrap();
        let want_mean = s.alpha_bar(t).sqrt() * 2.0;
        let want_var = 1.0 - s.alpha_bar(t);
        let mean = zt.mean_f64();
        let var = zt.var_f64();
        assert!((mean / want_mean - 1.0).abs() < 0.02, "mean {mean} vs {want_mean}");
        assert!((var / want_var - 1.0).abs() < 0.02, "var {var} vs {want_var}");
    }
}
