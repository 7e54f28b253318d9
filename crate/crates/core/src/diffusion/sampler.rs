//! Deterministic latent sampling: walk a decreasing subsequence of steps,
//! predicting the noise at each one and jumping to the next level with the
//! closed-form update z_prev = sqrt(abar_prev) * z0_hat + sqrt(1 - abar_prev) * eps'.
//! No randomness enters after the initial noise, so identical inputs give
//! bitwise-identical outputs.

use crate::diffusion::model::{denoiser_forward, engine_params, LatentGrid, ModelConfig, ParamStore};
use crate::diffusion::schedule::{predict_z0, NoiseSchedule};
use crate::error::{Error, Result};
use crate::numeric::engine::{Engine, PlainEngine};
use crate::numeric::tensor::Tensor;

/// Anything that predicts the noise inside z_t at step t, given the
/// conditioning frame. Implemented by the trained model and by test oracles.
pub trait NoisePredictor {
    fn predict(&mut self, z_t: &Tensor, cond: &Tensor, t: usize) -> Result<Tensor>;
}

/// Uniform decreasing step schedule: n values from t_max down to 1,
/// rounded to the nearest integer. n = 1 collapses to the single jump
/// [t_max] straight to the clean latent.
pub fn ddim_steps(t_max: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::invalid("step count must be positive".to_string()));
    }
    if t_max == 0 || n > t_max {
        return Err(Error::invalid(format!(
            "cannot place {n} distinct steps inside 1..={t_max}"
        )));
    }
    if n == 1 {
        return Ok(vec![t_max]);
    }
    let span = (t_max - 1) as f64;
    let steps: Vec<usize> = (0..n)
        .map(|i| (t_max as f64 - span * i as f64 / (n - 1) as f64).round() as usize)
        .collect();
    // Spacing >= 1 between neighbors makes rounding collision-free.
    debug_assert!(steps.windows(2).all(|w| w[0] > w[1]));
    Ok(steps)
}

fn validate_steps(steps: &[usize], schedule: &NoiseSchedule) -> Result<()> {
    if steps.is_empty() {
        return Err(Error::invalid("step list is empty".to_string()));
    }
    for &t in steps {
        if t == 0 || t > schedule.steps() {
            return Err(Error::invalid(format!(
                "step {t} outside schedule range 1..={}",
                schedule.steps()
            )));
        }
    }
    if !steps.windows(2).all(|w| w[0] > w[1]) {
        return Err(Error::invalid(format!("steps {steps:?} are not strictly decreasing")));
    }
    Ok(())
}

/// Runs the deterministic update along `steps`, starting from `init_noise`
/// treated as z at the first listed step. After the final step the state
/// jumps to t = 0, i.e. the returned tensor is the clean latent estimate.
pub fn ddim_sample(
    predictor: &mut dyn NoisePredictor,
    init_noise: &Tensor,
    cond: &Tensor,
    schedule: &NoiseSchedule,
    steps: &[usize],
) -> Result<Tensor> {
    validate_steps(steps, schedule)?;
    let mut z = init_noise.clone();
    for (i, &t) in steps.iter().enumerate() {
        let eps = predictor.predict(&z, cond, t)?;
        if eps.shape() != z.shape() {
            return Err(Error::shape(format!(
                "predictor returned shape {:?} for state shape {:?}",
                eps.shape(),
                z.shape()
            )));
        }
        let z0_hat = predict_z0(&z, &eps, t, schedule)?;
        let t_prev = steps.get(i + 1).copied().unwrap_or(0);
        let a = schedule.sqrt_alpha_bar(t_prev);
        let b = schedule.sqrt_one_minus_alpha_bar(t_prev);
        let data: Vec<f32> = z0_hat
            .data()
            .iter()
            .zip(eps.data())
            .map(|(&z0, &e)| a * z0 + b * e)
            .collect();
        z = Tensor::from_vec(z.shape(), data)?;
    }
    z.ensure_finite("sampled latent")?;
    Ok(z)
}

/// The trained model as a noise predictor: plain (untaped) forward passes
/// over a fixed parameter set and latent grid.
pub struct ModelPredictor<'a> {
    eng: PlainEngine,
    cfg: &'a ModelConfig,
    store: &'a ParamStore,
    vals: Vec<<PlainEngine as Engine>::Val>,
    grid: LatentGrid,
}

impl<'a> ModelPredictor<'a> {
    pub fn new(cfg: &'a ModelConfig, store: &'a ParamStore, grid: LatentGrid) -> ModelPredictor<'a> {
        let mut eng = PlainEngine::new();
        let vals = engine_params(&mut eng, store);
        ModelPredictor { eng, cfg, store, vals, grid }
    }
}

impl NoisePredictor for ModelPredictor<'_> {
    fn predict(&mut self, z_t: &Tensor, cond: &Tensor, t: usize) -> Result<Tensor> {
        let z = self.eng.leaf(z_t.data());
        let c = self.eng.leaf(cond.data());
        let out = denoiser_forward(&mut self.eng, self.cfg, self.store, &self.vals, &z, &c, t, self.grid)?;
        Tensor::from_vec(z_t.shape(), self.eng.data(&out).to_vec())
    }
}
