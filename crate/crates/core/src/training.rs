//! Joint appearance-motion training.
//!
//! Per clip and step: sample a fresh noise texture, warp it through the
//! clip's motion at latent resolution, degrade it, noise the clip latent at
//! a random timestep, and ask the denoiser for the added noise. Three mean
//! squared errors train the networks jointly: the prediction against the
//! degraded warped noise, the decoded motion maps against the rasterized
//! ground truth, and the reversed-and-fused prediction against the original
//! noise texture on covered texels. The degradation reversal, unwarp fusion,
//! and clean-latent estimate are all linear in the prediction, so the whole
//! objective backpropagates exactly; a finite-difference harness checks it
//! end to end on a miniature instance.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::config::{RunConfig, TrainConfig};
use crate::dataset::Clip;
use crate::diffusion::codec::encode_latent;
use crate::diffusion::model::{
    denoiser_forward, engine_params, init_params, motion_decode, save_checkpoint, LatentGrid,
    ModelConfig, ParamStore,
};
use crate::diffusion::schedule::{
    add_noise, make_schedule, predict_z0_coefficients, NoiseSchedule,
};
use crate::error::{Error, Result};
use crate::noisefield::{
    build_fuse_plan, degrade, downsample_maps, sample_noise_texture, undegrade_coefficients,
    warp, warp_with_background, BackgroundMode, GAMMA_CAP,
};
use crate::numeric::engine::{Engine, TapeEngine};
use crate::numeric::kernels::{mse_indexed_value, mse_value, GatherMeanPlan};
use crate::numeric::rng::{sample_standard_normal, streams, RngState};
use crate::numeric::tape::{finite_difference_check, BufId, GradTape};
use crate::numeric::tensor::Tensor;
use crate::raster::{MotionMap, MAP_CHANNELS};

// ── plain losses ─────────────────────────────────────────────────────────

/// Mean squared error between the added noise and the prediction.
pub fn loss_diff(eps: &Tensor, pred: &Tensor) -> Result<f64> {
    if eps.shape() != pred.shape() {
        return Err(Error::shape(format!(
            "noise {:?} and prediction {:?} differ",
            eps.shape(),
            pred.shape()
        )));
    }
    if eps.data().is_empty() {
        return Err(Error::shape("loss over empty tensors".to_string()));
    }
    Ok(mse_value(pred.data(), eps.data()))
}

/// (u, v, mask) target stack for the motion-decoding loss: motion maps with
/// the part channel dropped, (F, H, W, 3).
pub fn md_target(maps: &[MotionMap]) -> Tensor {
    assert!(!maps.is_empty(), "no motion maps");
    let (h, w) = (maps[0].height(), maps[0].width());
    let mut data = Vec::with_capacity(maps.len() * h * w * 3);
    for map in maps {
        for px in map.data.data().chunks_exact(MAP_CHANNELS) {
            data.extend_from_slice(&[px[0], px[1], px[3]]);
        }
    }
    Tensor::from_vec(&[maps.len(), h, w, 3], data).expect("shape matches data")
}

/// Element indices of body pixels in the (F, H, W, 3) target, for the masked
/// loss variant.
fn md_mask_indices(maps: &[MotionMap]) -> Vec<u32> {
    let mut idx = Vec::new();
    let mut base = 0u32;
    for map in maps {
        for px in map.data.data().chunks_exact(MAP_CHANNELS) {
            if px[3] > 0.5 {
                idx.extend_from_slice(&[base, base + 1, base + 2]);
            }
            base += 3;
        }
    }
    idx
}

/// Mean squared error between rasterized motion maps and the decoder output;
/// full-frame by default, restricted to body pixels when `masked`.
pub fn loss_md(maps: &[MotionMap], pred: &Tensor, masked: bool) -> Result<f64> {
    let target = md_target(maps);
    if target.shape() != pred.shape() {
        return Err(Error::shape(format!(
            "motion target {:?} and decoder output {:?} differ",
            target.shape(),
            pred.shape()
        )));
    }
    if masked {
        let idx = md_mask_indices(maps);
        Ok(mse_indexed_value(pred.data(), target.data(), &idx))
    } else {
        Ok(mse_value(pred.data(), target.data()))
    }
}

/// Mean squared error between the noise texture and its fused reconstruction
/// over covered texels only; 0 when nothing is covered.
pub fn loss_mc(tex: &Tensor, fused: &Tensor, coverage: &[u32]) -> Result<f64> {
    if tex.shape() != fused.shape() {
        return Err(Error::shape(format!(
            "texture {:?} and fused texture {:?} differ",
            tex.shape(),
            fused.shape()
        )));
    }
    if tex.shape().len() != 3 {
        return Err(Error::shape(format!("texture {:?} is not (U, V, C)", tex.shape())));
    }
    let channels = tex.shape()[2];
    if coverage.len() * channels != tex.data().len() {
        return Err(Error::shape(format!(
            "coverage for {} texels does not match texture {:?}",
            coverage.len(),
            tex.shape()
        )));
    }
    let mut idx = Vec::new();
    for (texel, &count) in coverage.iter().enumerate() {
        if count > 0 {
            for c in 0..channels {
                idx.push((texel * channels + c) as u32);
            }
        }
    }
    Ok(mse_indexed_value(fused.data(), tex.data(), &idx))
}

/// Weighted objective with the preset's effective weights.
pub fn total_loss(l_diff: f64, l_mc: f64, l_md: f64, cfg: &TrainConfig) -> f64 {
    let (a, b, c) = cfg.effective_lambdas();
    a as f64 * l_diff + b as f64 * l_mc + c as f64 * l_md
}

// ── optimizer ────────────────────────────────────────────────────────────

/// Adaptive-moment optimizer state, one accumulator pair per parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    steps: u32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> AdamState {
        AdamState {
            m: store.entries().iter().map(|(_, t)| vec![0.0; t.data().len()]).collect(),
            v: store.entries().iter().map(|(_, t)| vec![0.0; t.data().len()]).collect(),
            steps: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected update; `grads` aligns with store order.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &[&[f32]], lr: f32) {
        assert_eq!(grads.len(), store.len(), "gradient list misaligned with parameters");
        self.steps += 1;
        let bc1 = 1.0 - (self.beta1 as f64).powi(self.steps as i32);
        let bc2 = 1.0 - (self.beta2 as f64).powi(self.steps as i32);
        for i in 0..grads.len() {
            let g = grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = store.tensor_at_mut(i).data_mut();
            assert_eq!(g.len(), p.len(), "gradient length mismatch on entry {i}");
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] as f64 / bc1;
                let v_hat = v[j] as f64 / bc2;
                p[j] -= (lr as f64 * m_hat / (v_hat.sqrt() + self.eps as f64)) as f32;
            }
        }
    }
}

// ── per-clip static cache ────────────────────────────────────────────────

/// Everything about a clip that does not change between steps: its latent,
/// the conditioning latent, latent-resolution motion maps, the fuse plan,
/// and the motion-loss target.
pub struct ClipCache {
    pub z0: Tensor,
    pub cond: Tensor,
    pub latent_maps: Vec<MotionMap>,
    pub grid: LatentGrid,
    plan: Arc<GatherMeanPlan>,
    /// Element indices of covered fuse groups, the consistency-loss support.
    mc_idx: Arc<Vec<u32>>,
    md_target: Arc<Vec<f32>>,
    md_idx: Option<Arc<Vec<u32>>>,
}

/// Encodes and indexes one clip for training.
pub fn build_clip_cache(run: &RunConfig, clip: &Clip) -> Result<ClipCache> {
    let (s, r, c) = (run.spatial_factor, run.temporal_factor, run.latent_channels);
    let z0 = encode_latent(&clip.video, s, r, c)?;
    let reference = clip.reference_frame();
    let ref_video = Tensor::from_vec(
        &[1, reference.shape()[0], reference.shape()[1], 3],
        reference.data().to_vec(),
    )?;
    let cond_latent = encode_latent(&ref_video, s, r, c)?;
    let cs = cond_latent.shape();
    let cond = Tensor::from_vec(&[cs[1], cs[2], cs[3]], cond_latent.data().to_vec())?;
    let latent_maps = downsample_maps(&clip.maps, s, r)?;
    let plan = build_fuse_plan(
        &latent_maps,
        run.texture_u,
        run.texture_v,
        c,
        run.train.fuse_per_frame,
    );
    let mut mc_idx = Vec::new();
    for g in 0..plan.groups() {
        if plan.starts[g + 1] > plan.starts[g] {
            for k in 0..c {
                mc_idx.push((g * c + k) as u32);
            }
        }
    }
    let zs = z0.shape();
    let grid = LatentGrid { frames: zs[0], height: zs[1], width: zs[2] };
    let md_idx = run
        .train
        .masked_md
        .then(|| Arc::new(md_mask_indices(&clip.maps)));
    Ok(ClipCache {
        z0,
        cond,
        latent_maps,
        grid,
        plan: Arc::new(plan),
        mc_idx: Arc::new(mc_idx),
        md_target: Arc::new(md_target(&clip.maps).data().to_vec()),
        md_idx,
    })
}

/// Consistency-loss target aligned with the fuse plan: the texture itself,
/// repeated per frame when fusion is per-frame.
fn mc_target(tex: &Tensor, plan: &GatherMeanPlan) -> Vec<f32> {
    let copies = plan.output_len() / tex.data().len();
    let mut out = Vec::with_capacity(plan.output_len());
    for _ in 0..copies {
        out.extend_from_slice(tex.data());
    }
    out
}

// ── taped step ───────────────────────────────────────────────────────────

/// Loss breakdown and sampled values for one step, as logged.
#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub step: usize,
    pub l_diff: f64,
    pub l_mc: f64,
    pub l_md: f64,
    pub total: f64,
    /// Degradation level drawn for the first clip in the batch.
    pub gamma: f32,
    /// Timestep drawn for the first clip in the batch.
    pub t: usize,
    /// True when a consistency branch was skipped for exceeding the cap.
    pub mc_skipped: bool,
}

struct ClipLosses {
    l_diff: BufId,
    l_md: Option<BufId>,
    l_mc: Option<BufId>,
    gamma: f32,
    t: usize,
    mc_skipped: bool,
}

/// Runs one clip's pipeline on the tape. Random draws come from purpose
/// streams keyed by (step, lane), so trajectories replay exactly.
fn clip_losses(
    eng: &mut TapeEngine,
    run: &RunConfig,
    mcfg: &ModelConfig,
    sched: &NoiseSchedule,
    store: &ParamStore,
    vals: &[BufId],
    cache: &ClipCache,
    step: usize,
    lane: u64,
) -> Result<ClipLosses> {
    let t_cfg = &run.train;
    let (_, w_mc, w_md) = t_cfg.effective_lambdas();
    let (seed, step64) = (run.seed, step as u64);

    let mut tex_rng = RngState::purpose(seed, streams::TEXTURE, step64, lane);
    let eps_uv =
        sample_noise_texture(run.texture_u, run.texture_v, run.latent_channels, &mut tex_rng);
    let mut bg_rng = RngState::purpose(seed, streams::BACKGROUND, step64, lane);
    let bg_mode =
        if run.static_background { BackgroundMode::Static } else { BackgroundMode::PerFrame };
    // Warping directly at latent resolution matches warp-then-downsample on
    // every covered pixel and only draws the background noise that survives.
    let warped = warp_with_background(&eps_uv, &cache.latent_maps, &mut bg_rng, bg_mode)?;
    let gamma = RngState::purpose(seed, streams::GAMMA, step64, lane)
        .uniform_f32(t_cfg.gamma_lo, t_cfg.gamma_hi);
    let mut zeta_rng = RngState::purpose(seed, streams::ZETA, step64, lane);
    let zeta = sample_standard_normal(warped.shape(), &mut zeta_rng);
    let degraded = degrade(&warped, &zeta, gamma)?;
    let t = 1 + RngState::purpose(seed, streams::TIMESTEP, step64, lane).below(sched.steps());
    let z_t = add_noise(&cache.z0, &degraded, t, sched)?;

    let z_leaf = eng.leaf(z_t.data());
    let c_leaf = eng.leaf(cache.cond.data());
    let eps_pred = denoiser_forward(eng, mcfg, store, vals, &z_leaf, &c_leaf, t, cache.grid)?;
    let l_diff = eng.mse(&eps_pred, &Arc::new(degraded.data().to_vec()));

    let l_md = if w_md > 0.0 {
        // Clean-latent estimate as an affine map of the prediction; z_t is a
        // constant here, so only the prediction carries gradients.
        let (eps_coef, inv_a) = predict_z0_coefficients(t, sched);
        let offset: Vec<f32> = z_t.data().iter().map(|&v| v * inv_a).collect();
        let z0_hat = eng.affine(&eps_pred, eps_coef, Some(&offset));
        let m_pred = motion_decode(eng, mcfg, store, vals, &z0_hat, cache.grid)?;
        Some(match &cache.md_idx {
            Some(idx) => eng.mse_indexed(&m_pred, &cache.md_target, idx),
            None => eng.mse(&m_pred, &cache.md_target),
        })
    } else {
        None
    };

    // The reversal blows up approaching gamma = 1, so steps beyond the cap
    // contribute no consistency term.
    let over_cap = gamma > t_cfg.gamma_cap || gamma >= GAMMA_CAP;
    let l_mc = if w_mc > 0.0 && !over_cap {
        let (a, b) = undegrade_coefficients(gamma)?;
        let offset: Vec<f32> = zeta.data().iter().map(|&z| z * b).collect();
        let undegraded = eng.affine(&eps_pred, a, Some(&offset));
        let fused = eng.gather_mean(&undegraded, &cache.plan);
        let target = Arc::new(mc_target(&eps_uv, &cache.plan));
        Some(eng.mse_indexed(&fused, &target, &cache.mc_idx))
    } else {
        None
    };

    Ok(ClipLosses { l_diff, l_md, l_mc, gamma, t, mc_skipped: w_mc > 0.0 && over_cap })
}

/// One optimizer step over a round-robin batch. Returns the batch-mean loss
/// breakdown; errors out (before touching parameters) on a non-finite loss.
pub fn train_step(
    run: &RunConfig,
    mcfg: &ModelConfig,
    sched: &NoiseSchedule,
    store: &mut ParamStore,
    opt: &mut AdamState,
    caches: &[ClipCache],
    step: usize,
) -> Result<StepStats> {
    assert!(!caches.is_empty(), "train_step without clips");
    let t_cfg = &run.train;
    let (w_diff, w_mc, w_md) = t_cfg.effective_lambdas();
    let batch = t_cfg.batch_size;
    let inv_b = 1.0 / batch as f32;

    let mut eng = TapeEngine::new();
    let vals = engine_params(&mut eng, store);
    let mut terms: Vec<(BufId, f32)> = Vec::new();
    let mut stats = StepStats {
        step,
        l_diff: 0.0,
        l_mc: 0.0,
        l_md: 0.0,
        total: 0.0,
        gamma: 0.0,
        t: 0,
        mc_skipped: false,
    };
    for lane in 0..batch {
        let cache = &caches[(step * batch + lane) % caches.len()];
        let cl =
            clip_losses(&mut eng, run, mcfg, sched, store, &vals, cache, step, lane as u64)?;
        stats.l_diff += eng.scalar_f64(&cl.l_diff) / batch as f64;
        if w_diff > 0.0 {
            terms.push((cl.l_diff, w_diff * inv_b));
        }
        if let Some(l_md) = cl.l_md {
            stats.l_md += eng.scalar_f64(&l_md) / batch as f64;
            terms.push((l_md, w_md * inv_b));
        }
        if let Some(l_mc) = cl.l_mc {
            stats.l_mc += eng.scalar_f64(&l_mc) / batch as f64;
            terms.push((l_mc, w_mc * inv_b));
        }
        if lane == 0 {
            stats.gamma = cl.gamma;
            stats.t = cl.t;
        }
        stats.mc_skipped |= cl.mc_skipped;
    }
    let total = eng.weighted_sum(&terms);
    stats.total = eng.scalar_f64(&total);
    if !stats.total.is_finite()
        || !stats.l_diff.is_finite()
        || !stats.l_mc.is_finite()
        || !stats.l_md.is_finite()
    {
        return Err(Error::NonFinite(format!(
            "aborting at step {step}: total {} (l_diff {}, l_mc {}, l_md {}, gamma {}, t {})",
            stats.total, stats.l_diff, stats.l_mc, stats.l_md, stats.gamma, stats.t
        )));
    }
    eng.tape.backward(total)?;
    let grads: Vec<&[f32]> =
        vals.iter().map(|&id| eng.tape.gradient(id)).collect::<Result<_>>()?;
    opt.apply(store, &grads, t_cfg.learning_rate);
    Ok(stats)
}

// ── training loop ────────────────────────────────────────────────────────

/// A finished training run: final parameters, per-step history, and where
/// the checkpoint and log were written.
pub struct TrainOutcome {
    pub store: ParamStore,
    pub history: Vec<StepStats>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

fn step_checkpoint_path(base: &Path, step: usize) -> PathBuf {
    let stem = base.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
    let ext = base.extension().and_then(|s| s.to_str()).unwrap_or("anwc");
    base.with_file_name(format!("{stem}-step{step:06}.{ext}"))
}

fn checkpoint_manifest(run: &RunConfig, step: usize) -> Vec<(String, String)> {
    vec![
        ("step".to_string(), step.to_string()),
        ("preset".to_string(), run.train.preset.to_string()),
        ("seed".to_string(), run.seed.to_string()),
        ("schedule_steps".to_string(), run.schedule_steps.to_string()),
        ("beta_min".to_string(), run.beta_min.to_string()),
        ("beta_max".to_string(), run.beta_max.to_string()),
    ]
}

/// Trains from scratch on `clips`: initializes parameters from the seed's
/// parameter stream, steps the optimizer, appends one CSV row per step,
/// writes a checkpoint every interval and at the end, and echoes the config
/// into the output directory. `on_step` observes every step's breakdown.
pub fn run_training(
    run: &RunConfig,
    clips: &[Clip],
    mut on_step: impl FnMut(&StepStats),
) -> Result<TrainOutcome> {
    run.validate()?;
    if clips.is_empty() {
        return Err(Error::invalid("training needs at least one clip".to_string()));
    }
    let mcfg = ModelConfig::desk(run);
    mcfg.validate()?;
    let sched = make_schedule(run.schedule_steps, run.beta_min, run.beta_max)?;
    let mut store = init_params(&mcfg, &mut RngState::stream(run.seed, streams::PARAMS));
    let mut opt = AdamState::new(&store);
    let caches: Vec<ClipCache> =
        clips.iter().map(|c| build_clip_cache(run, c)).collect::<Result<_>>()?;

    fs::create_dir_all(&run.output_dir).map_err(|e| Error::io(&run.output_dir, e))?;
    fs::write(run.output_dir.join("config.txt"), run.render())
        .map_err(|e| Error::io(&run.output_dir, e))?;
    if let Some(parent) = run.checkpoint.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let log_path = run.output_dir.join("train_log.csv");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    writeln!(log, "step,l_diff,l_mc,l_md,total,gamma,t").map_err(|e| Error::io(&log_path, e))?;

    let mut history = Vec::with_capacity(run.train.steps);
    for step in 0..run.train.steps {
        let stats = train_step(run, &mcfg, &sched, &mut store, &mut opt, &caches, step)?;
        writeln!(
            log,
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.7},{}",
            stats.step, stats.l_diff, stats.l_mc, stats.l_md, stats.total, stats.gamma, stats.t
        )
        .map_err(|e| Error::io(&log_path, e))?;
        on_step(&stats);
        let done = step + 1;
        if done % run.train.checkpoint_interval == 0 && done != run.train.steps {
            save_checkpoint(
                &step_checkpoint_path(&run.checkpoint, done),
                &mcfg,
                &checkpoint_manifest(run, done),
                &store,
            )?;
        }
        history.push(stats);
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    save_checkpoint(&run.checkpoint, &mcfg, &checkpoint_manifest(run, run.train.steps), &store)?;
    Ok(TrainOutcome { store, history, checkpoint: run.checkpoint.clone(), log: log_path })
}

// ── gradient check ───────────────────────────────────────────────────────

/// Miniature instance shared by the finite-difference check: a one-bone rod
/// on an 8x8 canvas, latent (2, 4, 4, 4), 855 parameters.
pub struct Miniature {
    pub run: RunConfig,
    pub mcfg: ModelConfig,
    pub store: ParamStore,
    cache: ClipCache,
    // Frozen per-check constants (the taped graph's non-parameter inputs).
    z_t: Tensor,
    t: usize,
    diff_target: Arc<Vec<f32>>,
    z0_scale: f32,
    z0_offset: Vec<f32>,
    und_scale: f32,
    und_offset: Vec<f32>,
    mc_tgt: Arc<Vec<f32>>,
}

/// Run geometry of the miniature instance.
pub fn miniature_run_config() -> RunConfig {
    let mut run = RunConfig::default();
    run.height = 8;
    run.width = 8;
    run.f = 1;
    run.spatial_factor = 2;
    run.temporal_factor = 4;
    run.latent_channels = 4;
    run.texture_u = 8;
    run.texture_v = 8;
    run.clips = 1;
    run.holdout_clips = 0;
    run.train.batch_size = 1;
    run
}

fn miniature_model_config(run: &RunConfig) -> ModelConfig {
    ModelConfig {
        latent_channels: run.latent_channels,
        width1: 3,
        width2: 4,
        embed_dim: 4,
        dec_width1: 3,
        dec_width2: 3,
        spatial_factor: run.spatial_factor,
        temporal_factor: run.temporal_factor,
    }
}

/// A clip small enough for finite differences: a single swinging rod.
fn miniature_clip(run: &RunConfig, seed: u64) -> Result<Clip> {
    use crate::body::{Bone, Pose, PoseSequence, Skeleton};
    let skeleton = Skeleton {
        bones: vec![Bone {
            name: "rod".to_string(),
            parent: None,
            rest_angle: std::f32::consts::FRAC_PI_2,
            rest_length: 4.0,
            half_width: 1.6,
            chart: (0.05, 0.05, 0.95, 0.95),
        }],
    };
    skeleton.validate()?;
    let frames = (0..run.n_frames())
        .map(|k| Pose { root: (4.0, 1.5), offsets: vec![0.15 * k as f32 - 0.3] })
        .collect();
    let poses = PoseSequence::new(frames)?;
    let maps = crate::raster::rasterize_sequence(&skeleton, &poses, run.height, run.width)?;
    let mut tex_rng = RngState::stream(seed, streams::APPEARANCE);
    let texture = crate::dataset::checker_texture(run.texture_u, run.texture_v, 2, &mut tex_rng);
    let video =
        crate::raster::render_appearance_sequence(&maps, &texture, crate::dataset::BACKGROUND_COLOR);
    Ok(Clip { index: 0, seed, skeleton, poses, maps, video })
}

/// Builds the miniature graph inputs at a fixed degradation level and
/// timestep, drawing everything else from the seed.
pub fn build_miniature(gamma: f32, seed: u64) -> Result<Miniature> {
    let run = miniature_run_config();
    run.validate()?;
    let mcfg = miniature_model_config(&run);
    mcfg.validate()?;
    let clip = miniature_clip(&run, seed)?;
    let cache = build_clip_cache(&run, &clip)?;
    let sched = make_schedule(run.schedule_steps, run.beta_min, run.beta_max)?;
    let store = init_params(&mcfg, &mut RngState::stream(seed, streams::PARAMS));

    let mut tex_rng = RngState::purpose(seed, streams::TEXTURE, 0, 0);
    let eps_uv =
        sample_noise_texture(run.texture_u, run.texture_v, run.latent_channels, &mut tex_rng);
    let mut bg_rng = RngState::purpose(seed, streams::BACKGROUND, 0, 0);
    let warped = warp(&eps_uv, &cache.latent_maps, &mut bg_rng)?;
    let mut zeta_rng = RngState::purpose(seed, streams::ZETA, 0, 0);
    let zeta = sample_standard_normal(warped.shape(), &mut zeta_rng);
    let degraded = degrade(&warped, &zeta, gamma)?;
    let t = 123;
    let z_t = add_noise(&cache.z0, &degraded, t, &sched)?;
    let (eps_coef, inv_a) = predict_z0_coefficients(t, &sched);
    let z0_offset: Vec<f32> = z_t.data().iter().map(|&v| v * inv_a).collect();
    let (und_scale, und_b) = undegrade_coefficients(gamma)?;
    let und_offset: Vec<f32> = zeta.data().iter().map(|&z| z * und_b).collect();
    let mc_tgt = Arc::new(mc_target(&eps_uv, &cache.plan));
    assert!(
        !cache.mc_idx.is_empty(),
        "miniature clip must cover texels or the consistency branch is vacuous"
    );
    Ok(Miniature {
        run,
        mcfg,
        store,
        cache,
        z_t,
        t,
        diff_target: Arc::new(degraded.data().to_vec()),
        z0_scale: eps_coef,
        z0_offset,
        und_scale,
        und_offset,
        mc_tgt,
    })
}

/// The miniature objective on any engine; `vals` aligns with store order.
fn miniature_loss<E: Engine>(
    eng: &mut E,
    m: &Miniature,
    vals: &[E::Val],
    lambdas: (f32, f32, f32),
) -> E::Val {
    let (w_diff, w_mc, w_md) = lambdas;
    let z_leaf = eng.leaf(m.z_t.data());
    let c_leaf = eng.leaf(m.cache.cond.data());
    let eps_pred =
        denoiser_forward(eng, &m.mcfg, &m.store, vals, &z_leaf, &c_leaf, m.t, m.cache.grid)
            .expect("miniature denoiser forward");
    let mut terms = Vec::new();
    let l_diff = eng.mse(&eps_pred, &m.diff_target);
    terms.push((l_diff, w_diff));
    if w_md > 0.0 {
        let z0_hat = eng.affine(&eps_pred, m.z0_scale, Some(&m.z0_offset));
        let m_pred = motion_decode(eng, &m.mcfg, &m.store, vals, &z0_hat, m.cache.grid)
            .expect("miniature decoder forward");
        terms.push((eng.mse(&m_pred, &m.cache.md_target), w_md));
    }
    if w_mc > 0.0 {
        let undegraded = eng.affine(&eps_pred, m.und_scale, Some(&m.und_offset));
        let fused = eng.gather_mean(&undegraded, &m.cache.plan);
        terms.push((eng.mse_indexed(&fused, &m.mc_tgt, &m.cache.mc_idx), w_mc));
    }
    eng.weighted_sum(&terms)
}

/// Gradient-check report: worst relative disagreement between the tape and
/// central finite differences over every parameter of the miniature.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub parameter_count: usize,
    pub gamma: f32,
    pub lambdas: (f32, f32, f32),
}

/// Checks analytic gradients of the weighted objective on the miniature
/// instance against central finite differences over all parameters.
pub fn gradient_check(lambdas: (f32, f32, f32), gamma: f32, seed: u64) -> Result<GradCheckReport> {
    let m = build_miniature(gamma, seed)?;
    let inputs: Vec<Vec<f32>> =
        m.store.entries().iter().map(|(_, t)| t.data().to_vec()).collect();
    let parameter_count = inputs.iter().map(Vec::len).sum();
    // Step 1e-3 keeps the quotient inside one linear piece of the rectified
    // decoder almost everywhere; the floor at the same scale absorbs the
    // f32 rounding that dominates near-zero gradients (the conv biases
    // feeding a normalization have exactly-zero true gradient, for one).
    let max_rel_error = finite_difference_check(&inputs, 1e-3, 1e-3, |tape, ids| {
        let mut eng = TapeEngine { tape: std::mem::replace(tape, GradTape::new()) };
        let loss = miniature_loss(&mut eng, &m, ids, lambdas);
        *tape = std::mem::replace(&mut eng.tape, GradTape::new());
        loss
    })?;
    Ok(GradCheckReport { max_rel_error, parameter_count, gamma, lambdas })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_clip;
    use crate::noisefield::unwarp_fuse;

    // ── loss oracles ─────────────────────────────────────────────────────

    #[test]
    fn loss_diff_examples_and_oracle() {
        let mut rng = RngState::seed(1);
        let a = sample_standard_normal(&[2, 3, 3, 2], &mut rng);
        assert_eq!(loss_diff(&a, &a).unwrap(), 0.0);

        let zeros = Tensor::zeros(&[4, 5]);
        let ones = Tensor::from_vec(&[4, 5], vec![1.0; 20]).unwrap();
        assert_eq!(loss_diff(&zeros, &ones).unwrap(), 1.0);

        let b = sample_standard_normal(&[2, 3, 3, 2], &mut rng);
        // Two-line independent oracle.
        let ss: f64 =
            a.data().iter().zip(b.data()).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum();
        let oracle = ss / a.data().len() as f64;
        assert!((loss_diff(&a, &b).unwrap() - oracle).abs() < 1e-6);

        assert!(loss_diff(&a, &zeros).is_err(), "shape mismatch must fail");
    }

    fn tiny_map(h: usize, w: usize, body: &[(usize, usize, f32, f32)]) -> MotionMap {
        let mut data = vec![0.0f32; h * w * MAP_CHANNELS];
        for &(y, x, u, v) in body {
            let o = (y * w + x) * MAP_CHANNELS;
            data[o] = u;
            data[o + 1] = v;
            data[o + 2] = 1.0;
            data[o + 3] = 1.0;
        }
        MotionMap { data: Tensor::from_vec(&[h, w, MAP_CHANNELS], data).unwrap() }
    }

    #[test]
    fn loss_md_examples_and_masking() {
        let map = tiny_map(2, 2, &[(0, 0, 0.25, 0.75)]);
        let maps = vec![map];
        let target = md_target(&maps);
        assert_eq!(target.shape(), &[1, 2, 2, 3]);
        assert_eq!(loss_md(&maps, &target, false).unwrap(), 0.0);

        // All-background maps against a zero prediction.
        let empty = vec![tiny_map(2, 2, &[])];
        let zeros = Tensor::zeros(&[1, 2, 2, 3]);
        assert_eq!(loss_md(&empty, &zeros, false).unwrap(), 0.0);

        // A wrong background pixel hurts the full loss but not the masked one.
        let mut off = target.data().to_vec();
        off[3 * 3] += 0.5; // pixel (1,1) is background
        let off = Tensor::from_vec(&[1, 2, 2, 3], off).unwrap();
        assert!(loss_md(&maps, &off, false).unwrap() > 0.0);
        assert_eq!(loss_md(&maps, &off, true).unwrap(), 0.0);

        let mut rng = RngState::seed(2);
        let pred = sample_standard_normal(&[1, 2, 2, 3], &mut rng);
        let ss: f64 = pred
            .data()
            .iter()
            .zip(target.data())
            .map(|(&x, &y)| ((x - y) as f64).powi(2))
            .sum();
        let oracle = ss / 12.0;
        assert!((loss_md(&maps, &pred, false).unwrap() - oracle).abs() < 1e-6);

        assert!(loss_md(&maps, &zeros.clone(), false).is_ok());
        let bad = Tensor::zeros(&[2, 2, 2, 3]);
        assert!(loss_md(&maps, &bad, false).is_err());
    }

    #[test]
    fn loss_mc_roundtrip_empty_and_single_texel() {
        // Perfect prediction roundtrip: fused texture equals the original on
        // covered texels, so the loss vanishes.
        let mut rng = RngState::seed(3);
        let tex = sample_noise_texture(16, 16, 2, &mut rng);
        let maps = vec![tiny_map(8, 8, &[(1, 1, 0.1, 0.2), (2, 5, 0.8, 0.3)])];
        let mut bg = RngState::seed(4);
        let warped = warp(&tex, &maps, &mut bg).unwrap();
        let (fused, coverage) = unwarp_fuse(&warped, &maps, 16, 16).unwrap();
        assert!(loss_mc(&tex, &fused, &coverage).unwrap() < 1e-6);

        let empty = Tensor::zeros(&[16, 16, 2]);
        assert_eq!(loss_mc(&tex, &empty, &vec![0; 256]).unwrap(), 0.0);

        // One covered texel, channel values (a, b) vs (a, a): MSE is the
        // channel mean of the squared gaps.
        let mut one_cov = vec![0u32; 256];
        one_cov[37] = 3;
        let mut fused_one = vec![0.0f32; 256 * 2];
        let mut tex_one = vec![0.0f32; 256 * 2];
        tex_one[37 * 2] = 1.5;
        tex_one[37 * 2 + 1] = -0.5;
        fused_one[37 * 2] = 1.0;
        fused_one[37 * 2 + 1] = -0.5;
        let tex_t = Tensor::from_vec(&[16, 16, 2], tex_one).unwrap();
        let fused_t = Tensor::from_vec(&[16, 16, 2], fused_one).unwrap();
        let got = loss_mc(&tex_t, &fused_t, &one_cov).unwrap();
        assert!((got - 0.125).abs() < 1e-9, "(0.5^2 + 0) / 2 = 0.125, got {got}");

        let wrong_shape = Tensor::zeros(&[8, 8, 2]);
        assert!(loss_mc(&tex_t, &wrong_shape, &one_cov).is_err(), "shape mismatch");
        assert!(loss_mc(&tex_t, &fused_t, &[0u32; 8]).is_err(), "coverage length");
    }

    #[test]
    fn total_loss_weighting_matches_contract() {
        let cfg = RunConfig::default().train;
        assert_eq!(total_loss(1.0, 2.0, 4.0, &cfg), 4.0);

        let mut zeroed = cfg.clone();
        zeroed.lambda_diff = 0.0;
        zeroed.lambda_mc = 0.0;
        zeroed.lambda_md = 0.0;
        assert_eq!(total_loss(1.0, 2.0, 4.0, &zeroed), 0.0);

        let mut base = cfg.clone();
        base.preset = crate::config::Preset::Base;
        assert_eq!(total_loss(1.0, 2.0, 4.0, &base), 1.0, "base keeps only the diffusion term");
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mcfg = miniature_model_config(&miniature_run_config());
        let mut store = init_params(&mcfg, &mut RngState::stream(5, streams::PARAMS));
        let before = store.tensor("den.conv1.w").data().to_vec();
        let mut opt = AdamState::new(&store);
        let grads: Vec<Vec<f32>> = store
            .entries()
            .iter()
            .map(|(_, t)| vec![1.0f32; t.data().len()])
            .collect();
        let grad_refs: Vec<&[f32]> = grads.iter().map(|g| g.as_slice()).collect();
        opt.apply(&mut store, &grad_refs, 1e-2);
        // Bias-corrected first step with unit gradient is lr / (1 + eps).
        for (b, a) in before.iter().zip(store.tensor("den.conv1.w").data()) {
            assert!((b - a - 1e-2).abs() < 1e-6, "step {b} -> {a}");
        }
    }

    // ── cache and step behavior ──────────────────────────────────────────

    fn small_run(dir: &Path) -> RunConfig {
        let mut run = RunConfig::default();
        run.height = 48;
        run.width = 64;
        run.f = 1;
        run.clips = 1;
        run.holdout_clips = 0;
        run.train.batch_size = 1;
        run.train.steps = 50;
        run.data_dir = dir.join("data");
        run.output_dir = dir.join("out");
        run.checkpoint = dir.join("out/model.anwc");
        run.validate().unwrap();
        run
    }

    #[test]
    fn clip_cache_shapes_and_conditioning_consistency() {
        let dir = tempfile::tempdir().unwrap();
        let run = small_run(dir.path());
        let clip = generate_clip(&run, 0, 21).unwrap();
        let cache = build_clip_cache(&run, &clip).unwrap();
        assert_eq!(cache.z0.shape(), &[2, 6, 8, 8]);
        assert_eq!(cache.cond.shape(), &[6, 8, 8]);
        assert_eq!(cache.grid, LatentGrid { frames: 2, height: 6, width: 8 });
        // The conditioning latent is exactly the clip latent's first frame:
        // both encode frame 0 alone.
        assert_eq!(cache.cond.data(), &cache.z0.data()[..6 * 8 * 8]);
        assert_eq!(cache.latent_maps.len(), 2);
        assert!(!cache.mc_idx.is_empty(), "the puppet must cover latent texels");
        assert_eq!(cache.md_target.len(), 5 * 48 * 64 * 3);
    }

    #[test]
    fn overfitting_one_clip_decreases_total_loss() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = small_run(dir.path());
        run.train.steps = 60;
        run.train.learning_rate = 3e-3;
        let clip = generate_clip(&run, 0, 33).unwrap();
        let outcome = run_training(&run, &[clip], |_| {}).unwrap();
        // The per-step draws (gamma, timestep, textures) make single steps
        // noisy; compare early and late windows instead.
        let mean = |w: &[StepStats]| {
            w.iter().map(|s| s.total).sum::<f64>() / w.len() as f64
        };
        let early = mean(&outcome.history[..10]);
        let late = mean(&outcome.history[50..]);
        assert!(
            late < early,
            "60 overfit steps should reduce loss: {early} -> {late}"
        );
        assert!(outcome.history.iter().all(|s| s.total.is_finite()));

        // Log file: header plus one row per step, parseable back.
        let text = std::fs::read_to_string(&outcome.log).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,l_diff,l_mc,l_md,total,gamma,t");
        assert_eq!(lines.len(), 61);
        for (i, line) in lines[1..].iter().enumerate() {
            let cols: Vec<&str> = line.split(',').collect();
            assert_eq!(cols.len(), 7);
            assert_eq!(cols[0].parse::<usize>().unwrap(), i);
            let total: f64 = cols[4].parse().unwrap();
            assert!((total - outcome.history[i].total).abs() <= 1e-8 * total.abs().max(1.0));
        }
        assert!(outcome.checkpoint.is_file());
        let echoed = std::fs::read_to_string(run.output_dir.join("config.txt")).unwrap();
        assert_eq!(echoed, run.render());
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let mut run_a = small_run(dir_a.path());
        run_a.train.steps = 8;
        let mut run_b = small_run(dir_b.path());
        run_b.train.steps = 8;
        let clip_a = generate_clip(&run_a, 0, 55).unwrap();
        let clip_b = generate_clip(&run_b, 0, 55).unwrap();
        let out_a = run_training(&run_a, &[clip_a], |_| {}).unwrap();
        let out_b = run_training(&run_b, &[clip_b], |_| {}).unwrap();
        assert_eq!(out_a.history, out_b.history, "loss trajectories must replay exactly");
        for ((n1, t1), (n2, t2)) in
            out_a.store.entries().iter().zip(out_b.store.entries())
        {
            assert_eq!(n1, n2);
            assert_eq!(t1.data(), t2.data(), "parameter {n1} diverged");
        }
    }

    #[test]
    fn over_cap_gamma_skips_consistency_and_reports_zero() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = small_run(dir.path());
        run.train.gamma_lo = 0.99;
        run.train.gamma_hi = 1.0;
        let clip = generate_clip(&run, 0, 60).unwrap();
        let mcfg = ModelConfig::desk(&run);
        let sched = make_schedule(run.schedule_steps, run.beta_min, run.beta_max).unwrap();
        let mut store = init_params(&mcfg, &mut RngState::stream(run.seed, streams::PARAMS));
        let mut opt = AdamState::new(&store);
        let caches = vec![build_clip_cache(&run, &clip).unwrap()];
        let stats =
            train_step(&run, &mcfg, &sched, &mut store, &mut opt, &caches, 0).unwrap();
        assert!(stats.gamma > 0.95);
        assert!(stats.mc_skipped, "gamma beyond the cap must flag the skip");
        assert_eq!(stats.l_mc, 0.0);
        assert!(stats.l_diff > 0.0);
    }

    #[test]
    fn jaml_preset_never_runs_the_consistency_branch() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = small_run(dir.path());
        run.train.preset = crate::config::Preset::Jaml;
        run.train.steps = 3;
        let clip = generate_clip(&run, 0, 61).unwrap();
        let outcome = run_training(&run, &[clip], |_| {}).unwrap();
        for s in &outcome.history {
            assert_eq!(s.l_mc, 0.0);
            assert!(!s.mc_skipped, "an inactive branch is not a skip");
            assert!(s.l_md > 0.0, "the motion branch trains under jaml");
        }
    }

    #[test]
    fn interval_checkpoints_appear_alongside_the_final_one() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = small_run(dir.path());
        run.train.steps = 4;
        run.train.checkpoint_interval = 2;
        let clip = generate_clip(&run, 0, 62).unwrap();
        run_training(&run, &[clip], |_| {}).unwrap();
        assert!(step_checkpoint_path(&run.checkpoint, 2).is_file());
        assert!(!step_checkpoint_path(&run.checkpoint, 4).is_file(), "final step saves to the base path");
        assert!(run.checkpoint.is_file());
        let (_, extra, _) = crate::diffusion::model::load_checkpoint(&run.checkpoint).unwrap();
        let get = |k: &str| extra.iter().find(|(key, _)| key == k).map(|(_, v)| v.as_str());
        assert_eq!(get("step"), Some("4"));
        assert_eq!(get("preset"), Some("full"));
    }

    // ── gradient checks ──────────────────────────────────────────────────

    #[test]
    fn full_objective_gradients_match_finite_differences() {
        let report = gradient_check((1.0, 0.5, 0.5), 0.3, 11).unwrap();
        assert!(report.parameter_count <= 1000, "miniature budget");
        assert!(
            report.max_rel_error < 1e-3,
            "max relative error {} over {} parameters",
            report.max_rel_error,
            report.parameter_count
        );
    }

    #[test]
    fn diffusion_only_gradients_match_finite_differences() {
        let report = gradient_check((1.0, 0.0, 0.0), 0.3, 12).unwrap();
        assert!(report.max_rel_error < 1e-3, "max relative error {}", report.max_rel_error);
    }

    #[test]
    fn zero_initialized_projection_leaves_no_dead_graph() {
        let m = build_miniature(0.3, 13).unwrap();
        let lambdas = (1.0, 0.5, 0.5);
        let nonzero = |g: &[f32]| g.iter().any(|&v| v != 0.0);

        let mut eng = TapeEngine::new();
        let vals = engine_params(&mut eng, &m.store);
        let loss = miniature_loss(&mut eng, &m, &vals, lambdas);
        eng.tape.backward(loss).unwrap();
        // The zeroed projection blocks gradients into earlier denoiser
        // layers on the very first step, but its own parameters and the
        // decoder all receive signal, so one update revives the chain.
        let grad = |name: &str| eng.tape.gradient(vals[m.store.index(name)]).unwrap();
        assert!(nonzero(grad("den.out.w")), "projection weights get gradient at init");
        assert!(nonzero(grad("den.out.b")), "projection bias gets gradient at init");
        assert!(nonzero(grad("dec.conv1.w")), "decoder trains from the start");

        let mut store = m.store.clone();
        let mut opt = AdamState::new(&store);
        let grads: Vec<&[f32]> =
            vals.iter().map(|&id| eng.tape.gradient(id).unwrap()).collect();
        opt.apply(&mut store, &grads, 1e-3);
        drop(grads);

        let woken = Miniature { store, ..m };
        let mut eng2 = TapeEngine::new();
        let vals2 = engine_params(&mut eng2, &woken.store);
        let loss2 = miniature_loss(&mut eng2, &woken, &vals2, lambdas);
        eng2.tape.backward(loss2).unwrap();
        let g_early = eng2.tape.gradient(vals2[woken.store.index("den.conv1.w")]).unwrap();
        assert!(nonzero(g_early), "after one update the first conv layer must receive gradient");
    }
}
