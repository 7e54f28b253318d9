//! Animation inference, evaluation, and the degradation sweep.
//!
//! Inference mirrors the training noise path at image resolution: rasterize
//! motion maps from the driving poses, warp one fresh noise texture through
//! them, degrade at the inference level, downsample to the latent grid, and
//! run the deterministic sampler conditioned on the reference frame. With no
//! stochastic injections past the initial noise, identical inputs produce
//! bitwise-identical videos.

use std::fs;
use std::path::Path;

use crate::body::{PoseSequence, Skeleton};
use crate::config::RunConfig;
use crate::dataset::{Clip, BACKGROUND_COLOR};
use crate::diffusion::codec::{decode_latent, encode_latent};
use crate::diffusion::model::{LatentGrid, ModelConfig, ParamStore};
use crate::diffusion::sampler::{ddim_sample, ddim_steps, ModelPredictor};
use crate::diffusion::schedule::make_schedule;
use crate::error::{Error, Result};
use crate::evalmetrics::{
    flicker, l1, masked_l1, silhouette, silhouette_iou, video_ssim, MetricReport, MetricValues,
    SILHOUETTE_THRESHOLD,
};
use crate::io::{write_ppm, write_tensor};
use crate::noisefield::{
    degrade, downsample_spatiotemporal, sample_noise_texture, warp_with_background,
    BackgroundMode,
};
use crate::numeric::rng::{sample_standard_normal, streams, RngState};
use crate::numeric::tensor::Tensor;
use crate::raster::{rasterize_sequence, MotionMap};

// ── animation ────────────────────────────────────────────────────────────

/// A generated clip: the decoded video and the motion maps that drove it.
pub struct Animation {
    /// (4f+1, H, W, 3), clamped to [0, 1].
    pub video: Tensor,
    pub maps: Vec<MotionMap>,
}

/// Renders a pose sequence into a video: warped-noise inference conditioned
/// on one reference frame. All randomness comes from `seed`, so a rerun with
/// the same inputs is bitwise identical.
pub fn animate(
    run: &RunConfig,
    mcfg: &ModelConfig,
    store: &ParamStore,
    reference: &Tensor,
    skeleton: &Skeleton,
    poses: &PoseSequence,
    seed: u64,
) -> Result<Animation> {
    let expected = ModelConfig::desk(run);
    if *mcfg != expected {
        return Err(Error::config(format!(
            "checkpoint model '{}' does not fit this run's '{}'",
            mcfg.signature(),
            expected.signature()
        )));
    }
    if reference.shape() != [run.height, run.width, 3] {
        return Err(Error::shape(format!(
            "reference frame {:?} does not match {}x{}",
            reference.shape(),
            run.height,
            run.width
        )));
    }
    if poses.frames.len() != run.n_frames() {
        return Err(Error::invalid(format!(
            "pose sequence has {} frames, run expects {}",
            poses.frames.len(),
            run.n_frames()
        )));
    }

    let maps = rasterize_sequence(skeleton, poses, run.height, run.width)?;
    let (s, r, c) = (run.spatial_factor, run.temporal_factor, run.latent_channels);

    // Motion-conditioned initial noise at image resolution, then degraded
    // and brought down to the latent grid.
    let mut tex_rng = RngState::purpose(seed, streams::TEXTURE, 0, 0);
    let eps_uv = sample_noise_texture(run.texture_u, run.texture_v, c, &mut tex_rng);
    let mut bg_rng = RngState::purpose(seed, streams::BACKGROUND, 0, 0);
    let bg_mode =
        if run.static_background { BackgroundMode::Static } else { BackgroundMode::PerFrame };
    let warped = warp_with_background(&eps_uv, &maps, &mut bg_rng, bg_mode)?;
    let mut zeta_rng = RngState::purpose(seed, streams::ZETA, 0, 0);
    let zeta = sample_standard_normal(warped.shape(), &mut zeta_rng);
    let degraded = degrade(&warped, &zeta, run.infer_gamma)?;
    let init = downsample_spatiotemporal(&degraded, s, r)?;

    let ref_video =
        Tensor::from_vec(&[1, run.height, run.width, 3], reference.data().to_vec())?;
    let cond_latent = encode_latent(&ref_video, s, r, c)?;
    let cs = cond_latent.shape();
    let cond = Tensor::from_vec(&[cs[1], cs[2], cs[3]], cond_latent.data().to_vec())?;

    let sched = make_schedule(run.schedule_steps, run.beta_min, run.beta_max)?;
    let steps = ddim_steps(run.schedule_steps, run.sample_steps)?;
    let grid = LatentGrid {
        frames: run.latent_frames(),
        height: run.latent_height(),
        width: run.latent_width(),
    };
    let mut predictor = ModelPredictor::new(mcfg, store, grid);
    let latent = ddim_sample(&mut predictor, &init, &cond, &sched, &steps)?;

    let decoded = decode_latent(&latent, s, r)?;
    let video = Tensor::from_vec(
        decoded.shape(),
        decoded.data().iter().map(|&v| v.clamp(0.0, 1.0)).collect(),
    )?;
    Ok(Animation { video, maps })
}

/// `animate` driven by a dataset clip: its first frame conditions, its poses
/// drive, and its generation seed keys the inference noise.
pub fn animate_clip(
    run: &RunConfig,
    mcfg: &ModelConfig,
    store: &ParamStore,
    clip: &Clip,
) -> Result<Animation> {
    animate(run, mcfg, store, &clip.reference_frame(), &clip.skeleton, &clip.poses, clip.seed)
}

/// Writes an animation to `dir`: one P6 pixmap per frame, the video tensor,
/// a manifest, and a verbatim config echo.
pub fn write_animation(dir: &Path, run: &RunConfig, anim: &Animation) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let shape = anim.video.shape();
    let (frames, h, w) = (shape[0], shape[1], shape[2]);
    let per = h * w * 3;
    for f in 0..frames {
        let frame = Tensor::from_vec(
            &[h, w, 3],
            anim.video.data()[f * per..(f + 1) * per].to_vec(),
        )?;
        write_ppm(&dir.join(format!("frame_{f:03}.ppm")), &frame)?;
    }
    write_tensor(&dir.join("video.anwt"), &anim.video)?;
    let manifest = format!(
        "frames = {frames}\nheight = {h}\nwidth = {w}\ngamma = {}\nsample_steps = {}\n",
        run.infer_gamma, run.sample_steps
    );
    fs::write(dir.join("manifest.txt"), manifest).map_err(|e| Error::io(dir, e))?;
    fs::write(dir.join("config.txt"), run.render()).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

// ── evaluation ───────────────────────────────────────────────────────────

/// Scores a generated video against a clip's ground truth: image agreement,
/// silhouette overlap, and flicker along the clip's true motion.
pub fn evaluate_clip(run: &RunConfig, generated: &Tensor, clip: &Clip) -> Result<MetricValues> {
    let truth = &clip.video;
    let gen_mask = silhouette(generated, BACKGROUND_COLOR, SILHOUETTE_THRESHOLD)?;
    let truth_mask = silhouette(truth, BACKGROUND_COLOR, SILHOUETTE_THRESHOLD)?;
    Ok(MetricValues {
        l1: l1(generated, truth)?,
        masked_l1: masked_l1(generated, truth, &truth_mask)?,
        ssim: video_ssim(generated, truth)?,
        silhouette_iou: silhouette_iou(&gen_mask, &truth_mask)?,
        flicker: flicker(generated, &clip.maps, run.texture_u, run.texture_v)?,
    })
}

/// Scores one generated video per clip, indexwise, into a report.
pub fn evaluate_clips(
    run: &RunConfig,
    generated: &[Tensor],
    clips: &[Clip],
) -> Result<MetricReport> {
    if generated.len() != clips.len() {
        return Err(Error::invalid(format!(
            "{} generated videos against {} clips",
            generated.len(),
            clips.len()
        )));
    }
    let mut rows = Vec::with_capacity(clips.len());
    for (video, clip) in generated.iter().zip(clips) {
        rows.push((clip.index, evaluate_clip(run, video, clip)?));
    }
    MetricReport::new(rows)
}

// ── degradation sweep ────────────────────────────────────────────────────

/// One sweep point: the inference degradation level and its report.
pub struct SweepEntry {
    pub gamma: f32,
    pub report: MetricReport,
}

/// Animates and evaluates every clip at each degradation level. The noise
/// seeds are per-clip constants, so entries differ only in gamma.
pub fn sweep_gamma(
    run: &RunConfig,
    mcfg: &ModelConfig,
    store: &ParamStore,
    clips: &[Clip],
    gammas: &[f32],
) -> Result<Vec<SweepEntry>> {
    if gammas.is_empty() {
        return Err(Error::invalid("sweep needs at least one gamma".to_string()));
    }
    if clips.is_empty() {
        return Err(Error::invalid("sweep needs at least one clip".to_string()));
    }
    let mut entries = Vec::with_capacity(gammas.len());
    for &gamma in gammas {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::invalid(format!("sweep gamma {gamma} outside [0, 1]")));
        }
        let mut point = run.clone();
        point.infer_gamma = gamma;
        let mut generated = Vec::with_capacity(clips.len());
        for clip in clips {
            generated.push(animate_clip(&point, mcfg, store, clip)?.video);
        }
        entries.push(SweepEntry { gamma, report: evaluate_clips(&point, &generated, clips)? });
    }
    Ok(entries)
}

/// One CSV over all sweep points: per-clip rows plus an aggregate row each.
pub fn sweep_csv(entries: &[SweepEntry]) -> String {
    let mut out = String::from("gamma,clip,l1,masked_l1,ssim,silhouette_iou,flicker\n");
    for entry in entries {
        for line in entry.report.to_csv().lines().skip(1) {
            out.push_str(&format!("{},{line}\n", entry.gamma));
        }
    }
    out
}

/// The degradation level whose aggregate structural similarity is best.
pub fn best_ssim_gamma(entries: &[SweepEntry]) -> Option<f32> {
    entries
        .iter()
        .max_by(|a, b| {
            a.report
                .aggregate
                .ssim
                .partial_cmp(&b.report.aggregate.ssim)
                .expect("ssim is finite")
        })
        .map(|e| e.gamma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_clip;
    use crate::diffusion::model::init_params;
    use crate::io::read_ppm;

    fn small_run() -> RunConfig {
        let mut run = RunConfig::default();
        run.height = 48;
        run.width = 64;
        run.f = 1;
        run.validate().unwrap();
        run
    }

    fn fresh_model(run: &RunConfig, seed: u64) -> (ModelConfig, ParamStore) {
        let mcfg = ModelConfig::desk(run);
        let store = init_params(&mcfg, &mut RngState::stream(seed, streams::PARAMS));
        (mcfg, store)
    }

    #[test]
    fn animation_is_deterministic_bounded_and_shaped() {
        let run = small_run();
        let (mcfg, store) = fresh_model(&run, 5);
        let clip = generate_clip(&run, 0, 81).unwrap();
        let a = animate_clip(&run, &mcfg, &store, &clip).unwrap();
        let b = animate_clip(&run, &mcfg, &store, &clip).unwrap();
        assert_eq!(a.video.shape(), &[5, 48, 64, 3]);
        assert_eq!(a.video.data(), b.video.data(), "same inputs must replay bitwise");
        assert!(a.video.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(a.maps.len(), 5);
    }

    #[test]
    fn full_degradation_ignores_the_pose_sequence() {
        let mut run = small_run();
        run.infer_gamma = 1.0;
        let (mcfg, store) = fresh_model(&run, 5);
        // Two clips with different motions but one shared reference frame
        // and one shared inference seed.
        let clip_a = generate_clip(&run, 0, 82).unwrap();
        let clip_b = generate_clip(&run, 1, 83).unwrap();
        let reference = clip_a.reference_frame();
        let a =
            animate(&run, &mcfg, &store, &reference, &clip_a.skeleton, &clip_a.poses, 9).unwrap();
        let b =
            animate(&run, &mcfg, &store, &reference, &clip_b.skeleton, &clip_b.poses, 9).unwrap();
        assert_ne!(
            crate::raster::sequence_tensor(&a.maps).data(),
            crate::raster::sequence_tensor(&b.maps).data(),
            "the driving motions differ"
        );
        assert_eq!(
            a.video.data(),
            b.video.data(),
            "at gamma = 1 the initial noise carries no motion, only conditioning"
        );
    }

    #[test]
    fn animate_rejects_mismatched_model_reference_and_poses() {
        let run = small_run();
        let (_, store) = fresh_model(&run, 5);
        let clip = generate_clip(&run, 0, 84).unwrap();

        let mut other = ModelConfig::desk(&run);
        other.width1 += 1;
        let err = animate_clip(&run, &other, &store, &clip);
        assert!(err.is_err(), "foreign model configuration must be rejected");

        let mcfg = ModelConfig::desk(&run);
        let bad_ref = Tensor::zeros(&[32, 64, 3]);
        assert!(animate(&run, &mcfg, &store, &bad_ref, &clip.skeleton, &clip.poses, 1).is_err());

        let short = PoseSequence::new(clip.poses.frames[..3].to_vec()).unwrap();
        let reference = clip.reference_frame();
        assert!(animate(&run, &mcfg, &store, &reference, &clip.skeleton, &short, 1).is_err());
    }

    #[test]
    fn ground_truth_evaluates_as_perfect() {
        let run = small_run();
        let clip = generate_clip(&run, 0, 85).unwrap();
        let v = evaluate_clip(&run, &clip.video, &clip).unwrap();
        assert_eq!(v.l1, 0.0);
        assert_eq!(v.masked_l1, 0.0);
        assert_eq!(v.ssim, 1.0);
        assert_eq!(v.silhouette_iou, 1.0);
        assert!(v.flicker < 1e-6);
    }

    #[test]
    fn report_covers_each_clip_plus_aggregate() {
        let run = small_run();
        let clips = vec![generate_clip(&run, 0, 86).unwrap(), generate_clip(&run, 1, 87).unwrap()];
        let generated = vec![clips[0].video.clone(), clips[1].video.clone()];
        let report = evaluate_clips(&run, &generated, &clips).unwrap();
        assert_eq!(report.per_clip.len(), 2);
        assert_eq!(report.to_csv().lines().count(), 4, "clip rows + aggregate + header");
        assert!(evaluate_clips(&run, &generated[..1], &clips).is_err());
    }

    #[test]
    fn sweep_scores_every_gamma_and_picks_the_best() {
        let run = small_run();
        let (mcfg, store) = fresh_model(&run, 5);
        let clips = vec![generate_clip(&run, 0, 88).unwrap()];
        let entries = sweep_gamma(&run, &mcfg, &store, &clips, &[0.1, 1.0]).unwrap();
        assert_eq!(entries.len(), 2);
        let csv = sweep_csv(&entries);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "gamma,clip,l1,masked_l1,ssim,silhouette_iou,flicker");
        assert_eq!(lines.len(), 1 + 2 * 2, "per gamma: one clip row and one aggregate row");
        assert!(lines[1].starts_with("0.1,0,"));
        assert!(lines[2].starts_with("0.1,aggregate,"));
        let best = best_ssim_gamma(&entries).unwrap();
        assert!(best == 0.1 || best == 1.0);
        assert!(sweep_gamma(&run, &mcfg, &store, &clips, &[1.5]).is_err());
        assert!(sweep_gamma(&run, &mcfg, &store, &clips, &[]).is_err());
    }

    #[test]
    fn written_animation_roundtrips_through_pixmaps() {
        let dir = tempfile::tempdir().unwrap();
        let run = small_run();
        let (mcfg, store) = fresh_model(&run, 5);
        let clip = generate_clip(&run, 0, 89).unwrap();
        let anim = animate_clip(&run, &mcfg, &store, &clip).unwrap();
        let out = dir.path().join("anim");
        write_animation(&out, &run, &anim).unwrap();

        for f in 0..5 {
            assert!(out.join(format!("frame_{f:03}.ppm")).is_file());
        }
        assert!(out.join("video.anwt").is_file());
        assert_eq!(fs::read_to_string(out.join("config.txt")).unwrap(), run.render());
        assert!(fs::read_to_string(out.join("manifest.txt")).unwrap().contains("frames = 5"));

        // Pixmap quantization stays within half a level of the tensor.
        let frame0 = read_ppm(&out.join("frame_000.ppm")).unwrap();
        let per = 48 * 64 * 3;
        for (a, b) in frame0.data().iter().zip(&anim.video.data()[..per]) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        let stored = crate::io::read_tensor(&out.join("video.anwt")).unwrap();
        assert_eq!(stored.data(), anim.video.data());
    }
}
