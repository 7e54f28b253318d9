//! Synthetic articulated-puppet clips: a humanoid skeleton driven by smooth
//! random pose sequences, rasterized to motion maps and painted with a
//! per-clip checker texture. Each clip derives from one recorded seed, so a
//! dataset is reproducible bit-for-bit from its manifest alone.

use std::fs;
use std::path::{Path, PathBuf};

use crate::body::{
    generate_poses, read_skeleton, write_skeleton, PoseSequence, Skeleton,
};
use crate::config::{parse_kv_text, RunConfig};
use crate::error::{Error, Result};
use crate::io::{read_tensor, write_ppm, write_tensor};
use crate::numeric::rng::{streams, RngState};
use crate::numeric::tensor::Tensor;
use crate::raster::{
    maps_from_tensor, rasterize_sequence, render_appearance_sequence, sequence_tensor, MotionMap,
};

/// Canvas color behind the puppet, well separated from texture colors so
/// silhouettes threshold cleanly.
pub const BACKGROUND_COLOR: [f32; 3] = [0.05, 0.05, 0.05];

/// One training or evaluation clip.
#[derive(Debug, Clone)]
pub struct Clip {
    pub index: usize,
    pub seed: u64,
    pub skeleton: Skeleton,
    pub poses: PoseSequence,
    pub maps: Vec<MotionMap>,
    /// Rendered appearance, (frames, H, W, 3) in [0, 1].
    pub video: Tensor,
}

impl Clip {
    pub fn frames(&self) -> usize {
        self.video.shape()[0]
    }

    /// First frame, the conditioning image for animation.
    pub fn reference_frame(&self) -> Tensor {
        let s = self.video.shape();
        let frame_len = s[1] * s[2] * s[3];
        Tensor::from_vec(&[s[1], s[2], s[3]], self.video.data()[..frame_len].to_vec())
            .expect("frame slice matches shape")
    }
}

/// Checkerboard appearance texture: `cells` x `cells` grid of colors drawn
/// uniformly from [0.25, 0.95] per channel, (U, V, 3).
pub fn checker_texture(tex_u: usize, tex_v: usize, cells: usize, rng: &mut RngState) -> Tensor {
    assert!(tex_u > 0 && tex_v > 0 && cells > 0, "degenerate texture request");
    let colors: Vec<[f32; 3]> = (0..cells * cells)
        .map(|_| {
            [
                rng.uniform_f32(0.25, 0.95),
                rng.uniform_f32(0.25, 0.95),
                rng.uniform_f32(0.25, 0.95),
            ]
        })
        .collect();
    let mut data = Vec::with_capacity(tex_u * tex_v * 3);
    for i in 0..tex_u {
        for j in 0..tex_v {
            let ci = (i * cells / tex_u).min(cells - 1);
            let cj = (j * cells / tex_v).min(cells - 1);
            data.extend_from_slice(&colors[ci * cells + cj]);
        }
    }
    Tensor::from_vec(&[tex_u, tex_v, 3], data).expect("shape matches data")
}

/// Root placement that centers the default humanoid on the canvas.
fn canvas_root(cfg: &RunConfig) -> (f32, f32) {
    (cfg.width as f32 / 2.0, cfg.height as f32 / 2.0 + 2.0)
}

/// Generates one clip from its seed: poses from the pose stream, appearance
/// texture from the appearance stream, both independent per clip.
pub fn generate_clip(cfg: &RunConfig, index: usize, seed: u64) -> Result<Clip> {
    let skeleton = Skeleton::default_humanoid();
    let mut pose_rng = RngState::stream(seed, streams::POSE);
    let mut poses = generate_poses(&skeleton, &mut pose_rng, cfg.n_frames(), cfg.motion_amplitude)?;
    let (rx, ry) = canvas_root(cfg);
    poses.translate(rx, ry);
    let maps = rasterize_sequence(&skeleton, &poses, cfg.height, cfg.width)?;
    let mut tex_rng = RngState::stream(seed, streams::APPEARANCE);
    let texture = checker_texture(cfg.texture_u, cfg.texture_v, 8, &mut tex_rng);
    let video = render_appearance_sequence(&maps, &texture, BACKGROUND_COLOR);
    Ok(Clip { index, seed, skeleton, poses, maps, video })
}

/// Per-clip seeds for training plus held-out clips, drawn from the dataset
/// stream of the run seed.
pub fn clip_seeds(cfg: &RunConfig) -> Vec<u64> {
    let mut rng = RngState::stream(cfg.seed, streams::DATASET);
    (0..cfg.clips + cfg.holdout_clips).map(|_| rng.next_u64()).collect()
}

/// Generates the full dataset: indices 0..clips train, the rest held out.
pub fn generate_dataset(cfg: &RunConfig) -> Result<Vec<Clip>> {
    clip_seeds(cfg)
        .into_iter()
        .enumerate()
        .map(|(i, seed)| generate_clip(cfg, i, seed))
        .collect()
}

// ── on-disk layout ───────────────────────────────────────────────────────

fn clip_dir(data_dir: &Path, index: usize) -> PathBuf {
    data_dir.join(format!("clip_{index:03}"))
}

/// Writes clips under `data_dir`: a top-level manifest listing per-clip
/// seeds and the train/holdout split, the config echoed verbatim, and one
/// subdirectory per clip (video, reference pixmap, maps, poses, skeleton,
/// manifest).
pub fn write_dataset(cfg: &RunConfig, clips: &[Clip]) -> Result<()> {
    let dir = &cfg.data_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    fs::write(dir.join("config.txt"), cfg.render()).map_err(|e| Error::io(dir, e))?;
    let mut manifest = format!(
        "[dataset]\nclips = {}\nholdout_clips = {}\n",
        cfg.clips, cfg.holdout_clips
    );
    for clip in clips {
        manifest.push_str(&format!(
            "\n[clip.{}]\nseed = {}\nholdout = {}\n",
            clip.index,
            clip.seed,
            clip.index >= cfg.clips
        ));
    }
    fs::write(dir.join("manifest.txt"), manifest).map_err(|e| Error::io(dir, e))?;
    for clip in clips {
        let cdir = clip_dir(dir, clip.index);
        fs::create_dir_all(&cdir).map_err(|e| Error::io(&cdir, e))?;
        write_tensor(&cdir.join("video.anwt"), &clip.video)?;
        // First frame as a viewable pixmap; also the conditioning input
        // when animation is driven from files rather than loaded clips.
        write_ppm(&cdir.join("reference.ppm"), &clip.reference_frame())?;
        write_tensor(&cdir.join("maps.anwt"), &sequence_tensor(&clip.maps))?;
        write_tensor(&cdir.join("poses.anwt"), &clip.poses.to_tensor())?;
        write_skeleton(&cdir.join("skeleton.txt"), &clip.skeleton)?;
        fs::write(
            cdir.join("manifest.txt"),
            format!("[clip]\nindex = {}\nseed = {}\n", clip.index, clip.seed),
        )
        .map_err(|e| Error::io(&cdir, e))?;
    }
    Ok(())
}

fn load_clip(data_dir: &Path, index: usize, seed: u64) -> Result<Clip> {
    let cdir = clip_dir(data_dir, index);
    let video = read_tensor(&cdir.join("video.anwt"))?;
    let maps = maps_from_tensor(&read_tensor(&cdir.join("maps.anwt"))?)?;
    let poses = PoseSequence::from_tensor(&read_tensor(&cdir.join("poses.anwt"))?)?;
    let skeleton = read_skeleton(&cdir.join("skeleton.txt"))?;
    if video.shape().len() != 4 || video.shape()[3] != 3 {
        return Err(Error::format(&cdir, format!("video shape {:?} is not (F,H,W,3)", video.shape())));
    }
    if video.shape()[0] != maps.len() || poses.len() != maps.len() {
        return Err(Error::format(
            &cdir,
            format!(
                "frame counts disagree: video {}, maps {}, poses {}",
                video.shape()[0],
                maps.len(),
                poses.len()
            ),
        ));
    }
    Ok(Clip { index, seed, skeleton, poses, maps, video })
}

/// Loads a dataset directory, returning (train clips, holdout clips) in
/// index order.
pub fn load_dataset(data_dir: &Path) -> Result<(Vec<Clip>, Vec<Clip>)> {
    let manifest_path = data_dir.join("manifest.txt");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut n_clips = None;
    let mut n_holdout = None;
    let mut rows: Vec<(usize, u64, bool)> = Vec::new();
    let mut pending: Option<(usize, Option<u64>, Option<bool>)> = None;
    for (section, key, value) in parse_kv_text(&text)? {
        match (section.as_str(), key.as_str()) {
            ("dataset", "clips") => n_clips = Some(parse_num::<usize>(&manifest_path, &value)?),
            ("dataset", "holdout_clips") => {
                n_holdout = Some(parse_num::<usize>(&manifest_path, &value)?)
            }
            (s, k) if s.starts_with("clip.") => {
                let index: usize = parse_num(&manifest_path, &s["clip.".len()..])?;
                if pending.map(|(i, _, _)| i) != Some(index) {
                    flush_clip_row(&manifest_path, &mut pending, &mut rows)?;
                    pending = Some((index, None, None));
                }
                let entry = pending.as_mut().expect("just set");
                match k {
                    "seed" => entry.1 = Some(parse_num(&manifest_path, &value)?),
                    "holdout" => entry.2 = Some(parse_num(&manifest_path, &value)?),
                    other => {
                        return Err(Error::format(
                            &manifest_path,
                            format!("unknown clip key {other}"),
                        ))
                    }
                }
            }
            (s, k) => {
                return Err(Error::format(&manifest_path, format!("unknown manifest key {s}.{k}")))
            }
        }
    }
    flush_clip_row(&manifest_path, &mut pending, &mut rows)?;
    let n_clips = n_clips
        .ok_or_else(|| Error::format(&manifest_path, "manifest lacks dataset.clips"))?;
    let n_holdout = n_holdout
        .ok_or_else(|| Error::format(&manifest_path, "manifest lacks dataset.holdout_clips"))?;
    if rows.len() != n_clips + n_holdout {
        return Err(Error::format(
            &manifest_path,
            format!("manifest lists {} clips, header promises {}", rows.len(), n_clips + n_holdout),
        ));
    }
    rows.sort_by_key(|&(index, _, _)| index);
    let mut train = Vec::new();
    let mut holdout = Vec::new();
    for (i, (index, seed, is_holdout)) in rows.into_iter().enumerate() {
        if index != i || is_holdout != (i >= n_clips) {
            return Err(Error::format(
                &manifest_path,
                format!("clip {index} breaks the contiguous train-then-holdout order"),
            ));
        }
        let clip = load_clip(data_dir, index, seed)?;
        if is_holdout {
            holdout.push(clip);
        } else {
            train.push(clip);
        }
    }
    Ok((train, holdout))
}

fn parse_num<T: std::str::FromStr>(path: &Path, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| Error::format(path, format!("bad value {value:?}: {e}")))
}

fn flush_clip_row(
    path: &Path,
    pending: &mut Option<(usize, Option<u64>, Option<bool>)>,
    rows: &mut Vec<(usize, u64, bool)>,
) -> Result<()> {
    if let Some((index, seed, holdout)) = pending.take() {
        let seed =
            seed.ok_or_else(|| Error::format(path, format!("clip {index} lacks a seed")))?;
        let holdout = holdout
            .ok_or_else(|| Error::format(path, format!("clip {index} lacks a holdout flag")))?;
        rows.push((index, seed, holdout));
    }
    Ok(())
}
