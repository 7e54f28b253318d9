//! Capsule rasterizer: per-frame motion maps (which surface point is
//! visible at each pixel) and deterministic ground-truth appearance frames.
//!
//! Each bone is a capsule around its axis segment. Pixel centers are tested
//! analytically; among containing bones the highest index wins, a fixed
//! painter's order standing in for depth. A covered pixel records the bone
//! chart's UV coordinates, its part id (bone index + 1; 0 is background),
//! and mask 1. Uncovered pixels are all zeros.

use crate::body::{forward_kinematics, Pose, PoseSequence, Skeleton};
use crate::error::{Error, Result};
use crate::noisefield::texel_index;
use crate::numeric::par::{env_thread_count, for_each_indexed};
use crate::numeric::tensor::Tensor;

/// Channels of a motion map: u, v, part_id, mask.
pub const MAP_CHANNELS: usize = 4;

/// One frame's motion map as an (H, W, 4) tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionMap {
    pub data: Tensor,
}

/// Per-pixel readback of a motion map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapSample {
    pub u: f32,
    pub v: f32,
    /// 0 for background, bone index + 1 otherwise.
    pub part: usize,
    pub mask: bool,
}

impl MotionMap {
    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn at(&self, y: usize, x: usize) -> MapSample {
        let base = (y * self.width() + x) * MAP_CHANNELS;
        let d = self.data.data();
        MapSample {
            u: d[base],
            v: d[base + 1],
            part: d[base + 2] as usize,
            mask: d[base + 3] != 0.0,
        }
    }
}

struct Capsule {
    a: (f32, f32),
    dir: (f32, f32),
    len: f32,
    half_width: f32,
    chart: (f32, f32, f32, f32),
}

fn capsules(skeleton: &Skeleton, pose: &Pose) -> Result<Vec<Capsule>> {
    let transforms = forward_kinematics(skeleton, pose)?;
    Ok(skeleton
        .bones
        .iter()
        .zip(&transforms)
        .map(|(bone, t)| Capsule {
            a: t.origin,
            dir: t.direction(),
            len: bone.rest_length,
            half_width: bone.half_width,
            chart: bone.chart,
        })
        .collect())
}

fn rasterize_into(caps: &[Capsule], h: usize, w: usize, out: &mut [f32]) {
    debug_assert_eq!(out.len(), h * w * MAP_CHANNELS);
    for y in 0..h {
        let py = y as f32 + 0.5;
        for x in 0..w {
            let px = x as f32 + 0.5;
            let base = (y * w + x) * MAP_CHANNELS;
            // Highest bone index wins: walk down and stop at the first hit.
            for (bi, c) in caps.iter().enumerate().rev() {
                let rel = (px - c.a.0, py - c.a.1);
                let along = rel.0 * c.dir.0 + rel.1 * c.dir.1;
                let s = (along / c.len).clamp(0.0, 1.0);
                let closest = (c.a.0 + s * c.len * c.dir.0, c.a.1 + s * c.len * c.dir.1);
                let dist2 = (px - closest.0).powi(2) + (py - closest.1).powi(2);
                if dist2 <= c.half_width * c.half_width {
                    // Signed transverse fraction; |d| <= 1 because the
                    // perpendicular component is at most the capsule radius.
                    let d = (c.dir.0 * rel.1 - c.dir.1 * rel.0) / c.half_width;
                    let (u0, v0, u1, v1) = c.chart;
                    out[base] = u0 + s * (u1 - u0);
                    out[base + 1] = 0.5 * (v0 + v1) + 0.5 * d * (v1 - v0);
                    out[base + 2] = (bi + 1) as f32;
                    out[base + 3] = 1.0;
                    break;
                }
            }
        }
    }
}

/// Rasterizes one pose. `h`, `w` must be at least 8 (callers keep them
/// divisible by the spatial downsampling factor).
pub fn rasterize_motion_map(
    skeleton: &Skeleton,
    pose: &Pose,
    h: usize,
    w: usize,
) -> Result<MotionMap> {
    assert!(h >= 8 && w >= 8, "motion maps need at least 8x8 pixels, got {h}x{w}");
    let caps = capsules(skeleton, pose)?;
    let mut data = vec![0.0f32; h * w * MAP_CHANNELS];
    rasterize_into(&caps, h, w, &mut data);
    Ok(MotionMap { data: Tensor::from_vec(&[h, w, MAP_CHANNELS], data)? })
}

/// Rasterizes every frame; frames are independent and fan out across
/// `ANW_THREADS` with bitwise-identical results for any thread count.
pub fn rasterize_sequence(
    skeleton: &Skeleton,
    seq: &PoseSequence,
    h: usize,
    w: usize,
) -> Result<Vec<MotionMap>> {
    assert!(h >= 8 && w >= 8, "motion maps need at least 8x8 pixels, got {h}x{w}");
    let caps: Vec<Vec<Capsule>> =
        seq.frames.iter().map(|pose| capsules(skeleton, pose)).collect::<Result<_>>()?;
    let mut slots: Vec<Vec<f32>> = vec![vec![0.0f32; h * w * MAP_CHANNELS]; seq.len()];
    for_each_indexed(&mut slots, env_thread_count(), |i, out| {
        rasterize_into(&caps[i], h, w, out);
    });
    slots
        .into_iter()
        .map(|data| Ok(MotionMap { data: Tensor::from_vec(&[h, w, MAP_CHANNELS], data)? }))
        .collect()
}

/// Stacks per-frame maps into one (F, H, W, 4) tensor.
pub fn sequence_tensor(maps: &[MotionMap]) -> Tensor {
    assert!(!maps.is_empty(), "no motion maps to stack");
    let (h, w) = (maps[0].height(), maps[0].width());
    let mut data = Vec::with_capacity(maps.len() * h * w * MAP_CHANNELS);
    for map in maps {
        assert_eq!(map.height(), h, "motion map heights disagree");
        assert_eq!(map.width(), w, "motion map widths disagree");
        data.extend_from_slice(map.data.data());
    }
    Tensor::from_vec(&[maps.len(), h, w, MAP_CHANNELS], data).expect("shape matches data")
}

/// Splits an (F, H, W, 4) tensor back into per-frame maps.
pub fn maps_from_tensor(t: &Tensor) -> Result<Vec<MotionMap>> {
    let shape = t.shape();
    if shape.len() != 4 || shape[3] != MAP_CHANNELS {
        return Err(Error::shape(format!(
            "motion map tensor must be (F, H, W, {MAP_CHANNELS}), got {shape:?}"
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    let per = h * w * MAP_CHANNELS;
    Ok(t.data()
        .chunks_exact(per)
        .map(|chunk| MotionMap {
            data: Tensor::from_vec(&[h, w, MAP_CHANNELS], chunk.to_vec())
                .expect("chunk length matches shape"),
        })
        .collect())
}

/// Paints one frame: body pixels sample the (U, V, 3) texture at the map's
/// UV by nearest texel (the same index rule the noise warp uses); background
/// pixels take `background`.
pub fn render_appearance(map: &MotionMap, texture: &Tensor, background: [f32; 3]) -> Tensor {
    let tshape = texture.shape();
    assert_eq!(tshape.len(), 3, "appearance texture must be (U, V, 3)");
    assert_eq!(tshape[2], 3, "appearance texture must have 3 channels");
    let (tu, tv) = (tshape[0], tshape[1]);
    let (h, w) = (map.height(), map.width());
    let tex = texture.data();
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let s = map.at(y, x);
            if s.mask {
                let (i, j) = texel_index(s.u, s.v, tu, tv);
                let base = (i * tv + j) * 3;
                data.extend_from_slice(&tex[base..base + 3]);
            } else {
                data.extend_from_slice(&background);
            }
        }
    }
    Tensor::from_vec(&[h, w, 3], data).expect("shape matches data")
}

/// Paints every frame into one (F, H, W, 3) tensor.
pub fn render_appearance_sequence(
    maps: &[MotionMap],
    texture: &Tensor,
    background: [f32; 3],
) -> Tensor {
    assert!(!maps.is_empty(), "no frames to render");
    let (h, w) = (maps[0].height(), maps[0].width());
    let mut data = Vec::with_capacity(maps.len() * h * w * 3);
    for map in maps {
        data.extend_from_slice(render_appearance(map, texture, background).data());
    }
    Tensor::from_vec(&[maps.len(), h, w, 3], data).expect("shape matches data")
}
