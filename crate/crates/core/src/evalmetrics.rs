//! Desk-scale evaluation metrics.
//!
//! Image agreement (mean absolute error and windowed structural similarity),
//! a silhouette-overlap proxy for pose adherence, and a temporal-flicker
//! proxy that re-aligns every frame into texture space through its motion
//! map and measures disagreement along surface correspondences. A report
//! bundles per-clip values with their aggregate and renders as CSV.

use crate::error::{Error, Result};
use crate::noisefield::unwarp_fuse_frames;
use crate::numeric::tensor::Tensor;
use crate::raster::MotionMap;

/// A pixel counts as silhouette when any channel differs from the background
/// by more than this.
pub const SILHOUETTE_THRESHOLD: f32 = 0.05;

// Structural-similarity stabilizers on unit dynamic range.
const SSIM_C1: f64 = 1e-4; // (0.01)^2
const SSIM_C2: f64 = 9e-4; // (0.03)^2
const SSIM_WINDOW: usize = 8;
const SSIM_STRIDE: usize = 4;

// ── image agreement ──────────────────────────────────────────────────────

/// Mean absolute difference between two equally-shaped tensors.
pub fn l1(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("l1 over {:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.data().is_empty() {
        return Err(Error::shape("l1 over empty tensors".to_string()));
    }
    let sum: f64 =
        a.data().iter().zip(b.data()).map(|(&x, &y)| ((x - y) as f64).abs()).sum();
    Ok(sum / a.data().len() as f64)
}

/// Mean absolute difference restricted to masked pixels. The mask has one
/// entry per pixel; all channels of a masked pixel contribute.
pub fn masked_l1(a: &Tensor, b: &Tensor, mask: &[bool]) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("masked l1 over {:?} vs {:?}", a.shape(), b.shape())));
    }
    let shape = a.shape();
    let channels = *shape.last().ok_or_else(|| Error::shape("masked l1 over scalars"))?;
    if channels == 0 || mask.len() * channels != a.data().len() {
        return Err(Error::shape(format!(
            "mask of {} pixels against tensor {:?}",
            mask.len(),
            shape
        )));
    }
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for (pixel, &keep) in mask.iter().enumerate() {
        if !keep {
            continue;
        }
        let at = pixel * channels;
        for ch in 0..channels {
            sum += ((a.data()[at + ch] - b.data()[at + ch]) as f64).abs();
        }
        count += channels;
    }
    if count == 0 {
        return Err(Error::invalid("masked l1 over an empty mask".to_string()));
    }
    Ok(sum / count as f64)
}

/// Structural similarity of two (H, W, C) frames in [0,1] range: uniform
/// 8x8 windows at stride 4, fully inside the frame, channel-averaged.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("ssim over {:?} vs {:?}", a.shape(), b.shape())));
    }
    let shape = a.shape();
    if shape.len() != 3 {
        return Err(Error::shape(format!("ssim frame must be (H, W, C), got {shape:?}")));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim needs frames of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let (xa, xb) = (a.data(), b.data());
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0f64;
    let mut windows = 0usize;
    let mut y = 0;
    while y + SSIM_WINDOW <= h {
        let mut x = 0;
        while x + SSIM_WINDOW <= w {
            for ch in 0..c {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0f64, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let o = ((y + dy) * w + (x + dx)) * c + ch;
                        let (va, vb) = (xa[o] as f64, xb[o] as f64);
                        sa += va;
                        sb += vb;
                        saa += va * va;
                        sbb += vb * vb;
                        sab += va * vb;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let var_a = saa / n - ma * ma;
                let var_b = sbb / n - mb * mb;
                let cov = sab / n - ma * mb;
                total += (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)
                    / ((ma * ma + mb * mb + SSIM_C1) * (var_a + var_b + SSIM_C2));
                windows += 1;
            }
            x += SSIM_STRIDE;
        }
        y += SSIM_STRIDE;
    }
    Ok(total / windows as f64)
}

/// Mean per-frame structural similarity of two (F, H, W, C) videos.
pub fn video_ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("ssim over {:?} vs {:?}", a.shape(), b.shape())));
    }
    let shape = a.shape();
    if shape.len() != 4 {
        return Err(Error::shape(format!("video must be (F, H, W, C), got {shape:?}")));
    }
    let frame_shape = [shape[1], shape[2], shape[3]];
    let per = frame_shape.iter().product::<usize>();
    let mut total = 0.0;
    for f in 0..shape[0] {
        let fa = Tensor::from_vec(&frame_shape, a.data()[f * per..(f + 1) * per].to_vec())?;
        let fb = Tensor::from_vec(&frame_shape, b.data()[f * per..(f + 1) * per].to_vec())?;
        total += ssim(&fa, &fb)?;
    }
    Ok(total / shape[0] as f64)
}

// ── silhouettes ──────────────────────────────────────────────────────────

/// Per-pixel mask of an RGB tensor: true where any channel differs from the
/// background by more than `threshold`.
pub fn silhouette(frames: &Tensor, background: [f32; 3], threshold: f32) -> Result<Vec<bool>> {
    let shape = frames.shape();
    if shape.last() != Some(&3) {
        return Err(Error::shape(format!("silhouette needs RGB, got {shape:?}")));
    }
    Ok(frames
        .data()
        .chunks_exact(3)
        .map(|px| px.iter().zip(background).any(|(&v, bg)| (v - bg).abs() > threshold))
        .collect())
}

/// Intersection over union of two masks; 1.0 when both are empty.
pub fn silhouette_iou(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("mask lengths {} vs {}", a.len(), b.len())));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

// ── temporal consistency ─────────────────────────────────────────────────

/// Mean squared difference between consecutive frames after re-aligning
/// each into (tex_u, tex_v) texture space through its motion map, restricted
/// to texels visible in both frames of a pair. A surface-consistent video
/// scores 0; i.i.d. noise scores about twice its variance.
pub fn flicker(video: &Tensor, maps: &[MotionMap], tex_u: usize, tex_v: usize) -> Result<f64> {
    let fused = unwarp_fuse_frames(video, maps, tex_u, tex_v)?;
    let channels = video.shape()[3];
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for pair in fused.windows(2) {
        let (prev, prev_cov) = &pair[0];
        let (next, next_cov) = &pair[1];
        for texel in 0..tex_u * tex_v {
            if prev_cov[texel] > 0 && next_cov[texel] > 0 {
                for ch in 0..channels {
                    let o = texel * channels + ch;
                    let d = (prev.data()[o] - next.data()[o]) as f64;
                    sum += d * d;
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        return Ok(0.0);
    }
    Ok(sum / count as f64)
}

// ── reports ──────────────────────────────────────────────────────────────

/// One clip's metric values. `masked_l1` restricts the comparison to the
/// ground-truth body, so background agreement cannot mask pose errors.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricValues {
    pub l1: f64,
    pub masked_l1: f64,
    pub ssim: f64,
    pub silhouette_iou: f64,
    pub flicker: f64,
}

impl MetricValues {
    fn validate(&self) -> Result<()> {
        if self.l1 < 0.0
            || self.masked_l1 < 0.0
            || !(-1.0..=1.0).contains(&self.ssim)
            || !(0.0..=1.0).contains(&self.silhouette_iou)
            || self.flicker < 0.0
        {
            return Err(Error::invalid(format!("metric values out of range: {self:?}")));
        }
        Ok(())
    }
}

/// Per-clip metrics plus their unweighted mean.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub per_clip: Vec<(usize, MetricValues)>,
    pub aggregate: MetricValues,
}

impl MetricReport {
    pub fn new(per_clip: Vec<(usize, MetricValues)>) -> Result<MetricReport> {
        if per_clip.is_empty() {
            return Err(Error::invalid("metric report without clips".to_string()));
        }
        let n = per_clip.len() as f64;
        let mut aggregate = MetricValues {
            l1: 0.0,
            masked_l1: 0.0,
            ssim: 0.0,
            silhouette_iou: 0.0,
            flicker: 0.0,
        };
        for (_, v) in &per_clip {
            v.validate()?;
            aggregate.l1 += v.l1 / n;
            aggregate.masked_l1 += v.masked_l1 / n;
            aggregate.ssim += v.ssim / n;
            aggregate.silhouette_iou += v.silhouette_iou / n;
            aggregate.flicker += v.flicker / n;
        }
        Ok(MetricReport { per_clip, aggregate })
    }

    /// One row per clip plus an aggregate row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("clip,l1,masked_l1,ssim,silhouette_iou,flicker\n");
        let row = |label: &str, v: &MetricValues| {
            format!(
                "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}\n",
                label, v.l1, v.masked_l1, v.ssim, v.silhouette_iou, v.flicker
            )
        };
        for (clip, v) in &self.per_clip {
            out.push_str(&row(&clip.to_string(), v));
        }
        out.push_str(&row("aggregate", &self.aggregate));
        out
    }
}
