//! Noise transport along articulated motion: a time-independent
//! standard-normal UV texture, the forward warp that copies each covered
//! pixel's texel value into image space, a variance-preserving degradation
//! blend with its exact algebraic inverse, nearest-neighbor spatiotemporal
//! downsampling, and the averaging inverse warp back onto the texture.

use crate::error::{Error, Result};
use crate::numeric::kernels::GatherMeanPlan;
use crate::numeric::rng::{sample_standard_normal, RngState};
use crate::numeric::tensor::Tensor;
use crate::raster::MotionMap;

/// Reversal divides by (1 - gamma); at or above this cap it refuses to run.
pub const GAMMA_CAP: f32 = 0.95;

// ── texel addressing ─────────────────────────────────────────────────────

/// Nearest-texel rule shared by the forward and inverse warps:
/// i = min(floor(u * U), U - 1), likewise for j. u = 1.0 clamps to the
/// last texel instead of falling off the grid.
pub fn texel_index(u: f32, v: f32, tex_u: usize, tex_v: usize) -> (usize, usize) {
    debug_assert!((0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v), "uv ({u}, {v}) out of [0,1]");
    let i = ((u * tex_u as f32).floor() as isize).clamp(0, tex_u as isize - 1) as usize;
    let j = ((v * tex_v as f32).floor() as isize).clamp(0, tex_v as isize - 1) as usize;
    (i, j)
}

/// Draws a (U, V, C) standard-normal texture, u-major: value (i, j, c) lives
/// at i*V*C + j*C + c. One texture serves a whole sequence.
pub fn sample_noise_texture(
    tex_u: usize,
    tex_v: usize,
    channels: usize,
    rng: &mut RngState,
) -> Tensor {
    sample_standard_normal(&[tex_u, tex_v, channels], rng)
}

// ── forward warp ─────────────────────────────────────────────────────────

/// Where background pixels get their noise from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BackgroundMode {
    /// Fresh i.i.d. noise per pixel per frame (the default reading).
    #[default]
    PerFrame,
    /// One noise field drawn up front and reused by every frame.
    Static,
}

/// Warps the texture into image space: each covered pixel copies its texel's
/// value across all channels; background pixels draw i.i.d. standard normals
/// from `rng_bg` in frame-major, row-major, column-major, channel-minor
/// order (only background pixels consume the stream).
pub fn warp(texture: &Tensor, maps: &[MotionMap], rng_bg: &mut RngState) -> Result<Tensor> {
    warp_with_background(texture, maps, rng_bg, BackgroundMode::PerFrame)
}

/// `warp` with an explicit background mode. Covered pixels are identical in
/// both modes; only the background draws differ.
pub fn warp_with_background(
    texture: &Tensor,
    maps: &[MotionMap],
    rng_bg: &mut RngState,
    mode: BackgroundMode,
) -> Result<Tensor> {
    let tshape = texture.shape();
    if tshape.len() != 3 {
        return Err(Error::shape(format!("noise texture must be (U, V, C), got {tshape:?}")));
    }
    let (tu, tv, c) = (tshape[0], tshape[1], tshape[2]);
    if maps.is_empty() {
        return Err(Error::invalid("warp needs at least one motion map"));
    }
    let (h, w) = (maps[0].height(), maps[0].width());
    for map in maps {
        if map.height() != h || map.width() != w {
            return Err(Error::shape("motion maps disagree on resolution".to_string()));
        }
    }
    // The static field is drawn in the same row-major, channel-minor order a
    // single frame would use, before any frame is visited.
    let static_bg = match mode {
        BackgroundMode::PerFrame => None,
        BackgroundMode::Static => {
            let mut field = vec![0.0f32; h * w * c];
            rng_bg.fill_normal(&mut field);
            Some(field)
        }
    };
    let tex = texture.data();
    let mut data = Vec::with_capacity(maps.len() * h * w * c);
    for map in maps {
        for y in 0..h {
            for x in 0..w {
                let s = map.at(y, x);
                if s.mask {
                    let (i, j) = texel_index(s.u, s.v, tu, tv);
                    let base = (i * tv + j) * c;
                    data.extend_from_slice(&tex[base..base + c]);
                } else if let Some(field) = &static_bg {
                    let base = (y * w + x) * c;
                    data.extend_from_slice(&field[base..base + c]);
                } else {
                    for _ in 0..c {
                        data.push(rng_bg.normal_f32());
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[maps.len(), h, w, c], data)
}

// ── degradation and its inverse ──────────────────────────────────────────

/// sqrt((1-gamma)^2 + gamma^2): the normalizer that keeps the blend at unit
/// variance for independent unit-variance inputs.
pub fn degrade_scale(gamma: f32) -> f32 {
    ((1.0 - gamma) * (1.0 - gamma) + gamma * gamma).sqrt()
}

/// Blends warped noise with fresh noise: ((1-gamma)*eps + gamma*zeta) / D.
/// gamma = 0 returns eps bitwise, gamma = 1 returns zeta bitwise.
pub fn degrade(eps: &Tensor, zeta: &Tensor, gamma: f32) -> Result<Tensor> {
    if eps.shape() != zeta.shape() {
        return Err(Error::shape(format!(
            "degrade shapes differ: {:?} vs {:?}",
            eps.shape(),
            zeta.shape()
        )));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::invalid(format!("degradation level {gamma} outside [0, 1]")));
    }
    let d = degrade_scale(gamma);
    let (ke, kz) = ((1.0 - gamma) / d, gamma / d);
    let data = eps
        .data()
        .iter()
        .zip(zeta.data())
        .map(|(&e, &z)| ke * e + kz * z)
        .collect();
    Tensor::from_vec(eps.shape(), data)
}

/// Exact inverse of `degrade` given the same zeta:
/// (D * noisy - gamma * zeta) / (1 - gamma). Refuses gamma >= GAMMA_CAP,
/// where the 1/(1-gamma) factor approaches the singularity at 1.
pub fn undegrade(noisy: &Tensor, zeta: &Tensor, gamma: f32) -> Result<Tensor> {
    if noisy.shape() != zeta.shape() {
        return Err(Error::shape(format!(
            "undegrade shapes differ: {:?} vs {:?}",
            noisy.shape(),
            zeta.shape()
        )));
    }
    if gamma < 0.0 {
        return Err(Error::invalid(format!("degradation level {gamma} outside [0, 1)")));
    }
    if gamma >= GAMMA_CAP {
        return Err(Error::invalid(format!(
            "degradation level {gamma} at or above the reversal cap {GAMMA_CAP}"
        )));
    }
    let d = degrade_scale(gamma);
    let inv = 1.0 / (1.0 - gamma);
    let data = noisy
        .data()
        .iter()
        .zip(zeta.data())
        .map(|(&x, &z)| (d * x - gamma * z) * inv)
        .collect();
    Tensor::from_vec(noisy.shape(), data)
}

/// Coefficients (a, b) with undegrade(x) = a*x + b*zeta, for the
/// differentiable path where zeta is a constant and only x carries grads.
pub fn undegrade_coefficients(gamma: f32) -> Result<(f32, f32)> {
    if !(0.0..1.0).contains(&gamma) || gamma >= GAMMA_CAP {
        return Err(Error::invalid(format!(
            "degradation level {gamma} outside [0, {GAMMA_CAP}) for reversal"
        )));
    }
    let inv = 1.0 / (1.0 - gamma);
    Ok((degrade_scale(gamma) * inv, -gamma * inv))
}

// ── spatiotemporal downsampling ──────────────────────────────────────────

/// Shape arithmetic of the nearest downsampler: (F, H, W, C) with
/// F = r*f + 1 becomes (f + 1, H/s, W/s, C).
pub fn downsample_shape(shape: &[usize], s: usize, r: usize) -> Result<[usize; 4]> {
    if shape.len() != 4 {
        return Err(Error::shape(format!("downsample expects (F, H, W, C), got {shape:?}")));
    }
    let (f, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    if s == 0 || r == 0 {
        return Err(Error::invalid("downsample factors must be positive"));
    }
    if f == 0 || (f - 1) % r != 0 {
        return Err(Error::shape(format!("frame count {f} is not r*f' + 1 for temporal factor {r}")));
    }
    if h % s != 0 || w % s != 0 {
        return Err(Error::shape(format!("spatial dims {h}x{w} not divisible by factor {s}")));
    }
    Ok([(f - 1) / r + 1, h / s, w / s, c])
}

/// Nearest-neighbor downsampling along time and space: output frame k takes
/// input frame k*r, output pixel (y, x) takes input pixel (y*s, x*s).
/// Channels pass through, so it serves noise (C) and motion maps (4) alike.
pub fn downsample_spatiotemporal(x: &Tensor, s: usize, r: usize) -> Result<Tensor> {
    let [fo, ho, wo, c] = downsample_shape(x.shape(), s, r)?;
    let (hi, wi) = (x.shape()[1], x.shape()[2]);
    let src = x.data();
    let mut data = Vec::with_capacity(fo * ho * wo * c);
    for k in 0..fo {
        let fb = k * r * hi * wi * c;
        for y in 0..ho {
            let rb = fb + y * s * wi * c;
            for xo in 0..wo {
                let base = rb + xo * s * c;
                data.extend_from_slice(&src[base..base + c]);
            }
        }
    }
    Tensor::from_vec(&[fo, ho, wo, c], data)
}

/// Downsamples motion maps with the same nearest rule, yielding the
/// latent-resolution maps the inverse warp uses during training.
pub fn downsample_maps(maps: &[MotionMap], s: usize, r: usize) -> Result<Vec<MotionMap>> {
    let stacked = crate::raster::sequence_tensor(maps);
    crate::raster::maps_from_tensor(&downsample_spatiotemporal(&stacked, s, r)?)
}

// ── inverse warp with averaging fusion ───────────────────────────────────

fn check_fuse_inputs(noise: &Tensor, maps: &[MotionMap]) -> Result<(usize, usize, usize, usize)> {
    let shape = noise.shape();
    if shape.len() != 4 {
        return Err(Error::shape(format!("unwarp expects (F, H, W, C) noise, got {shape:?}")));
    }
    let (f, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    if f != maps.len() {
        return Err(Error::shape(format!("{f} noise frames but {} motion maps", maps.len())));
    }
    for map in maps {
        if map.height() != h || map.width() != w {
            return Err(Error::shape(format!(
                "motion map {}x{} does not match noise {h}x{w}",
                map.height(),
                map.width()
            )));
        }
    }
    Ok((f, h, w, c))
}

/// Inverse warp: every covered pixel deposits its value on its texel; each
/// texel averages its deposits over all frames jointly (f64 accumulators,
/// frame-major then row-major order, so results are bitwise reproducible).
/// Returns the fused (U, V, C) texture and per-texel coverage counts
/// (row-major, length U*V); uncovered texels hold 0.
pub fn unwarp_fuse(
    noise: &Tensor,
    maps: &[MotionMap],
    tex_u: usize,
    tex_v: usize,
) -> Result<(Tensor, Vec<u32>)> {
    let (_, h, w, c) = check_fuse_inputs(noise, maps)?;
    let mut sums = vec![0.0f64; tex_u * tex_v * c];
    let mut counts = vec![0u32; tex_u * tex_v];
    let src = noise.data();
    for (fi, map) in maps.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let s = map.at(y, x);
                if !s.mask {
                    continue;
                }
                let (i, j) = texel_index(s.u, s.v, tex_u, tex_v);
                let texel = i * tex_v + j;
                counts[texel] += 1;
                let pb = ((fi * h + y) * w + x) * c;
                for ch in 0..c {
                    sums[texel * c + ch] += src[pb + ch] as f64;
                }
            }
        }
    }
    let mut data = vec![0.0f32; tex_u * tex_v * c];
    for texel in 0..tex_u * tex_v {
        let n = counts[texel];
        if n == 0 {
            continue;
        }
        for ch in 0..c {
            data[texel * c + ch] = (sums[texel * c + ch] / n as f64) as f32;
        }
    }
    Ok((Tensor::from_vec(&[tex_u, tex_v, c], data)?, counts))
}

/// Per-frame variant: each frame is fused alone, yielding one texture and
/// coverage per frame (temporal-consistency metrics compare consecutive
/// frames this way).
pub fn unwarp_fuse_frames(
    noise: &Tensor,
    maps: &[MotionMap],
    tex_u: usize,
    tex_v: usize,
) -> Result<Vec<(Tensor, Vec<u32>)>> {
    let (_, h, w, c) = check_fuse_inputs(noise, maps)?;
    let per = h * w * c;
    noise
        .data()
        .chunks_exact(per)
        .zip(maps)
        .map(|(chunk, map)| {
            let frame = Tensor::from_vec(&[1, h, w, c], chunk.to_vec())?;
            unwarp_fuse(&frame, std::slice::from_ref(map), tex_u, tex_v)
        })
        .collect()
}

/// Builds the gather plan equivalent to `unwarp_fuse` (or, with `per_frame`,
/// to `unwarp_fuse_frames`): groups are texels (frame-major texel blocks in
/// per-frame mode), items are covered pixel rows of the flattened noise in
/// the exact deposit order the direct fusion uses.
pub fn build_fuse_plan(
    maps: &[MotionMap],
    tex_u: usize,
    tex_v: usize,
    channels: usize,
    per_frame: bool,
) -> GatherMeanPlan {
    assert!(!maps.is_empty(), "fuse plan needs at least one motion map");
    let (h, w) = (maps[0].height(), maps[0].width());
    let texels = tex_u * tex_v;
    let groups = if per_frame { maps.len() * texels } else { texels };
    let mut pairs: Vec<(u32, u32)> = Vec::new();
    for (fi, map) in maps.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let s = map.at(y, x);
                if !s.mask {
                    continue;
                }
                let (i, j) = texel_index(s.u, s.v, tex_u, tex_v);
                let group = if per_frame { fi * texels + i * tex_v + j } else { i * tex_v + j };
                pairs.push((group as u32, ((fi * h + y) * w + x) as u32));
            }
        }
    }
    // Counting sort by group keeps each group's items in deposit order.
    let mut starts = vec![0u32; groups + 1];
    for &(g, _) in &pairs {
        starts[g as usize + 1] += 1;
    }
    for g in 0..groups {
        starts[g + 1] += starts[g];
    }
    let mut cursor: Vec<u32> = starts[..groups].to_vec();
    let mut items = vec![0u32; pairs.len()];
    for &(g, row) in &pairs {
        items[cursor[g as usize] as usize] = row;
        cursor[g as usize] += 1;
    }
    GatherMeanPlan { starts, items, channels, input_rows: maps.len() * h * w }
}
