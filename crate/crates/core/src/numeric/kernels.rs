//! Array kernels shared by the plain and taped execution engines.
//!
//! Layout conventions, used without exception:
//! - activations: (frames, height, width, channels) row-major, channels contiguous
//! - spatial conv weights: (out_c, k, k, in_c), odd k, stride 1, zero-padded "same"
//! - temporal conv weights: (out_c, k, in_c), applied along the frame axis
//! - linear weights: (out_dim, in_dim)
//!
//! Scalar reductions (means, losses) accumulate in f64.

use std::sync::Arc;

// ── Dimension descriptors ──────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dDims {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
}

impl Conv2dDims {
    pub fn input_len(&self) -> usize {
        self.frames * self.height * self.width * self.in_c
    }
    pub fn output_len(&self) -> usize {
        self.frames * self.height * self.width * self.out_c
    }
    pub fn weight_len(&self) -> usize {
        self.out_c * self.k * self.k * self.in_c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TConvDims {
    pub frames: usize,
    /// Spatial positions per frame (height * width).
    pub spatial: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
}

impl TConvDims {
    pub fn input_len(&self) -> usize {
        self.frames * self.spatial * self.in_c
    }
    pub fn output_len(&self) -> usize {
        self.frames * self.spatial * self.out_c
    }
    pub fn weight_len(&self) -> usize {
        self.out_c * self.k * self.in_c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpsampleDims {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub factor: usize,
}

impl UpsampleDims {
    pub fn input_len(&self) -> usize {
        self.frames * self.height * self.width * self.channels
    }
    pub fn output_len(&self) -> usize {
        self.frames * self.height * self.factor * self.width * self.factor * self.channels
    }
}

/// Gather-and-average plan: output group g averages the input rows listed in
/// `items[starts[g]..starts[g+1]]`; a row is `channels` contiguous values.
/// Groups with no items produce zeros.
#[derive(Debug, Clone)]
pub struct GatherMeanPlan {
    pub starts: Vec<u32>,
    pub items: Vec<u32>,
    pub channels: usize,
    pub input_rows: usize,
}

impl GatherMeanPlan {
    pub fn groups(&self) -> usize {
        self.starts.len() - 1
    }
    pub fn output_len(&self) -> usize {
        self.groups() * self.channels
    }
}

// Reborrowing to one pinned length lets the optimizer drop per-element
// bounds tracking and vectorize the independent-lane loops.

#[inline(always)]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let n = a.len();
    let b = &b[..n];
    let mut acc = 0.0f32;
    for i in 0..n {
        acc += a[i] * b[i];
    }
    acc
}

#[inline(always)]
fn axpy(acc: &mut [f32], a: f32, x: &[f32]) {
    let n = acc.len();
    let x = &x[..n];
    for i in 0..n {
        acc[i] += a * x[i];
    }
}

// ── Spatial convolution ────────────────────────────────────────────────────

pub fn conv2d_forward(x: &[f32], w: &[f32], b: &[f32], d: &Conv2dDims, out: &mut [f32]) {
    assert_eq!(x.len(), d.input_len());
    assert_eq!(w.len(), d.weight_len());
    assert_eq!(b.len(), d.out_c);
    assert_eq!(out.len(), d.output_len());
    assert!(d.k % 2 == 1, "even kernel size {}", d.k);
    let (h, wd, ic, oc, k) = (d.height, d.width, d.in_c, d.out_c, d.k);
    let pad = k / 2;
    // Transposed weights (ky, kx, ic, oc): the per-tap update then walks
    // output channels contiguously with independent accumulators, which
    // vectorizes where a dot over input channels (a serial float chain)
    // cannot.
    let mut wt = vec![0.0f32; w.len()];
    for o in 0..oc {
        for ky in 0..k {
            for kx in 0..k {
                for i in 0..ic {
                    wt[((ky * k + kx) * ic + i) * oc + o] = w[((o * k + ky) * k + kx) * ic + i];
                }
            }
        }
    }
    let mut acc = vec![0.0f32; oc];
    for f in 0..d.frames {
        let x_frame = &x[f * h * wd * ic..(f + 1) * h * wd * ic];
        let out_frame = &mut out[f * h * wd * oc..(f + 1) * h * wd * oc];
        for oy in 0..h {
            for ox in 0..wd {
                acc.copy_from_slice(b);
                for ky in 0..k {
                    let iy = oy + ky;
                    if iy < pad || iy >= h + pad {
                        continue;
                    }
                    let iy = iy - pad;
                    for kx in 0..k {
                        let ix = ox + kx;
                        if ix < pad || ix >= wd + pad {
                            continue;
                        }
                        let ix = ix - pad;
                        let xs = &x_frame[(iy * wd + ix) * ic..(iy * wd + ix + 1) * ic];
                        let w_base = (ky * k + kx) * ic;
                        for (i, &xv) in xs.iter().enumerate() {
                            axpy(&mut acc, xv, &wt[(w_base + i) * oc..(w_base + i + 1) * oc]);
                        }
                    }
                }
                out_frame[(oy * wd + ox) * oc..(oy * wd + ox + 1) * oc].copy_from_slice(&acc);
            }
        }
    }
}

/// Gradients for conv2d. Accumulates into d_x/d_w/d_b (callers zero them).
pub fn conv2d_backward(
    x: &[f32],
    w: &[f32],
    d: &Conv2dDims,
    d_out: &[f32],
    d_x: &mut [f32],
    d_w: &mut [f32],
    d_b: &mut [f32],
) {
    assert_eq!(d_out.len(), d.output_len());
    assert_eq!(d_x.len(), d.input_len());
    assert_eq!(d_w.len(), d.weight_len());
    assert_eq!(d_b.len(), d.out_c);
    let (h, wd, ic, oc, k) = (d.height, d.width, d.in_c, d.out_c, d.k);
    let pad = k / 2;
    for f in 0..d.frames {
        let x_frame = &x[f * h * wd * ic..(f + 1) * h * wd * ic];
        let g_frame = &d_out[f * h * wd * oc..(f + 1) * h * wd * oc];
        let dx_frame = &mut d_x[f * h * wd * ic..(f + 1) * h * wd * ic];
        for oy in 0..h {
            for ox in 0..wd {
                let g = &g_frame[(oy * wd + ox) * oc..(oy * wd + ox + 1) * oc];
                for (o, &gv) in g.iter().enumerate() {
                    d_b[o] += gv;
                }
                for ky in 0..k {
                    let iy = oy + ky;
                    if iy < pad || iy >= h + pad {
                        continue;
                    }
                    let iy = iy - pad;
                    for kx in 0..k {
                        let ix = ox + kx;
                        if ix < pad || ix >= wd + pad {
                            continue;
                        }
                        let ix = ix - pad;
                        let xrange = (iy * wd + ix) * ic..(iy * wd + ix + 1) * ic;
                        let xs = &x_frame[xrange.clone()];
                        let dxs = &mut dx_frame[xrange];
                        let w_base = (ky * k + kx) * ic;
                        // Both updates run over input channels with the
                        // original weight rows, so each is a vector axpy.
                        for (o, &gv) in g.iter().enumerate() {
                            let wrange = o * k * k * ic + w_base..o * k * k * ic + w_base + ic;
                            axpy(dxs, gv, &w[wrange.clone()]);
                            axpy(&mut d_w[wrange], gv, xs);
                        }
                    }
                }
            }
        }
    }
}

// ── Temporal convolution ───────────────────────────────────────────────────

pub fn tconv_forward(x: &[f32], w: &[f32], b: &[f32], d: &TConvDims, out: &mut [f32]) {
    assert_eq!(x.len(), d.input_len());
    assert_eq!(w.len(), d.weight_len());
    assert_eq!(b.len(), d.out_c);
    assert_eq!(out.len(), d.output_len());
    assert!(d.k % 2 == 1, "even kernel size {}", d.k);
    let (frames, sp, ic, oc, k) = (d.frames, d.spatial, d.in_c, d.out_c, d.k);
    let pad = k / 2;
    let mut acc = vec![0.0f32; oc];
    for fo in 0..frames {
        for s in 0..sp {
            acc.copy_from_slice(b);
            for kt in 0..k {
                let fi = fo + kt;
                if fi < pad || fi >= frames + pad {
                    continue;
                }
                let fi = fi - pad;
                let xs = &x[(fi * sp + s) * ic..(fi * sp + s + 1) * ic];
                for (o, a) in acc.iter_mut().enumerate() {
                    let ws = &w[(o * k + kt) * ic..(o * k + kt + 1) * ic];
                    *a += dot(xs, ws);
                }
            }
            out[(fo * sp + s) * oc..(fo * sp + s + 1) * oc].copy_from_slice(&acc);
        }
    }
}

pub fn tconv_backward(
    x: &[f32],
    w: &[f32],
    d: &TConvDims,
    d_out: &[f32],
    d_x: &mut [f32],
    d_w: &mut [f32],
    d_b: &mut [f32],
) {
    assert_eq!(d_out.len(), d.output_len());
    let (frames, sp, ic, oc, k) = (d.frames, d.spatial, d.in_c, d.out_c, d.k);
    let pad = k / 2;
    let mut wt = vec![0.0f32; w.len()];
    for o in 0..oc {
        for kt in 0..k {
            for i in 0..ic {
                wt[(kt * ic + i) * oc + o] = w[(o * k + kt) * ic + i];
            }
        }
    }
    for fo in 0..frames {
        for s in 0..sp {
            let g = &d_out[(fo * sp + s) * oc..(fo * sp + s + 1) * oc];
            for (o, &gv) in g.iter().enumerate() {
                d_b[o] += gv;
            }
            for kt in 0..k {
                let fi = fo + kt;
                if fi < pad || fi >= frames + pad {
                    continue;
                }
                let fi = fi - pad;
                let xrange = (fi * sp + s) * ic..(fi * sp + s + 1) * ic;
                let xs = &x[xrange.clone()];
                for (i, dx) in d_x[xrange].iter_mut().enumerate() {
                    *dx += dot(g, &wt[(kt * ic + i) * oc..(kt * ic + i + 1) * oc]);
                }
                for (o, &gv) in g.iter().enumerate() {
                    axpy(&mut d_w[(o * k + kt) * ic..(o * k + kt + 1) * ic], gv, xs);
                }
            }
        }
    }
}

// ── Dense layer ────────────────────────────────────────────────────────────

pub fn linear_forward(x: &[f32], w: &[f32], b: &[f32], out: &mut [f32]) {
    let (din, dout) = (x.len(), out.len());
    assert_eq!(w.len(), din * dout);
    assert_eq!(b.len(), dout);
    for (o, r) in out.iter_mut().enumerate() {
        *r = b[o] + dot(x, &w[o * din..(o + 1) * din]);
    }
}

pub fn linear_backward(
    x: &[f32],
    w: &[f32],
    d_out: &[f32],
    d_x: &mut [f32],
    d_w: &mut [f32],
    d_b: &mut [f32],
) {
    let din = x.len();
    for (o, &g) in d_out.iter().enumerate() {
        d_b[o] += g;
        axpy(&mut d_w[o * din..(o + 1) * din], g, x);
        axpy(d_x, g, &w[o * din..(o + 1) * din]);
    }
}

// ── Activations ────────────────────────────────────────────────────────────

pub fn relu_forward(x: &[f32], out: &mut [f32]) {
    for (r, &v) in out.iter_mut().zip(x) {
        *r = v.max(0.0);
    }
}

pub fn relu_backward(x: &[f32], d_out: &[f32], d_x: &mut [f32]) {
    for ((dx, &v), &g) in d_x.iter_mut().zip(x).zip(d_out) {
        if v > 0.0 {
            *dx += g;
        }
    }
}

pub fn sigmoid_forward(x: &[f32], out: &mut [f32]) {
    for (r, &v) in out.iter_mut().zip(x) {
        *r = 1.0 / (1.0 + (-v).exp());
    }
}

/// Uses the saved forward output y: dy/dx = y (1 - y).
pub fn sigmoid_backward(y: &[f32], d_out: &[f32], d_x: &mut [f32]) {
    for ((dx, &yv), &g) in d_x.iter_mut().zip(y).zip(d_out) {
        *dx += g * yv * (1.0 - yv);
    }
}

// ── Per-channel bias ───────────────────────────────────────────────────────

pub fn channel_bias_forward(x: &[f32], bias: &[f32], out: &mut [f32]) {
    let c = bias.len();
    assert_eq!(x.len() % c, 0);
    for (row_out, row_x) in out.chunks_exact_mut(c).zip(x.chunks_exact(c)) {
        for ((r, &v), &bv) in row_out.iter_mut().zip(row_x).zip(bias) {
            *r = v + bv;
        }
    }
}

pub fn channel_bias_backward(d_out: &[f32], channels: usize, d_x: &mut [f32], d_bias: &mut [f32]) {
    for (dx, &g) in d_x.iter_mut().zip(d_out) {
        *dx += g;
    }
    for row in d_out.chunks_exact(channels) {
        for (db, &g) in d_bias.iter_mut().zip(row) {
            *db += g;
        }
    }
}

// ── Instance normalization ─────────────────────────────────────────────────

pub const NORM_EPS: f64 = 1e-5;

/// Normalizes each channel over all rows, then applies gain and bias.
/// Returns per-channel (mean, inv_std) for the backward pass.
pub fn instance_norm_forward(
    x: &[f32],
    gain: &[f32],
    bias: &[f32],
    out: &mut [f32],
) -> (Vec<f32>, Vec<f32>) {
    let c = gain.len();
    assert_eq!(bias.len(), c);
    assert_eq!(x.len() % c, 0);
    let rows = x.len() / c;
    assert!(rows > 0, "instance norm over zero rows");
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for row in x.chunks_exact(c) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    for m in &mut mean {
        *m /= rows as f64;
    }
    for row in x.chunks_exact(c) {
        for ((vv, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v as f64 - m;
            *vv += d * d;
        }
    }
    let inv_std: Vec<f32> = var
        .iter()
        .map(|&v| (1.0 / (v / rows as f64 + NORM_EPS).sqrt()) as f32)
        .collect();
    let mean: Vec<f32> = mean.iter().map(|&m| m as f32).collect();
    for (row_out, row_x) in out.chunks_exact_mut(c).zip(x.chunks_exact(c)) {
        for i in 0..c {
            row_out[i] = gain[i] * (row_x[i] - mean[i]) * inv_std[i] + bias[i];
        }
    }
    (mean, inv_std)
}

pub fn instance_norm_backward(
    x: &[f32],
    gain: &[f32],
    mean: &[f32],
    inv_std: &[f32],
    d_out: &[f32],
    d_x: &mut [f32],
    d_gain: &mut [f32],
    d_bias: &mut [f32],
) {
    let c = gain.len();
    let rows = x.len() / c;
    let n = rows as f64;
    // Per channel: dx = g*s*(dy - mean(dy) - xhat*mean(dy*xhat)).
    let mut sum_dy = vec![0.0f64; c];
    let mut sum_dy_xhat = vec![0.0f64; c];
    for (row_x, row_g) in x.chunks_exact(c).zip(d_out.chunks_exact(c)) {
        for i in 0..c {
            let xhat = ((row_x[i] - mean[i]) * inv_std[i]) as f64;
            let g = row_g[i] as f64;
            sum_dy[i] += g;
            sum_dy_xhat[i] += g * xhat;
        }
    }
    for i in 0..c {
        d_gain[i] += sum_dy_xhat[i] as f32;
        d_bias[i] += sum_dy[i] as f32;
    }
    for ((row_x, row_g), row_dx) in x
        .chunks_exact(c)
        .zip(d_out.chunks_exact(c))
        .zip(d_x.chunks_exact_mut(c))
    {
        for i in 0..c {
            let xhat = ((row_x[i] - mean[i]) * inv_std[i]) as f64;
            let g = row_g[i] as f64;
            let term = g - sum_dy[i] / n - xhat * sum_dy_xhat[i] / n;
            row_dx[i] += (gain[i] as f64 * inv_std[i] as f64 * term) as f32;
        }
    }
}

// ── Resampling ─────────────────────────────────────────────────────────────

pub fn upsample2d_forward(x: &[f32], d: &UpsampleDims, out: &mut [f32]) {
    assert_eq!(x.len(), d.input_len());
    assert_eq!(out.len(), d.output_len());
    let (h, w, c, u) = (d.height, d.width, d.channels, d.factor);
    let (oh, ow) = (h * u, w * u);
    for f in 0..d.frames {
        let xf = &x[f * h * w * c..(f + 1) * h * w * c];
        let of = &mut out[f * oh * ow * c..(f + 1) * oh * ow * c];
        for oy in 0..oh {
            let iy = oy / u;
            for ox in 0..ow {
                let ix = ox / u;
                of[(oy * ow + ox) * c..(oy * ow + ox + 1) * c]
                    .copy_from_slice(&xf[(iy * w + ix) * c..(iy * w + ix + 1) * c]);
            }
        }
    }
}

pub fn upsample2d_backward(d: &UpsampleDims, d_out: &[f32], d_x: &mut [f32]) {
    let (h, w, c, u) = (d.height, d.width, d.channels, d.factor);
    let (oh, ow) = (h * u, w * u);
    for f in 0..d.frames {
        let gf = &d_out[f * oh * ow * c..(f + 1) * oh * ow * c];
        let dxf = &mut d_x[f * h * w * c..(f + 1) * h * w * c];
        for oy in 0..oh {
            let iy = oy / u;
            for ox in 0..ow {
                let ix = ox / u;
                let src = &gf[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
                let dst = &mut dxf[(iy * w + ix) * c..(iy * w + ix + 1) * c];
                for (dv, &g) in dst.iter_mut().zip(src) {
                    *dv += g;
                }
            }
        }
    }
}

/// Output frame 0 copies input frame 0; output frame j >= 1 copies input
/// frame ceil(j / rate). Output frame count is (in_frames - 1) * rate + 1.
pub fn temporal_replicate_forward(
    x: &[f32],
    in_frames: usize,
    per_frame: usize,
    rate: usize,
    out: &mut [f32],
) {
    assert!(in_frames >= 1 && rate >= 1);
    let out_frames = (in_frames - 1) * rate + 1;
    assert_eq!(x.len(), in_frames * per_frame);
    assert_eq!(out.len(), out_frames * per_frame);
    for j in 0..out_frames {
        let src = j.div_ceil(rate);
        out[j * per_frame..(j + 1) * per_frame]
            .copy_from_slice(&x[src * per_frame..(src + 1) * per_frame]);
    }
}

pub fn temporal_replicate_backward(
    in_frames: usize,
    per_frame: usize,
    rate: usize,
    d_out: &[f32],
    d_x: &mut [f32],
) {
    let out_frames = (in_frames - 1) * rate + 1;
    for j in 0..out_frames {
        let src = j.div_ceil(rate);
        let dst = &mut d_x[src * per_frame..(src + 1) * per_frame];
        for (dv, &g) in dst.iter_mut().zip(&d_out[j * per_frame..(j + 1) * per_frame]) {
            *dv += g;
        }
    }
}

pub fn tile_forward(x: &[f32], times: usize, out: &mut [f32]) {
    assert_eq!(out.len(), x.len() * times);
    for part in out.chunks_exact_mut(x.len()) {
        part.copy_from_slice(x);
    }
}

pub fn tile_backward(d_out: &[f32], times: usize, d_x: &mut [f32]) {
    assert_eq!(d_out.len(), d_x.len() * times);
    for part in d_out.chunks_exact(d_x.len()) {
        for (dv, &g) in d_x.iter_mut().zip(part) {
            *dv += g;
        }
    }
}

// ── Structural ops ─────────────────────────────────────────────────────────

pub fn concat_channels_forward(a: &[f32], b: &[f32], ca: usize, cb: usize, out: &mut [f32]) {
    let rows = a.len() / ca;
    assert_eq!(a.len(), rows * ca);
    assert_eq!(b.len(), rows * cb);
    assert_eq!(out.len(), rows * (ca + cb));
    for ((row_out, row_a), row_b) in out
        .chunks_exact_mut(ca + cb)
        .zip(a.chunks_exact(ca))
        .zip(b.chunks_exact(cb))
    {
        row_out[..ca].copy_from_slice(row_a);
        row_out[ca..].copy_from_slice(row_b);
    }
}

pub fn concat_channels_backward(
    d_out: &[f32],
    ca: usize,
    cb: usize,
    d_a: &mut [f32],
    d_b: &mut [f32],
) {
    for ((row_g, row_da), row_db) in d_out
        .chunks_exact(ca + cb)
        .zip(d_a.chunks_exact_mut(ca))
        .zip(d_b.chunks_exact_mut(cb))
    {
        for (dv, &g) in row_da.iter_mut().zip(&row_g[..ca]) {
            *dv += g;
        }
        for (dv, &g) in row_db.iter_mut().zip(&row_g[ca..]) {
            *dv += g;
        }
    }
}

/// out = scale * x + offset (offset optional, same length as x).
pub fn affine_forward(x: &[f32], scale: f32, offset: Option<&[f32]>, out: &mut [f32]) {
    match offset {
        Some(off) => {
            assert_eq!(off.len(), x.len());
            for ((r, &v), &o) in out.iter_mut().zip(x).zip(off) {
                *r = scale * v + o;
            }
        }
        None => {
            for (r, &v) in out.iter_mut().zip(x) {
                *r = scale * v;
            }
        }
    }
}

pub fn affine_backward(scale: f32, d_out: &[f32], d_x: &mut [f32]) {
    axpy(d_x, scale, d_out);
}

// ── Gather-mean (texel fusion) ─────────────────────────────────────────────

pub fn gather_mean_forward(x: &[f32], plan: &GatherMeanPlan, out: &mut [f32]) {
    let c = plan.channels;
    assert_eq!(x.len(), plan.input_rows * c);
    assert_eq!(out.len(), plan.output_len());
    let mut acc = vec![0.0f64; c];
    for g in 0..plan.groups() {
        let items = &plan.items[plan.starts[g] as usize..plan.starts[g + 1] as usize];
        let dst = &mut out[g * c..(g + 1) * c];
        if items.is_empty() {
            dst.fill(0.0);
            continue;
        }
        acc.fill(0.0);
        for &row in items {
            let src = &x[row as usize * c..(row as usize + 1) * c];
            for (a, &v) in acc.iter_mut().zip(src) {
                *a += v as f64;
            }
        }
        let inv = 1.0 / items.len() as f64;
        for (r, &a) in dst.iter_mut().zip(&acc) {
            *r = (a * inv) as f32;
        }
    }
}

pub fn gather_mean_backward(plan: &GatherMeanPlan, d_out: &[f32], d_x: &mut [f32]) {
    let c = plan.channels;
    for g in 0..plan.groups() {
        let items = &plan.items[plan.starts[g] as usize..plan.starts[g + 1] as usize];
        if items.is_empty() {
            continue;
        }
        let inv = 1.0 / items.len() as f32;
        let src = &d_out[g * c..(g + 1) * c];
        for &row in items {
            let dst = &mut d_x[row as usize * c..(row as usize + 1) * c];
            for (dv, &gv) in dst.iter_mut().zip(src) {
                *dv += gv * inv;
            }
        }
    }
}

// ── Scalar reductions ──────────────────────────────────────────────────────

/// Mean squared error with f64 accumulation.
pub fn mse_value(pred: &[f32], target: &[f32]) -> f64 {
    assert_eq!(pred.len(), target.len());
    assert!(!pred.is_empty(), "mse of empty tensors");
    let ss: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = p as f64 - t as f64;
            d * d
        })
        .sum();
    ss / pred.len() as f64
}

pub fn mse_backward(pred: &[f32], target: &[f32], d_out: f32, d_pred: &mut [f32]) {
    let scale = 2.0 * d_out / pred.len() as f32;
    for ((dp, &p), &t) in d_pred.iter_mut().zip(pred).zip(target) {
        *dp += scale * (p - t);
    }
}

/// MSE over the listed flat element indices only. Empty index list -> 0.
pub fn mse_indexed_value(pred: &[f32], target: &[f32], idx: &[u32]) -> f64 {
    assert_eq!(pred.len(), target.len());
    if idx.is_empty() {
        return 0.0;
    }
    let ss: f64 = idx
        .iter()
        .map(|&i| {
            let d = pred[i as usize] as f64 - target[i as usize] as f64;
            d * d
        })
        .sum();
    ss / idx.len() as f64
}

pub fn mse_indexed_backward(
    pred: &[f32],
    target: &[f32],
    idx: &[u32],
    d_out: f32,
    d_pred: &mut [f32],
) {
    if idx.is_empty() {
        return;
    }
    let scale = 2.0 * d_out / idx.len() as f32;
    for &i in idx {
        let i = i as usize;
        d_pred[i] += scale * (pred[i] - target[i]);
    }
}

pub fn sum_all_value(x: &[f32]) -> f64 {
    x.iter().map(|&v| v as f64).sum()
}

pub type SharedPlan = Arc<GatherMeanPlan>;
pub type SharedIndex = Arc<Vec<u32>>;
