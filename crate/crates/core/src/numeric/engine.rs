//! Dual execution engine.
//!
//! Network forwards are written once, generic over `Engine`. `PlainEngine`
//! evaluates immediately (inference, finite differences); `TapeEngine`
//! records every op on a `GradTape` for backprop. Both call the same kernels
//! on the same values, so their outputs are bitwise identical.

use std::sync::Arc;

use crate::numeric::kernels::{Conv2dDims, GatherMeanPlan, TConvDims, UpsampleDims};
use crate::numeric::tape::{BufId, GradTape};

pub trait Engine {
    type Val: Clone;

    fn leaf(&mut self, data: &[f32]) -> Self::Val;
    fn data<'a>(&'a self, v: &'a Self::Val) -> &'a [f32];
    /// Scalar read with the engine's best precision: the plain engine keeps
    /// loss scalars in f64 so finite differencing is not quantized by f32.
    fn scalar_f64(&self, v: &Self::Val) -> f64;

    fn conv2d(&mut self, x: &Self::Val, w: &Self::Val, b: &Self::Val, dims: &Conv2dDims) -> Self::Val;
    fn tconv(&mut self, x: &Self::Val, w: &Self::Val, b: &Self::Val, dims: &TConvDims) -> Self::Val;
    fn linear(&mut self, x: &Self::Val, w: &Self::Val, b: &Self::Val) -> Self::Val;
    fn relu(&mut self, x: &Self::Val) -> Self::Val;
    fn sigmoid(&mut self, x: &Self::Val) -> Self::Val;
    fn channel_bias(&mut self, x: &Self::Val, bias: &Self::Val) -> Self::Val;
    fn instance_norm(&mut self, x: &Self::Val, gain: &Self::Val, bias: &Self::Val) -> Self::Val;
    fn upsample2d(&mut self, x: &Self::Val, dims: &UpsampleDims) -> Self::Val;
    fn temporal_replicate(
        &mut self,
        x: &Self::Val,
        in_frames: usize,
        per_frame: usize,
        rate: usize,
    ) -> Self::Val;
    fn tile(&mut self, x: &Self::Val, times: usize) -> Self::Val;
    fn concat_channels(&mut self, a: &Self::Val, b: &Self::Val, ca: usize, cb: usize) -> Self::Val;
    fn affine(&mut self, x: &Self::Val, scale: f32, offset: Option<&[f32]>) -> Self::Val;
    fn gather_mean(&mut self, x: &Self::Val, plan: &Arc<GatherMeanPlan>) -> Self::Val;
    fn mse(&mut self, pred: &Self::Val, target: &Arc<Vec<f32>>) -> Self::Val;
    fn mse_indexed(
        &mut self,
        pred: &Self::Val,
        target: &Arc<Vec<f32>>,
        idx: &Arc<Vec<u32>>,
    ) -> Self::Val;
    fn weighted_sum(&mut self, terms: &[(Self::Val, f32)]) -> Self::Val;
}

// ── Plain engine ───────────────────────────────────────────────────────────

/// Immediate value: shared f32 buffer plus an optional f64 scalar carried
/// alongside loss reductions.
#[derive(Clone)]
pub struct PlainVal {
    data: Arc<Vec<f32>>,
    scalar_f64: Option<f64>,
}

impl PlainVal {
    fn new(data: Vec<f32>) -> PlainVal {
        PlainVal { data: Arc::new(data), scalar_f64: None }
    }

    fn scalar(v: f64) -> PlainVal {
        PlainVal { data: Arc::new(vec![v as f32]), scalar_f64: Some(v) }
    }
}

#[derive(Default)]
pub struct PlainEngine;

impl PlainEngine {
    pub fn new() -> PlainEngine {
        PlainEngine
    }
}

impl Engine for PlainEngine {
    type Val = PlainVal;

    fn leaf(&mut self, data: &[f32]) -> PlainVal {
        PlainVal::new(data.to_vec())
    }

    fn data<'a>(&'a self, v: &'a PlainVal) -> &'a [f32] {
        &v.data
    }

    fn scalar_f64(&self, v: &PlainVal) -> f64 {
        assert_eq!(v.data.len(), 1, "scalar_f64 on non-scalar value");
        v.scalar_f64.unwrap_or(v.data[0] as f64)
    }

    fn conv2d(&mut self, x: &PlainVal, w: &PlainVal, b: &PlainVal, dims: &Conv2dDims) -> PlainVal {
        let mut out = vec![0.0f32; dims.output_len()];
        kernels::conv2d_forward(&x.data, &w.data, &b.data, dims, &mut out);
        PlainVal::new(out)
    }

    fn tconv(&mut self, x: &PlainVal, w: &PlainVal, b: &PlainVal, dims: &TConvDims) -> PlainVal {
        let mut out = vec![0.0f32; dims.output_len()];
        kernels::tconv_forward(&x.data, &w.data, &b.data, dims, &mut out);
        PlainVal::new(out)
    }

    fn linear(&mut self, x: &PlainVal, w: &PlainVal, b: &PlainVal) -> PlainVal {
        let mut out = vec![0.0f32; b.data.len()];
        kernels::linear_forward(&x.data, &w.data, &b.data, &mut out);
        PlainVal::new(out)
    }

    fn relu(&mut self, x: &PlainVal) -> PlainVal {
        let mut out = vec![0.0f32; x.data.len()];
        kernels::relu_forward(&x.data, &mut out);
        PlainVal::new(out)
    }

    fn sigmoid(&mut self, x: &PlainVal) -> PlainVal {
        let mut out = vec![0.0f32; x.data.len()];
        kernels::sigmoid_forward(&x.data, &mut out);
        PlainVal::new(out)
    }

    fn channel_bias(&mut self, x: &PlainVal, bias: &PlainVal) -> PlainVal {
        let mut out = vec![0.0f32; x.data.len()];
        kernels::channel_bias_forward(&x.data, &bias.data, &mut out);
        PlainVal::new(out)
    }

    fn instance_norm(&mut self, x: &PlainVal, gain: &PlainVal, bias: &PlainVal) -> PlainVal {
        let mut out = vec![0.0f32; x.data.len()];
        kernels::instance_norm_forward(&x.data, &gain.data, &bias.data, &mut out);
        PlainVal::new(out)
    }

    fn upsample2d(&mut self, x: &PlainVal, dims: &UpsampleDims) -> PlainVal {
        let mut out = vec![0.0f32; dims.output_len()];
        kernels::upsample2d_forward(&x.data, dims, &mut out);
        PlainVal::new(out)
    }

    fn temporal_replicate(
        &mut self,
        x: &PlainVal,
        in_frames: usize,
        per_frame: usize,
        rate: usize,
    ) -> PlainVal {
        let out_frames = (in_frames - 1) * rate + 1;
        let mut out = vec![0.0f32; out_frames * per_frame];
        kernels::temporal_replicate_forward(&x.data, in_frames, per_frame, rate, &mut out);
        PlainVal::new(out)
    }

    fn tile(&mut self, x: &PlainVal, times: usize) -> PlainVal {
        let mut out = vec![0.0f32; x.data.len() * times];
        kernels::tile_forward(&x.data, times, &mut out);
        PlainVal::new(out)
    }

    fn concat_channels(&mut self, a: &PlainVal, b: &PlainVal, ca: usize, cb: usize) -> PlainVal {
        let rows = a.data.len() / ca;
        let mut out = vec![0.0f32; rows * (ca + cb)];
        kernels::concat_channels_forward(&a.data, &b.data, ca, cb, &mut out);
        PlainVal::new(out)
    }

    fn affine(&mut self, x: &PlainVal, scale: f32, offset: Option<&[f32]>) -> PlainVal {
        let mut out = vec![0.0f32; x.data.len()];
        kernels::affine_forward(&x.data, scale, offset, &mut out);
        PlainVal::new(out)
    }

    fn gather_mean(&mut self, x: &PlainVal, plan: &Arc<GatherMeanPlan>) -> PlainVal {
        let mut out = vec![0.0f32; plan.output_len()];
        kernels::gather_mean_forward(&x.data, plan, &mut out);
        PlainVal::new(out)
    }

    fn mse(&mut self, pred: &PlainVal, target: &Arc<Vec<f32>>) -> PlainVal {
        PlainVal::scalar(kernels::mse_value(&pred.data, target))
    }

    fn mse_indexed(
        &mut self,
        pred: &PlainVal,
        target: &Arc<Vec<f32>>,
        idx: &Arc<Vec<u32>>,
    ) -> PlainVal {
        PlainVal::scalar(kernels::mse_indexed_value(&pred.data, target, idx))
    }

    fn weighted_sum(&mut self, terms: &[(PlainVal, f32)]) -> PlainVal {
        let mut acc = 0.0f64;
        for (v, wgt) in terms {
            acc += self.scalar_f64(v) * *wgt as f64;
        }
        PlainVal::scalar(acc)
    }
}

use crate::numeric::kernels;

// ── Tape engine ────────────────────────────────────────────────────────────

#[derive(Default)]
pub struct TapeEngine {
    pub tape: GradTape,
}

impl TapeEngine {
    pub fn new() -> TapeEngine {
        TapeEngine::default()
    }
}

impl Engine for TapeEngine {
    type Val = BufId;

    fn leaf(&mut self, data: &[f32]) -> BufId {
        self.tape.leaf(data)
    }

    fn data<'a>(&'a self, v: &'a BufId) -> &'a [f32] {
        self.tape.value(*v)
    }

    fn scalar_f64(&self, v: &BufId) -> f64 {
        self.tape.scalar_f64(*v)
    }

    fn conv2d(&mut self, x: &BufId, w: &BufId, b: &BufId, dims: &Conv2dDims) -> BufId {
        self.tape.conv2d(*x, *w, *b, dims)
    }

    fn tconv(&mut self, x: &BufId, w: &BufId, b: &BufId, dims: &TConvDims) -> BufId {
        self.tape.tconv(*x, *w, *b, dims)
    }

    fn linear(&mut self, x: &BufId, w: &BufId, b: &BufId) -> BufId {
        self.tape.linear(*x, *w, *b)
    }

    fn relu(&mut self, x: &BufId) -> BufId {
        self.tape.relu(*x)
    }

    fn sigmoid(&mut self, x: &BufId) -> BufId {
        self.tape.sigmoid(*x)
    }

    fn channel_bias(&mut self, x: &BufId, bias: &BufId) -> BufId {
        self.tape.channel_bias(*x, *bias)
    }

    fn instance_norm(&mut self, x: &BufId, gain: &BufId, bias: &BufId) -> BufId {
        self.tape.instance_norm(*x, *gain, *bias)
    }

    fn upsample2d(&mut self, x: &BufId, dims: &UpsampleDims) -> BufId {
        self.tape.upsample2d(*x, dims)
    }

    fn temporal_replicate(
        &mut self,
        x: &BufId,
        in_frames: usize,
        per_frame: usize,
        rate: usize,
    ) -> BufId {
        self.tape.temporal_replicate(*x, in_frames, per_frame, rate)
    }

    fn tile(&mut self, x: &BufId, times: usize) -> BufId {
        self.tape.tile(*x, times)
    }

    fn concat_channels(&mut self, a: &BufId, b: &BufId, ca: usize, cb: usize) -> BufId {
        self.tape.concat_channels(*a, *b, ca, cb)
    }

    fn affine(&mut self, x: &BufId, scale: f32, offset: Option<&[f32]>) -> BufId {
        self.tape.affine(*x, scale, offset)
    }

    fn gather_mean(&mut self, x: &BufId, plan: &Arc<GatherMeanPlan>) -> BufId {
        self.tape.gather_mean(*x, plan)
    }

    fn mse(&mut self, pred: &BufId, target: &Arc<Vec<f32>>) -> BufId {
        self.tape.mse(*pred, target)
    }

    fn mse_indexed(&mut self, pred: &BufId, target: &Arc<Vec<f32>>, idx: &Arc<Vec<u32>>) -> BufId {
        self.tape.mse_indexed(*pred, target, idx)
    }

    fn weighted_sum(&mut self, terms: &[(BufId, f32)]) -> BufId {
        self.tape.weighted_sum(terms)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::rng::RngState;

    /// A small graph exercising most ops, written once over the trait.
    fn demo_graph<E: Engine>(eng: &mut E, data: &[Vec<f32>]) -> (Vec<f32>, f64) {
        let dims = Conv2dDims { frames: 2, height: 4, width: 4, in_c: 2, out_c: 3, k: 3 };
        let x = eng.leaf(&data[0]);
        let w = eng.leaf(&data[1]);
        let b = eng.leaf(&data[2]);
        let gain = eng.leaf(&data[3]);
        let bias = eng.leaf(&data[4]);
        let y = eng.conv2d(&x, &w, &b, &dims);
        let y = eng.instance_norm(&y, &gain, &bias);
        let y = eng.relu(&y);
        let y = eng.sigmoid(&y);
        let target = Arc::new(vec![0.25f32; 2 * 4 * 4 * 3]);
        let loss = eng.mse(&y, &target);
        let total = eng.weighted_sum(&[(loss, 2.0)]);
        (eng.data(&y).to_vec(), eng.scalar_f64(&total))
    }

    #[test]
    fn plain_and_taped_forwards_are_bitwise_identical() {
        let mut rng = RngState::seed(42);
        let dims = Conv2dDims { frames: 2, height: 4, width: 4, in_c: 2, out_c: 3, k: 3 };
        let data: Vec<Vec<f32>> = vec![
            (0..dims.input_len()).map(|_| rng.normal_f32()).collect(),
            (0..dims.weight_len()).map(|_| rng.normal_f32() * 0.2).collect(),
            (0..dims.out_c).map(|_| rng.normal_f32() * 0.1).collect(),
            (0..dims.out_c).map(|_| 1.0 + 0.1 * rng.normal_f32()).collect(),
            (0..dims.out_c).map(|_| 0.1 * rng.normal_f32()).collect(),
        ];

        let (plain_out, plain_loss) = demo_graph(&mut PlainEngine::new(), &data);
        let mut taped = TapeEngine::new();
        let (taped_out, taped_loss) = demo_graph(&mut taped, &data);

        assert_eq!(plain_out, taped_out, "forward activations diverge between engines");
        // Both engines reduce loss scalars in f64, so these match exactly.
        assert_eq!(plain_loss, taped_loss);
    }

    #[test]
    fn plain_scalar_f64_survives_weighted_sum() {
        let mut eng = PlainEngine::new();
        let p = eng.leaf(&[0.5, 0.5]);
        let t = Arc::new(vec![0.0f32, 0.0]);
        let l = eng.mse(&p, &t);
        let total = eng.weighted_sum(&[(l, 4.0)]);
        assert_eq!(eng.scalar_f64(&total), 1.0);
    }
}
