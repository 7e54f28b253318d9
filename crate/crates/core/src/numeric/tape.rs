//! Reverse-mode autodiff on a Wengert tape.
//!
//! Forward calls record ops over flat f32 buffers; `backward` seeds the loss
//! adjoint with 1 and replays the ops in reverse. Forward math is delegated
//! to `kernels`, so a taped forward is bitwise identical to the plain engine.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numeric::kernels::{self, Conv2dDims, GatherMeanPlan, TConvDims, UpsampleDims};

pub type BufId = usize;

#[derive(Debug, Clone)]
enum Op {
    Conv2d { x: BufId, w: BufId, b: BufId, out: BufId, dims: Conv2dDims },
    TConv { x: BufId, w: BufId, b: BufId, out: BufId, dims: TConvDims },
    Linear { x: BufId, w: BufId, b: BufId, out: BufId },
    Relu { x: BufId, out: BufId },
    Sigmoid { x: BufId, out: BufId },
    ChannelBias { x: BufId, bias: BufId, out: BufId, channels: usize },
    InstanceNorm { x: BufId, gain: BufId, bias: BufId, out: BufId, mean: Vec<f32>, inv_std: Vec<f32> },
    Upsample2d { x: BufId, out: BufId, dims: UpsampleDims },
    TemporalReplicate { x: BufId, out: BufId, in_frames: usize, per_frame: usize, rate: usize },
    Tile { x: BufId, out: BufId, times: usize },
    ConcatChannels { a: BufId, b: BufId, out: BufId, ca: usize, cb: usize },
    Affine { x: BufId, out: BufId, scale: f32 },
    GatherMean { x: BufId, out: BufId, plan: Arc<GatherMeanPlan> },
    Mse { pred: BufId, out: BufId, target: Arc<Vec<f32>> },
    MseIndexed { pred: BufId, out: BufId, target: Arc<Vec<f32>>, idx: Arc<Vec<u32>> },
    WeightedSum { terms: Vec<(BufId, f32)>, out: BufId },
    Square { x: BufId, out: BufId },
    SumAll { x: BufId, out: BufId },
}

#[derive(Default)]
pub struct GradTape {
    values: Vec<Vec<f32>>,
    // f64 mirror for scalar reductions, so losses can be read and finite
    // differenced without f32 quantization. Gradients stay f32.
    scalar64: Vec<Option<f64>>,
    grads: Vec<Vec<f32>>,
    ops: Vec<Op>,
}

impl GradTape {
    pub fn new() -> GradTape {
        GradTape::default()
    }

    fn push(&mut self, data: Vec<f32>) -> BufId {
        self.values.push(data);
        self.scalar64.push(None);
        self.values.len() - 1
    }

    fn push_scalar(&mut self, v: f64) -> BufId {
        let id = self.push(vec![v as f32]);
        self.scalar64[id] = Some(v);
        id
    }

    /// Leaf buffer. Constants and parameters are identical on the tape; both
    /// receive adjoints, callers read back only the ones they care about.
    pub fn leaf(&mut self, data: &[f32]) -> BufId {
        self.push(data.to_vec())
    }

    pub fn value(&self, id: BufId) -> &[f32] {
        &self.values[id]
    }

    pub fn scalar(&self, id: BufId) -> f32 {
        assert_eq!(self.values[id].len(), 1, "buffer {id} is not a scalar");
        self.values[id][0]
    }

    /// Scalar read at the precision it was reduced in (f64 for losses).
    pub fn scalar_f64(&self, id: BufId) -> f64 {
        assert_eq!(self.values[id].len(), 1, "buffer {id} is not a scalar");
        self.scalar64[id].unwrap_or(self.values[id][0] as f64)
    }

    /// Adjoint of a buffer; errors if `backward` has not run.
    pub fn gradient(&self, id: BufId) -> Result<&[f32]> {
        if self.grads.len() != self.values.len() {
            return Err(Error::invalid("gradient read before backward".to_string()));
        }
        Ok(&self.grads[id])
    }

    // ── Op recorders ───────────────────────────────────────────────────────

    pub fn conv2d(&mut self, x: BufId, w: BufId, b: BufId, dims: &Conv2dDims) -> BufId {
        let mut out = vec![0.0f32; dims.output_len()];
        kernels::conv2d_forward(&self.values[x], &self.values[w], &self.values[b], dims, &mut out);
        let out = self.push(out);
        self.ops.push(Op::Conv2d { x, w, b, out, dims: *dims });
        out
    }

    pub fn tconv(&mut self, x: BufId, w: BufId, b: BufId, dims: &TConvDims) -> BufId {
        let mut out = vec![0.0f32; dims.output_len()];
        kernels::tconv_forward(&self.values[x], &self.values[w], &self.values[b], dims, &mut out);
        let out = self.push(out);
        self.ops.push(Op::TConv { x, w, b, out, dims: *dims });
        out
    }

    pub fn linear(&mut self, x: BufId, w: BufId, b: BufId) -> BufId {
        let mut out = vec![0.0f32; self.values[b].len()];
        kernels::linear_forward(&self.values[x], &self.values[w], &self.values[b], &mut out);
        let out = self.push(out);
        self.ops.push(Op::Linear { x, w, b, out });
        out
    }

    pub fn relu(&mut self, x: BufId) -> BufId {
        let mut out = vec![0.0f32; self.values[x].len()];
        kernels::relu_forward(&self.values[x], &mut out);
        let out = self.push(out);
        self.ops.push(Op::Relu { x, out });
        out
    }

    pub fn sigmoid(&mut self, x: BufId) -> BufId {
        let mut out = vec![0.0f32; self.values[x].len()];
        kernels::sigmoid_forward(&self.values[x], &mut out);
        let out = self.push(out);
        self.ops.push(Op::Sigmoid { x, out });
        out
    }

    pub fn channel_bias(&mut self, x: BufId, bias: BufId) -> BufId {
        let channels = self.values[bias].len();
        let mut out = vec![0.0f32; self.values[x].len()];
        kernels::channel_bias_forward(&self.values[x], &self.values[bias], &mut out);
        let out = self.push(out);
        self.ops.push(Op::ChannelBias { x, bias, out, channels });
        out
    }

    pub fn instance_norm(&mut self, x: BufId, gain: BufId, bias: BufId) -> BufId {
        let mut out = vec![0.0f32; self.values[x].len()];
        let (mean, inv_std) = kernels::instance_norm_forward(
            &self.values[x],
            &self.values[gain],
            &self.values[bias],
            &mut out,
        );
        let out = self.push(out);
        self.ops.push(Op::InstanceNorm { x, gain, bias, out, mean, inv_std });
        out
    }

    pub fn upsample2d(&mut self, x: BufId, dims: &UpsampleDims) -> BufId {
        let mut out = vec![0.0f32; dims.output_len()];
        kernels::upsample2d_forward(&self.values[x], dims, &mut out);
        let out = self.push(out);
        self.ops.push(Op::Upsample2d { x, out, dims: *dims });
        out
    }

    pub fn temporal_replicate(
        &mut self,
        x: BufId,
        in_frames: usize,
        per_frame: usize,
        rate: usize,
    ) -> BufId {
        let out_frames = (in_frames - 1) * rate + 1;
        let mut out = vec![0.0f32; out_frames * per_frame];
        kernels::temporal_replicate_forward(&self.values[x], in_frames, per_frame, rate, &mut out);
        let out = self.push(out);
        self.ops.push(Op::TemporalReplicate { x, out, in_frames, per_frame, rate });
        out
    }

    pub fn tile(&mut self, x: BufId, times: usize) -> BufId {
        let mut out = vec![0.0f32; self.values[x].len() * times];
        kernels::tile_forward(&self.values[x], times, &mut out);
        let out = self.push(out);
        self.ops.push(Op::Tile { x, out, times });
        out
    }

    pub fn concat_channels(&mut self, a: BufId, b: BufId, ca: usize, cb: usize) -> BufId {
        let rows = self.values[a].len() / ca;
        let mut out = vec![0.0f32; rows * (ca + cb)];
        kernels::concat_channels_forward(&self.values[a], &self.values[b], ca, cb, &mut out);
        let out = self.push(out);
        self.ops.push(Op::ConcatChannels { a, b, out, ca, cb });
        out
    }

    pub fn affine(&mut self, x: BufId, scale: f32, offset: Option<&[f32]>) -> BufId {
        let mut out = vec![0.0f32; self.values[x].len()];
        kernels::affine_forward(&self.values[x], scale, offset, &mut out);
        let out = self.push(out);
        self.ops.push(Op::Affine { x, out, scale });
        out
    }

    pub fn gather_mean(&mut self, x: BufId, plan: &Arc<GatherMeanPlan>) -> BufId {
        let mut out = vec![0.0f32; plan.output_len()];
        kernels::gather_mean_forward(&self.values[x], plan, &mut out);
        let out = self.push(out);
        self.ops.push(Op::GatherMean { x, out, plan: Arc::clone(plan) });
        out
    }

    pub fn mse(&mut self, pred: BufId, target: &Arc<Vec<f32>>) -> BufId {
        let v = kernels::mse_value(&self.values[pred], target);
        let out = self.push_scalar(v);
        self.ops.push(Op::Mse { pred, out, target: Arc::clone(target) });
        out
    }

    pub fn mse_indexed(
        &mut self,
        pred: BufId,
        target: &Arc<Vec<f32>>,
        idx: &Arc<Vec<u32>>,
    ) -> BufId {
        let v = kernels::mse_indexed_value(&self.values[pred], target, idx);
        let out = self.push_scalar(v);
        self.ops.push(Op::MseIndexed { pred, out, target: Arc::clone(target), idx: Arc::clone(idx) });
        out
    }

    pub fn weighted_sum(&mut self, terms: &[(BufId, f32)]) -> BufId {
        let mut acc = 0.0f64;
        for &(id, wgt) in terms {
            assert_eq!(self.values[id].len(), 1, "weighted_sum over non-scalar {id}");
            acc += self.scalar_f64(id) * wgt as f64;
        }
        let out = self.push_scalar(acc);
        self.ops.push(Op::WeightedSum { terms: terms.to_vec(), out });
        out
    }

    pub fn square(&mut self, x: BufId) -> BufId {
        let out_data: Vec<f32> = self.values[x].iter().map(|&v| v * v).collect();
        let out = self.push(out_data);
        self.ops.push(Op::Square { x, out });
        out
    }

    pub fn sum_all(&mut self, x: BufId) -> BufId {
        let v = kernels::sum_all_value(&self.values[x]);
        let out = self.push_scalar(v);
        self.ops.push(Op::SumAll { x, out });
        out
    }

    // ── Backward ───────────────────────────────────────────────────────────

    /// Seeds the adjoint of `loss` with 1 and replays all ops in reverse.
    /// `loss` must be a scalar buffer recorded on this tape.
    pub fn backward(&mut self, loss: BufId) -> Result<()> {
        if loss >= self.values.len() {
            return Err(Error::invalid(format!("backward: buffer {loss} is not on the tape")));
        }
        if self.values[loss].len() != 1 {
            return Err(Error::invalid(format!(
                "backward: buffer {loss} has {} elements, expected a scalar",
                self.values[loss].len()
            )));
        }
        self.grads = self.values.iter().map(|v| vec![0.0f32; v.len()]).collect();
        self.grads[loss][0] = 1.0;

        let ops = std::mem::take(&mut self.ops);
        for op in ops.iter().rev() {
            self.replay(op);
        }
        self.ops = ops;
        Ok(())
    }

    fn replay(&mut self, op: &Op) {
        // Written adjoints are swapped out to satisfy the borrow checker; all
        // buffer ids within one op are distinct by construction.
        macro_rules! take {
            ($id:expr) => {
                std::mem::take(&mut self.grads[$id])
            };
        }
        macro_rules! put {
            ($id:expr, $v:expr) => {
                self.grads[$id] = $v
            };
        }
        match op {
            Op::Conv2d { x, w, b, out, dims } => {
                let g_out = take!(*out);
                let mut g_x = take!(*x);
                let mut g_w = take!(*w);
                let mut g_b = take!(*b);
                kernels::conv2d_backward(
                    &self.values[*x],
                    &self.values[*w],
                    dims,
                    &g_out,
                    &mut g_x,
                    &mut g_w,
                    &mut g_b,
                );
                put!(*x, g_x);
                put!(*w, g_w);
                put!(*b, g_b);
                put!(*out, g_out);
            }
            Op::TConv { x, w, b, out, dims } => {
                let g_out = take!(*out);
                let mut g_x = take!(*x);
                let mut g_w = take!(*w);
                let mut g_b = take!(*b);
                kernels::tconv_backward(
                    &self.values[*x],
                    &self.values[*w],
                    dims,
                    &g_out,
                    &mut g_x,
                    &mut g_w,
                    &mut g_b,
                );
                put!(*x, g_x);
                put!(*w, g_w);
                put!(*b, g_b);
                put!(*out, g_out);
            }
            Op::Linear { x, w, b, out } => {
                let g_out = take!(*out);
                let mut g_x = take!(*x);
                let mut g_w = take!(*w);
                let mut g_b = take!(*b);
                kernels::linear_backward(
                    &self.values[*x],
                    &self.values[*w],
                    &g_out,
                    &mut g_x,
                    &mut g_w,
                    &mut g_b,
                );
                put!(*x, g_x);
                put!(*w, g_w);
                put!(*b, g_b);
                put!(*out, g_out);
            }
            Op::Relu { x, out } => {
                let g_out = take!(*out);
                let mut g_x = take!(*x);
                kernels::relu_backward(&self.values[*x], &g_out, &mut g_x);
                put!(*x, g_x);
                put!(*out, g_out);
            }
            Op::Sigmoid { x, out } => {
                let g_out = take!(*out);
                let mut g_x = take!(*x);
                kernels::sigmoid_backward(&self.values[*out], &g_out, &mut g_x);
                put!(*x, g_x);
                put!(*out, g_out);
            }
            Op::ChannelBias { x, bias, out, channels } => {
                let g_out = take!(*out);
                let mut g_x = take!(*x);
                let mut g_bias = take!(*bias);
                kernels::channel_bias_backward(&g_out, *channels, &mut g_x, &mut g_bias);
                put!(*x, g_x);
                put!(*bias, g_bias);
                put!(*out, g_out);
            }
            Op::InstanceNorm { x, gain, bias, out, mean, inv_std } => {
                let g_out = take!(*out);
                let mut g_x = take!(*x);
                let mut g_gain = take!(*gain);
                let mut g_bias = take!(*bias);
                kernels::instance_norm_backward(
                    &self.values[*x],
                    &self.values[*gain],
                    mean,
                    inv_std,
                    &g_out,
                    &mut g_x,
                    &mut g_gain,
                    &mut g_bias,
                );
                put!(*x, g_x);
                put!(*gain, g_gain);
                put!(*bias, g_bias);
                put!(*out, g_out);
            }
            Op::Upsample2d { x, out, dims } => {
                let g_out = take!(*out);
                let mut g_x = take!(*x);
                kernels::upsample2d_backward(dims, &g_out, &mut g_x);
                put!(*x, g_x);
                put!(*out, g_out);
            }
            Op::TemporalReplicate { x, out, in_frames, per_frame, rate } => {
                let g_out = take!(*out);
                let mut g_x = take!(*x);
                kernels::temporal_replicate_backward(*in_frames, *per_frame, *rate, &g_out, &mut g_x);
                put!(*x, g_x);
                put!(*out, g_out);
            }
            Op::Tile { x, out, times } => {
                let g_out = take!(*out);
                let mut g_x = take!(*x);
                kernels::tile_backward(&g_out, *times, &mut g_x);
                put!(*x, g_x);
                put!(*out, g_out);
            }
            Op::ConcatChannels { a, b, out, ca, cb } => {
                let g_out = take!(*out);
                let mut g_a = take!(*a);
                let mut g_b = take!(*b);
                kernels::concat_channels_backward(&g_out, *ca, *cb, &mut g_a, &mut g_b);
                put!(*a, g_a);
                put!(*b, g_b);
                put!(*out, g_out);
            }
            Op::Affine { x, out, scale } => {
                let g_out = take!(*out);
                let mut g_x = take!(*x);
                kernels::affine_backward(*scale, &g_out, &mut g_x);
                put!(*x, g_x);
                put!(*out, g_out);
            }
            Op::GatherMean { x, out, plan } => {
                let g_out = take!(*out);
                let mut g_x = take!(*x);
                kernels::gather_mean_backward(plan, &g_out, &mut g_x);
                put!(*x, g_x);
                put!(*out, g_out);
            }
            Op::Mse { pred, out, target } => {
                let g = self.grads[*out][0];
                let mut g_pred = take!(*pred);
                kernels::mse_backward(&self.values[*pred], target, g, &mut g_pred);
                put!(*pred, g_pred);
            }
            Op::MseIndexed { pred, out, target, idx } => {
                let g = self.grads[*out][0];
                let mut g_pred = take!(*pred);
                kernels::mse_indexed_backward(&self.values[*pred], target, idx, g, &mut g_pred);
                put!(*pred, g_pred);
            }
            Op::WeightedSum { terms, out } => {
                let g = self.grads[*out][0];
                for &(id, wgt) in terms {
                    self.grads[id][0] += g * wgt;
                }
            }
            Op::Square { x, out } => {
                let g_out = take!(*out);
                let mut g_x = take!(*x);
                for ((dx, &v), &g) in g_x.iter_mut().zip(&self.values[*x]).zip(&g_out) {
                    *dx += 2.0 * v * g;
                }
                put!(*x, g_x);
                put!(*out, g_out);
            }
            Op::SumAll { x, out } => {
                let g = self.grads[*out][0];
                for dx in self.grads[*x].iter_mut() {
                    *dx += g;
                }
            }
        }
    }
}

/// Central finite differences for a scalar graph: rebuilds the tape with each
/// input element nudged by +-h and compares against the analytic adjoints.
/// Returns the largest relative error. Entries where both gradients are below
/// `floor` in magnitude are treated as matching; with an f32 forward, finite
/// differences of near-zero gradients measure rounding noise, not calculus.
pub fn finite_difference_check<F>(inputs: &[Vec<f32>], h: f64, floor: f64, build: F) -> Result<f64>
where
    F: Fn(&mut GradTape, &[BufId]) -> BufId,
{
    let mut tape = GradTape::new();
    let ids: Vec<BufId> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let loss = build(&mut tape, &ids);
    tape.backward(loss)?;
    let analytic: Vec<Vec<f32>> =
        ids.iter().map(|&id| tape.gradient(id).map(|g| g.to_vec())).collect::<Result<_>>()?;

    let eval = |perturbed: &[Vec<f32>]| -> f64 {
        let mut t = GradTape::new();
        let ids: Vec<BufId> = perturbed.iter().map(|v| t.leaf(v)).collect();
        let loss = build(&mut t, &ids);
        t.scalar_f64(loss)
    };

    let mut max_rel: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i][j] += h as f32;
            let mut minus = inputs.to_vec();
            minus[i][j] -= h as f32;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[i][j] as f64;
            if a.abs() < floor && numeric.abs() < floor {
                continue;
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}
