//! The denoiser and motion decoder: a named parameter table with a fixed
//! draw order, forwards written once over the `Engine` trait (so the same
//! code runs plain for inference and taped for training), and the
//! checkpoint container both networks are saved in.
//!
//! Denoiser: the conditioning frame is concatenated channel-wise onto every
//! frame, then two levels of per-frame 3x3 convolutions (widths 32/64)
//! interleaved with length-3 temporal convolutions, rectified, with the
//! sinusoidal timestep embedding mapped by a per-level two-layer perceptron
//! and added as a per-channel bias; the final 3x3 projection starts at zero
//! so an untrained model predicts zero noise.
//!
//! Motion decoder: temporal replication to pixel frame count, then two
//! [upsample, 3x3 conv, normalization, rectifier] blocks, a final nearest
//! upsample to full resolution, and a sigmoid-squashed 1x1 projection to
//! (u, v, mask).

use std::collections::HashMap;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::{read_checkpoint, write_checkpoint, Checkpoint};
use crate::numeric::engine::Engine;
use crate::numeric::kernels::{Conv2dDims, TConvDims, UpsampleDims};
use crate::numeric::rng::RngState;
use crate::numeric::tensor::Tensor;

// ── architecture description ─────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub latent_channels: usize,
    pub width1: usize,
    pub width2: usize,
    pub embed_dim: usize,
    pub dec_width1: usize,
    pub dec_width2: usize,
    pub spatial_factor: usize,
    pub temporal_factor: usize,
}

impl ModelConfig {
    /// Desk-scale architecture over a run's latent geometry.
    pub fn desk(run: &RunConfig) -> ModelConfig {
        ModelConfig {
            latent_channels: run.latent_channels,
            width1: 32,
            width2: 64,
            embed_dim: 32,
            dec_width1: 12,
            dec_width2: 8,
            spatial_factor: run.spatial_factor,
            temporal_factor: run.temporal_factor,
        }
    }

    /// Architecture signature recorded in checkpoints; a checkpoint only
    /// loads into the identical architecture.
    pub fn signature(&self) -> String {
        format!(
            "anw1 c{} w{}-{} e{} m{}-{} s{} r{}",
            self.latent_channels,
            self.width1,
            self.width2,
            self.embed_dim,
            self.dec_width1,
            self.dec_width2,
            self.spatial_factor,
            self.temporal_factor
        )
    }

    /// Decoder upsampling split: two in-block factors of at most 2, then a
    /// trailing nearest factor covering the rest of the spatial factor.
    pub fn upsample_plan(&self) -> (usize, usize, usize) {
        let s = self.spatial_factor;
        let u1 = s.min(2);
        let u2 = (s / u1).min(2);
        (u1, u2, s / (u1 * u2))
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0
            || self.width1 == 0
            || self.width2 == 0
            || self.dec_width1 == 0
            || self.dec_width2 == 0
        {
            return Err(Error::config("model widths must be positive".to_string()));
        }
        if self.embed_dim < 2 || self.embed_dim % 2 != 0 {
            return Err(Error::config(format!(
                "embedding dim {} must be even (sine/cosine pairs)",
                self.embed_dim
            )));
        }
        if !self.spatial_factor.is_power_of_two() {
            return Err(Error::config(format!(
                "spatial factor {} must be a power of two",
                self.spatial_factor
            )));
        }
        if self.temporal_factor == 0 {
            return Err(Error::config("temporal factor must be positive".to_string()));
        }
        Ok(())
    }
}

/// Latent grid a forward pass runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentGrid {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl LatentGrid {
    pub fn cells(&self) -> usize {
        self.frames * self.height * self.width
    }
}

// ── parameter table ──────────────────────────────────────────────────────

enum Init {
    He { fan_in: usize },
    Zero,
    One,
}

fn param_specs(cfg: &ModelConfig) -> Vec<(&'static str, Vec<usize>, Init)> {
    let (c, w1, w2, e) = (cfg.latent_channels, cfg.width1, cfg.width2, cfg.embed_dim);
    let (d1, d2) = (cfg.dec_width1, cfg.dec_width2);
    vec![
        ("den.conv1.w", vec![w1, 3, 3, 2 * c], Init::He { fan_in: 9 * 2 * c }),
        ("den.conv1.b", vec![w1], Init::Zero),
        ("den.emb1.l1.w", vec![e, e], Init::He { fan_in: e }),
        ("den.emb1.l1.b", vec![e], Init::Zero),
        ("den.emb1.l2.w", vec![w1, e], Init::He { fan_in: e }),
        ("den.emb1.l2.b", vec![w1], Init::Zero),
        ("den.tconv1.w", vec![w1, 3, w1], Init::He { fan_in: 3 * w1 }),
        ("den.tconv1.b", vec![w1], Init::Zero),
        ("den.conv2.w", vec![w2, 3, 3, w1], Init::He { fan_in: 9 * w1 }),
        ("den.conv2.b", vec![w2], Init::Zero),
        ("den.emb2.l1.w", vec![e, e], Init::He { fan_in: e }),
        ("den.emb2.l1.b", vec![e], Init::Zero),
        ("den.emb2.l2.w", vec![w2, e], Init::He { fan_in: e }),
        ("den.emb2.l2.b", vec![w2], Init::Zero),
        ("den.tconv2.w", vec![w2, 3, w2], Init::He { fan_in: 3 * w2 }),
        ("den.tconv2.b", vec![w2], Init::Zero),
        // Zero-initialized final projection: a fresh model predicts zero noise.
        ("den.out.w", vec![c, 3, 3, w2], Init::Zero),
        ("den.out.b", vec![c], Init::Zero),
        ("dec.conv1.w", vec![d1, 3, 3, c], Init::He { fan_in: 9 * c }),
        ("dec.conv1.b", vec![d1], Init::Zero),
        ("dec.norm1.gain", vec![d1], Init::One),
        ("dec.norm1.bias", vec![d1], Init::Zero),
        ("dec.conv2.w", vec![d2, 3, 3, d1], Init::He { fan_in: 9 * d1 }),
        ("dec.conv2.b", vec![d2], Init::Zero),
        ("dec.norm2.gain", vec![d2], Init::One),
        ("dec.norm2.bias", vec![d2], Init::Zero),
        ("dec.out.w", vec![3, 1, 1, d2], Init::He { fan_in: d2 }),
        ("dec.out.b", vec![3], Init::Zero),
    ]
}

/// Named, ordered parameter set. Order is the draw order at initialization
/// and the gradient/optimizer order during training.
#[derive(Debug, Clone)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new(entries: Vec<(String, Tensor)>) -> Result<ParamStore> {
        let mut index = HashMap::new();
        for (i, (name, _)) in entries.iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate parameter name {name}")));
            }
        }
        Ok(ParamStore { entries, index })
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn index(&self, name: &str) -> usize {
        *self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn tensor(&self, name: &str) -> &Tensor {
        &self.entries[self.index(name)].1
    }

    pub fn tensor_mut(&mut self, name: &str) -> &mut Tensor {
        let i = self.index(name);
        &mut self.entries[i].1
    }

    pub fn tensor_at(&self, i: usize) -> &Tensor {
        &self.entries[i].1
    }

    pub fn tensor_at_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar parameter count.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.data().len()).sum()
    }
}

/// Draws fresh parameters in table order: He-normal weights with
/// std sqrt(2 / fan_in), zero biases, unit norm gains, zero final denoiser
/// projection.
pub fn init_params(cfg: &ModelConfig, rng: &mut RngState) -> ParamStore {
    let mut entries = Vec::new();
    for (name, shape, init) in param_specs(cfg) {
        let len: usize = shape.iter().product();
        let data = match init {
            Init::He { fan_in } => {
                let std = (2.0 / fan_in as f32).sqrt();
                (0..len).map(|_| rng.normal_f32() * std).collect()
            }
            Init::Zero => vec![0.0; len],
            Init::One => vec![1.0; len],
        };
        entries.push((name.to_string(), Tensor::from_vec(&shape, data).expect("table shapes")));
    }
    ParamStore::new(entries).expect("table names are unique")
}

/// Loads every parameter into the engine, aligned with store order.
pub fn engine_params<E: Engine>(eng: &mut E, store: &ParamStore) -> Vec<E::Val> {
    store.entries().iter().map(|(_, t)| eng.leaf(t.data())).collect()
}

// ── timestep embedding ───────────────────────────────────────────────────

/// Sinusoidal position code for a 1-based step index: interleaved
/// sin/cos pairs over geometrically spaced frequencies.
pub fn sinusoidal_embed(t: usize, dim: usize) -> Vec<f32> {
    assert!(dim >= 2 && dim % 2 == 0, "embedding dim {dim} must be even");
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let freq = (-(10_000.0f64.ln()) * (2 * i) as f64 / dim as f64).exp();
        let angle = t as f64 * freq;
        out.push(angle.sin() as f32);
        out.push(angle.cos() as f32);
    }
    out
}

// ── forwards ─────────────────────────────────────────────────────────────

fn embed_head<E: Engine>(
    eng: &mut E,
    vals: &[E::Val],
    store: &ParamStore,
    prefix: &str,
    emb: &E::Val,
) -> E::Val {
    let v = |name: String| &vals[store.index(&name)];
    let h = eng.linear(emb, v(format!("{prefix}.l1.w")), v(format!("{prefix}.l1.b")));
    let h = eng.relu(&h);
    eng.linear(&h, v(format!("{prefix}.l2.w")), v(format!("{prefix}.l2.b")))
}

/// Predicts the noise in z_t given the conditioning frame latent and the
/// step index. z_t is (frames, h, w, C) flattened; cond is one (h, w, C)
/// frame, concatenated onto every frame.
pub fn denoiser_forward<E: Engine>(
    eng: &mut E,
    cfg: &ModelConfig,
    store: &ParamStore,
    vals: &[E::Val],
    z_t: &E::Val,
    cond: &E::Val,
    t: usize,
    grid: LatentGrid,
) -> Result<E::Val> {
    let c = cfg.latent_channels;
    if eng.data(z_t).len() != grid.cells() * c {
        return Err(Error::shape(format!(
            "z_t holds {} values, grid {grid:?} with {c} channels needs {}",
            eng.data(z_t).len(),
            grid.cells() * c
        )));
    }
    if eng.data(cond).len() != grid.height * grid.width * c {
        return Err(Error::shape(format!(
            "conditioning frame holds {} values, expected {}",
            eng.data(cond).len(),
            grid.height * grid.width * c
        )));
    }
    let v = |name: &str| &vals[store.index(name)];
    let emb = eng.leaf(&sinusoidal_embed(t, cfg.embed_dim));
    let bias1 = embed_head(eng, vals, store, "den.emb1", &emb);
    let bias2 = embed_head(eng, vals, store, "den.emb2", &emb);

    let cond_tiled = eng.tile(cond, grid.frames);
    let x = eng.concat_channels(z_t, &cond_tiled, c, c);

    let d1 = Conv2dDims {
        frames: grid.frames,
        height: grid.height,
        width: grid.width,
        in_c: 2 * c,
        out_c: cfg.width1,
        k: 3,
    };
    let y = eng.conv2d(&x, v("den.conv1.w"), v("den.conv1.b"), &d1);
    let y = eng.channel_bias(&y, &bias1);
    let y = eng.relu(&y);
    let t1 = TConvDims {
        frames: grid.frames,
        spatial: grid.height * grid.width,
        in_c: cfg.width1,
        out_c: cfg.width1,
        k: 3,
    };
    let y = eng.tconv(&y, v("den.tconv1.w"), v("den.tconv1.b"), &t1);
    let y = eng.relu(&y);

    let d2 = Conv2dDims { in_c: cfg.width1, out_c: cfg.width2, ..d1 };
    let y = eng.conv2d(&y, v("den.conv2.w"), v("den.conv2.b"), &d2);
    let y = eng.channel_bias(&y, &bias2);
    let y = eng.relu(&y);
    let t2 = TConvDims { in_c: cfg.width2, out_c: cfg.width2, ..t1 };
    let y = eng.tconv(&y, v("den.tconv2.w"), v("den.tconv2.b"), &t2);
    let y = eng.relu(&y);

    let dout = Conv2dDims { in_c: cfg.width2, out_c: c, ..d1 };
    Ok(eng.conv2d(&y, v("den.out.w"), v("den.out.b"), &dout))
}

/// Decodes a latent into per-frame (u, v, mask) motion maps at image
/// resolution, every value squashed into [0, 1].
pub fn motion_decode<E: Engine>(
    eng: &mut E,
    cfg: &ModelConfig,
    store: &ParamStore,
    vals: &[E::Val],
    z0: &E::Val,
    grid: LatentGrid,
) -> Result<E::Val> {
    let c = cfg.latent_channels;
    if eng.data(z0).len() != grid.cells() * c {
        return Err(Error::shape(format!(
            "latent holds {} values, grid {grid:?} with {c} channels needs {}",
            eng.data(z0).len(),
            grid.cells() * c
        )));
    }
    let v = |name: &str| &vals[store.index(name)];
    let (u1, u2, rest) = cfg.upsample_plan();
    let frames = (grid.frames - 1) * cfg.temporal_factor + 1;
    let (mut h, mut w) = (grid.height, grid.width);

    let mut y = eng.temporal_replicate(z0, grid.frames, h * w * c, cfg.temporal_factor);
    if u1 > 1 {
        y = eng.upsample2d(&y, &UpsampleDims { frames, height: h, width: w, channels: c, factor: u1 });
        h *= u1;
        w *= u1;
    }
    let c1 = Conv2dDims { frames, height: h, width: w, in_c: c, out_c: cfg.dec_width1, k: 3 };
    y = eng.conv2d(&y, v("dec.conv1.w"), v("dec.conv1.b"), &c1);
    y = eng.instance_norm(&y, v("dec.norm1.gain"), v("dec.norm1.bias"));
    y = eng.relu(&y);

    if u2 > 1 {
        y = eng.upsample2d(
            &y,
            &UpsampleDims { frames, height: h, width: w, channels: cfg.dec_width1, factor: u2 },
        );
        h *= u2;
        w *= u2;
    }
    let c2 = Conv2dDims { frames, height: h, width: w, in_c: cfg.dec_width1, out_c: cfg.dec_width2, k: 3 };
    y = eng.conv2d(&y, v("dec.conv2.w"), v("dec.conv2.b"), &c2);
    y = eng.instance_norm(&y, v("dec.norm2.gain"), v("dec.norm2.bias"));
    y = eng.relu(&y);

    if rest > 1 {
        y = eng.upsample2d(
            &y,
            &UpsampleDims { frames, height: h, width: w, channels: cfg.dec_width2, factor: rest },
        );
        h *= rest;
        w *= rest;
    }
    let cout = Conv2dDims { frames, height: h, width: w, in_c: cfg.dec_width2, out_c: 3, k: 1 };
    y = eng.conv2d(&y, v("dec.out.w"), v("dec.out.b"), &cout);
    Ok(eng.sigmoid(&y))
}

// ── checkpoints ──────────────────────────────────────────────────────────

const CFG_KEYS: [&str; 8] = [
    "latent_channels",
    "width1",
    "width2",
    "embed_dim",
    "dec_width1",
    "dec_width2",
    "spatial_factor",
    "temporal_factor",
];

fn cfg_values(cfg: &ModelConfig) -> [usize; 8] {
    [
        cfg.latent_channels,
        cfg.width1,
        cfg.width2,
        cfg.embed_dim,
        cfg.dec_width1,
        cfg.dec_width2,
        cfg.spatial_factor,
        cfg.temporal_factor,
    ]
}

/// Writes a checkpoint: architecture signature and fields, caller-supplied
/// manifest entries (training step, schedule parameters, preset), then every
/// parameter tensor in store order.
pub fn save_checkpoint(
    path: &Path,
    cfg: &ModelConfig,
    extra: &[(String, String)],
    store: &ParamStore,
) -> Result<()> {
    let mut manifest = vec![("signature".to_string(), cfg.signature())];
    for (key, value) in CFG_KEYS.iter().zip(cfg_values(cfg)) {
        manifest.push((key.to_string(), value.to_string()));
    }
    manifest.extend(extra.iter().cloned());
    let ckpt = Checkpoint { manifest, tensors: store.entries().to_vec() };
    write_checkpoint(path, &ckpt)
}

/// Loads a checkpoint, reconstructing and validating the architecture and
/// every parameter shape against the table. Returns the config, the
/// caller-side manifest entries, and the parameters.
pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, Vec<(String, String)>, ParamStore)> {
    let ckpt = read_checkpoint(path)?;
    let field = |key: &str| -> Result<usize> {
        ckpt.manifest_get(key)
            .ok_or_else(|| Error::format(path, format!("checkpoint manifest lacks {key}")))?
            .parse::<usize>()
            .map_err(|e| Error::format(path, format!("bad {key}: {e}")))
    };
    let nums: Vec<usize> = CFG_KEYS.iter().map(|k| field(k)).collect::<Result<_>>()?;
    let cfg = ModelConfig {
        latent_channels: nums[0],
        width1: nums[1],
        width2: nums[2],
        embed_dim: nums[3],
        dec_width1: nums[4],
        dec_width2: nums[5],
        spatial_factor: nums[6],
        temporal_factor: nums[7],
    };
    cfg.validate()?;
    let signature = ckpt
        .manifest_get("signature")
        .ok_or_else(|| Error::format(path, "checkpoint manifest lacks signature"))?;
    if signature != cfg.signature() {
        return Err(Error::format(
            path,
            format!("signature {signature:?} does not match fields ({})", cfg.signature()),
        ));
    }
    let specs = param_specs(&cfg);
    if ckpt.tensors.len() != specs.len() {
        return Err(Error::format(
            path,
            format!("checkpoint has {} tensors, architecture needs {}", ckpt.tensors.len(), specs.len()),
        ));
    }
    for ((name, tensor), (want_name, want_shape, _)) in ckpt.tensors.iter().zip(&specs) {
        if name != want_name || tensor.shape() != want_shape.as_slice() {
            return Err(Error::format(
                path,
                format!(
                    "parameter {name} {:?} does not match table entry {want_name} {want_shape:?}",
                    tensor.shape()
                ),
            ));
        }
        tensor.ensure_finite(name)?;
    }
    let keys: Vec<&str> = CFG_KEYS.iter().copied().chain(["signature"]).collect();
    let extra: Vec<(String, String)> = ckpt
        .manifest
        .iter()
        .filter(|(k, _)| !keys.contains(&k.as_str()))
        .cloned()
        .collect();
    Ok((cfg, extra, ParamStore::new(ckpt.tensors)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::engine::{PlainEngine, TapeEngine};
    use crate::numeric::rng::streams;

    fn tiny_config() -> ModelConfig {
        // The miniature instance used by the end-to-end gradient check.
        ModelConfig {
            latent_channels: 4,
            width1: 3,
            width2: 4,
            embed_dim: 4,
            dec_width1: 3,
            dec_width2: 3,
            spatial_factor: 2,
            temporal_factor: 4,
        }
    }

    #[test]
    fn miniature_parameter_count_is_frozen() {
        let store = init_params(&tiny_config(), &mut RngState::seed(1));
        assert_eq!(store.scalar_count(), 855, "miniature stays under the 1e3 budget");
        assert!(store.scalar_count() <= 1000);
    }

    #[test]
    fn desk_signature_and_plan() {
        let cfg = ModelConfig::desk(&RunConfig::default());
        assert_eq!(cfg.signature(), "anw1 c8 w32-64 e32 m12-8 s8 r4");
        assert_eq!(cfg.upsample_plan(), (2, 2, 2));
        assert_eq!(tiny_config().upsample_plan(), (2, 1, 1));
        let s4 = ModelConfig { spatial_factor: 4, ..tiny_config() };
        assert_eq!(s4.upsample_plan(), (2, 2, 1));
        cfg.validate().unwrap();
        assert!(ModelConfig { embed_dim: 5, ..cfg }.validate().is_err(), "odd embed dim");
    }

    #[test]
    fn fresh_denoiser_predicts_zero_noise() {
        let cfg = tiny_config();
        let store = init_params(&cfg, &mut RngState::stream(7, streams::PARAMS));
        let grid = LatentGrid { frames: 2, height: 4, width: 4 };
        let mut eng = PlainEngine::new();
        let vals = engine_params(&mut eng, &store);
        let mut rng = RngState::seed(2);
        let z = crate::numeric::rng::sample_standard_normal(&[2, 4, 4, 4], &mut rng);
        let cond = crate::numeric::rng::sample_standard_normal(&[4, 4, 4], &mut rng);
        let zl = eng.leaf(z.data());
        let cl = eng.leaf(cond.data());
        let out = denoiser_forward(&mut eng, &cfg, &store, &vals, &zl, &cl, 37, grid).unwrap();
        assert_eq!(eng.data(&out).len(), 2 * 4 * 4 * 4);
        assert!(
            eng.data(&out).iter().all(|&v| v == 0.0),
            "zero-initialized projection silences the fresh model"
        );
    }

    #[test]
    fn denoiser_rejects_bad_shapes_and_reacts_to_t() {
        let cfg = tiny_config();
        let mut store = init_params(&cfg, &mut RngState::stream(8, streams::PARAMS));
        // Wake the output projection so t can show through.
        let mut wrng = RngState::seed(3);
        for v in store.tensor_mut("den.out.w").data_mut() {
            *v = wrng.normal_f32() * 0.1;
        }
        let grid = LatentGrid { frames: 2, height: 4, width: 4 };
        let mut eng = PlainEngine::new();
        let vals = engine_params(&mut eng, &store);
        let mut rng = RngState::seed(4);
        let z = crate::numeric::rng::sample_standard_normal(&[2, 4, 4, 4], &mut rng);
        let cond = crate::numeric::rng::sample_standard_normal(&[4, 4, 4], &mut rng);
        let zl = eng.leaf(z.data());
        let cl = eng.leaf(cond.data());

        let short = eng.leaf(&z.data()[..32]);
        assert!(denoiser_forward(&mut eng, &cfg, &store, &vals, &short, &cl, 5, grid).is_err());
        assert!(denoiser_forward(&mut eng, &cfg, &store, &vals, &zl, &short, 5, grid).is_err());

        let a = denoiser_forward(&mut eng, &cfg, &store, &vals, &zl, &cl, 3, grid).unwrap();
        let b = denoiser_forward(&mut eng, &cfg, &store, &vals, &zl, &cl, 3, grid).unwrap();
        assert_eq!(eng.data(&a), eng.data(&b), "same inputs, same prediction");
        let c = denoiser_forward(&mut eng, &cfg, &store, &vals, &zl, &cl, 150, grid).unwrap();
        let moved = eng
            .data(&a)
            .iter()
            .zip(eng.data(&c))
            .map(|(&x, &y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert!(moved > 0.0, "timestep embedding must reach the output");
    }

    #[test]
    fn decoder_shape_bounds_and_determinism() {
        let cfg = ModelConfig { spatial_factor: 8, ..tiny_config() };
        let store = init_params(&cfg, &mut RngState::stream(9, streams::PARAMS));
        let grid = LatentGrid { frames: 2, height: 1, width: 1 };
        let mut eng = PlainEngine::new();
        let vals = engine_params(&mut eng, &store);
        let mut rng = RngState::seed(5);
        let z = crate::numeric::rng::sample_standard_normal(&[2, 1, 1, 4], &mut rng);
        let zl = eng.leaf(z.data());
        let m = motion_decode(&mut eng, &cfg, &store, &vals, &zl, grid).unwrap();
        // (2,1,1,C) with s=8, r=4 decodes to (5, 8, 8, 3).
        assert_eq!(eng.data(&m).len(), 5 * 8 * 8 * 3);
        assert!(eng.data(&m).iter().all(|&v| (0.0..=1.0).contains(&v)), "sigmoid bounds");
        let m2 = motion_decode(&mut eng, &cfg, &store, &vals, &zl, grid).unwrap();
        assert_eq!(eng.data(&m), eng.data(&m2));
        let short = eng.leaf(&z.data()[..4]);
        assert!(motion_decode(&mut eng, &cfg, &store, &vals, &short, grid).is_err());
    }

    #[test]
    fn plain_and_taped_model_forwards_agree_bitwise() {
        let cfg = tiny_config();
        let mut store = init_params(&cfg, &mut RngState::stream(10, streams::PARAMS));
        let mut wrng = RngState::seed(6);
        for v in store.tensor_mut("den.out.w").data_mut() {
            *v = wrng.normal_f32() * 0.1;
        }
        let grid = LatentGrid { frames: 2, height: 4, width: 4 };
        let mut rng = RngState::seed(7);
        let z = crate::numeric::rng::sample_standard_normal(&[2, 4, 4, 4], &mut rng);
        let cond = crate::numeric::rng::sample_standard_normal(&[4, 4, 4], &mut rng);

        let mut plain = PlainEngine::new();
        let pv = engine_params(&mut plain, &store);
        let pz = plain.leaf(z.data());
        let pc = plain.leaf(cond.data());
        let p_eps =
            denoiser_forward(&mut plain, &cfg, &store, &pv, &pz, &pc, 41, grid).unwrap();
        let p_m = motion_decode(&mut plain, &cfg, &store, &pv, &p_eps, grid).unwrap();

        let mut taped = TapeEngine::new();
        let tv = engine_params(&mut taped, &store);
        let tz = taped.leaf(z.data());
        let tc = taped.leaf(cond.data());
        let t_eps =
            denoiser_forward(&mut taped, &cfg, &store, &tv, &tz, &tc, 41, grid).unwrap();
        let t_m = motion_decode(&mut taped, &cfg, &store, &tv, &t_eps, grid).unwrap();

        assert_eq!(plain.data(&p_eps), taped.data(&t_eps), "denoiser outputs diverge");
        assert_eq!(plain.data(&p_m), taped.data(&t_m), "decoder outputs diverge");
    }

    #[test]
    fn sinusoidal_embedding_is_bounded_and_distinguishes_steps() {
        let a = sinusoidal_embed(1, 8);
        let b = sinusoidal_embed(2, 8);
        assert_eq!(a.len(), 8);
        assert!(a.iter().all(|v| v.abs() <= 1.0));
        assert_ne!(a, b);
        // Pairs are (sin, cos) of one angle.
        for pair in a.chunks_exact(2) {
            assert!((pair[0] * pair[0] + pair[1] * pair[1] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn checkpoint_roundtrip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.anwc");
        let cfg = tiny_config();
        let store = init_params(&cfg, &mut RngState::stream(11, streams::PARAMS));
        let extra = vec![
            ("step".to_string(), "123".to_string()),
            ("preset".to_string(), "full".to_string()),
        ];
        save_checkpoint(&path, &cfg, &extra, &store).unwrap();
        let (cfg2, extra2, store2) = load_checkpoint(&path).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(extra, extra2);
        assert_eq!(store.len(), store2.len());
        for ((n1, t1), (n2, t2)) in store.entries().iter().zip(store2.entries()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.data(), t2.data(), "parameter {n1} changed in flight");
        }
    }

    #[test]
    fn checkpoint_rejects_signature_tamper_and_shape_drift() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let store = init_params(&cfg, &mut RngState::stream(12, streams::PARAMS));

        // A checkpoint written for a different architecture must not load as
        // this one: flip a field but keep the stale signature.
        let path = dir.path().join("tampered.anwc");
        let mut manifest = vec![("signature".to_string(), cfg.signature())];
        let mut wrong = cfg;
        wrong.width1 += 1;
        for (key, value) in CFG_KEYS.iter().zip(cfg_values(&wrong)) {
            manifest.push((key.to_string(), value.to_string()));
        }
        let ckpt = Checkpoint { manifest, tensors: store.entries().to_vec() };
        crate::io::write_checkpoint(&path, &ckpt).unwrap();
        assert!(load_checkpoint(&path).is_err(), "stale signature must be rejected");

        // Dropping a tensor breaks the table match.
        let path2 = dir.path().join("short.anwc");
        let mut manifest = vec![("signature".to_string(), cfg.signature())];
        for (key, value) in CFG_KEYS.iter().zip(cfg_values(&cfg)) {
            manifest.push((key.to_string(), value.to_string()));
        }
        let mut tensors = store.entries().to_vec();
        tensors.pop();
        let ckpt = Checkpoint { manifest, tensors };
        crate::io::write_checkpoint(&path2, &ckpt).unwrap();
        assert!(load_checkpoint(&path2).is_err(), "missing parameter must be rejected");
    }
}
