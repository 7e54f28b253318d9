//! Run configuration: a sectioned `key = value` text format plus
//! `section.key=value` overrides, rendered back verbatim into output
//! manifests so every run is reproducible from its config and seed alone.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

/// Ablation presets: which loss branches train.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Articulated noise sampling only: the appearance diffusion loss.
    Base,
    /// Adds the joint motion-decoding loss.
    Jaml,
    /// Adds the motion-consistency loss on fused UV noise; all three terms.
    Full,
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Preset> {
        match s {
            "base" => Ok(Preset::Base),
            "jaml" => Ok(Preset::Jaml),
            "full" => Ok(Preset::Full),
            other => Err(Error::config(format!(
                "unknown preset {other:?}, expected base | jaml | full"
            ))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Base => "base",
            Preset::Jaml => "jaml",
            Preset::Full => "full",
        })
    }
}

/// Training hyperparameters. Loss weights are the configured values; the
/// preset zeroes branches at training time without editing the config.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda_diff: f32,
    pub lambda_mc: f32,
    pub lambda_md: f32,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub steps: usize,
    /// Degradation level distribution at training time: U[gamma_lo, gamma_hi].
    pub gamma_lo: f32,
    pub gamma_hi: f32,
    /// Reversal cap: at or above this level the degradation is treated as
    /// non-invertible and the consistency loss is skipped.
    pub gamma_cap: f32,
    pub checkpoint_interval: usize,
    pub preset: Preset,
    /// Fuse UV noise per frame instead of jointly across the clip.
    pub fuse_per_frame: bool,
    /// Restrict the motion-decoding loss to body pixels.
    pub masked_md: bool,
}

impl TrainConfig {
    /// Loss weights with the preset applied.
    pub fn effective_lambdas(&self) -> (f32, f32, f32) {
        match self.preset {
            Preset::Base => (self.lambda_diff, 0.0, 0.0),
            Preset::Jaml => (self.lambda_diff, 0.0, self.lambda_md),
            Preset::Full => (self.lambda_diff, self.lambda_mc, self.lambda_md),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // [paths]
    pub data_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub output_dir: PathBuf,
    // [video]
    pub height: usize,
    pub width: usize,
    /// Latent frames beyond the first; pixel frame count is r*f + 1.
    pub f: usize,
    pub spatial_factor: usize,
    pub temporal_factor: usize,
    pub latent_channels: usize,
    // [texture]
    pub texture_u: usize,
    pub texture_v: usize,
    /// When true, uncovered pixels reuse one fixed noise field across frames
    /// instead of drawing fresh background noise every frame (the default).
    pub static_background: bool,
    // [schedule]
    pub schedule_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub sample_steps: usize,
    // [train]
    pub train: TrainConfig,
    // [infer]
    pub infer_gamma: f32,
    // [data]
    pub clips: usize,
    pub holdout_clips: usize,
    pub motion_amplitude: f32,
    // [run]
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            data_dir: PathBuf::from("data"),
            checkpoint: PathBuf::from("out/checkpoint.anwc"),
            output_dir: PathBuf::from("out"),
            height: 96,
            width: 128,
            f: 2,
            spatial_factor: 8,
            temporal_factor: 4,
            latent_channels: 8,
            texture_u: 64,
            texture_v: 64,
            static_background: false,
            schedule_steps: 200,
            beta_min: 1e-4,
            beta_max: 0.02,
            sample_steps: 20,
            train: TrainConfig {
                lambda_diff: 1.0,
                lambda_mc: 0.5,
                lambda_md: 0.5,
                learning_rate: 1e-4,
                batch_size: 2,
                steps: 2000,
                gamma_lo: 0.0,
                gamma_hi: 1.0,
                gamma_cap: 0.95,
                checkpoint_interval: 500,
                preset: Preset::Full,
                fuse_per_frame: false,
                masked_md: false,
            },
            infer_gamma: 0.1,
            clips: 16,
            holdout_clips: 4,
            motion_amplitude: 0.35,
            seed: 7,
        }
    }
}

impl RunConfig {
    /// Pixel frame count per clip.
    pub fn n_frames(&self) -> usize {
        self.temporal_factor * self.f + 1
    }

    /// Latent frame count after temporal downsampling.
    pub fn latent_frames(&self) -> usize {
        self.f + 1
    }

    pub fn latent_height(&self) -> usize {
        self.height / self.spatial_factor
    }

    pub fn latent_width(&self) -> usize {
        self.width / self.spatial_factor
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("reading {}: {e}", path.display())))?;
        let mut cfg = RunConfig::default();
        for (section, key, value) in parse_kv_text(&text)? {
            cfg.apply(&section, &key, &value)?;
        }
        Ok(cfg)
    }

    /// Applies one `section.key=value` override.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (dotted, value) = spec
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override {spec:?} is not key=value")))?;
        let (section, key) = dotted
            .split_once('.')
            .ok_or_else(|| Error::config(format!("override key {dotted:?} is not section.key")))?;
        self.apply(section.trim(), key.trim(), value.trim())
    }

    fn apply(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(section: &str, key: &str, value: &str) -> Result<T>
        where
            T::Err: fmt::Display,
        {
            value
                .parse::<T>()
                .map_err(|e| Error::config(format!("{section}.{key} = {value:?}: {e}")))
        }
        match (section, key) {
            ("paths", "data_dir") => self.data_dir = PathBuf::from(value),
            ("paths", "checkpoint") => self.checkpoint = PathBuf::from(value),
            ("paths", "output_dir") => self.output_dir = PathBuf::from(value),
            ("video", "height") => self.height = num(section, key, value)?,
            ("video", "width") => self.width = num(section, key, value)?,
            ("video", "f") => self.f = num(section, key, value)?,
            ("video", "spatial_factor") => self.spatial_factor = num(section, key, value)?,
            ("video", "temporal_factor") => self.temporal_factor = num(section, key, value)?,
            ("video", "latent_channels") => self.latent_channels = num(section, key, value)?,
            ("texture", "u") => self.texture_u = num(section, key, value)?,
            ("texture", "v") => self.texture_v = num(section, key, value)?,
            ("texture", "static_background") => {
                self.static_background = num(section, key, value)?
            }
            ("schedule", "steps") => self.schedule_steps = num(section, key, value)?,
            ("schedule", "beta_min") => self.beta_min = num(section, key, value)?,
            ("schedule", "beta_max") => self.beta_max = num(section, key, value)?,
            ("schedule", "sample_steps") => self.sample_steps = num(section, key, value)?,
            ("train", "lambda_diff") => self.train.lambda_diff = num(section, key, value)?,
            ("train", "lambda_mc") => self.train.lambda_mc = num(section, key, value)?,
            ("train", "lambda_md") => self.train.lambda_md = num(section, key, value)?,
            ("train", "learning_rate") => self.train.learning_rate = num(section, key, value)?,
            ("train", "batch_size") => self.train.batch_size = num(section, key, value)?,
            ("train", "steps") => self.train.steps = num(section, key, value)?,
            ("train", "gamma_lo") => self.train.gamma_lo = num(section, key, value)?,
            ("train", "gamma_hi") => self.train.gamma_hi = num(section, key, value)?,
            ("train", "gamma_cap") => self.train.gamma_cap = num(section, key, value)?,
            ("train", "checkpoint_interval") => {
                self.train.checkpoint_interval = num(section, key, value)?
            }
            ("train", "preset") => self.train.preset = value.parse()?,
            ("train", "fuse_per_frame") => self.train.fuse_per_frame = num(section, key, value)?,
            ("train", "masked_md") => self.train.masked_md = num(section, key, value)?,
            ("infer", "gamma") => self.infer_gamma = num(section, key, value)?,
            ("data", "clips") => self.clips = num(section, key, value)?,
            ("data", "holdout_clips") => self.holdout_clips = num(section, key, value)?,
            ("data", "motion_amplitude") => self.motion_amplitude = num(section, key, value)?,
            ("run", "seed") => self.seed = num(section, key, value)?,
            _ => return Err(Error::config(format!("unknown config key {section}.{key}"))),
        }
        Ok(())
    }

    /// Renders the full config; `load(render(c)) == c` and manifests embed
    /// this text verbatim.
    pub fn render(&self) -> String {
        let t = &self.train;
        format!(
            "[paths]\n\
             data_dir = {}\n\
             checkpoint = {}\n\
             output_dir = {}\n\
             \n[video]\n\
             height = {}\nwidth = {}\nf = {}\n\
             spatial_factor = {}\ntemporal_factor = {}\nlatent_channels = {}\n\
             \n[texture]\nu = {}\nv = {}\nstatic_background = {}\n\
             \n[schedule]\nsteps = {}\nbeta_min = {}\nbeta_max = {}\nsample_steps = {}\n\
             \n[train]\n\
             lambda_diff = {}\nlambda_mc = {}\nlambda_md = {}\n\
             learning_rate = {}\nbatch_size = {}\nsteps = {}\n\
             gamma_lo = {}\ngamma_hi = {}\ngamma_cap = {}\n\
             checkpoint_interval = {}\npreset = {}\nfuse_per_frame = {}\nmasked_md = {}\n\
             \n[infer]\ngamma = {}\n\
             \n[data]\nclips = {}\nholdout_clips = {}\nmotion_amplitude = {}\n\
             \n[run]\nseed = {}\n",
            self.data_dir.display(),
            self.checkpoint.display(),
            self.output_dir.display(),
            self.height,
            self.width,
            self.f,
            self.spatial_factor,
            self.temporal_factor,
            self.latent_channels,
            self.texture_u,
            self.texture_v,
            self.static_background,
            self.schedule_steps,
            self.beta_min,
            self.beta_max,
            self.sample_steps,
            t.lambda_diff,
            t.lambda_mc,
            t.lambda_md,
            t.learning_rate,
            t.batch_size,
            t.steps,
            t.gamma_lo,
            t.gamma_hi,
            t.gamma_cap,
            t.checkpoint_interval,
            t.preset,
            t.fuse_per_frame,
            t.masked_md,
            self.infer_gamma,
            self.clips,
            self.holdout_clips,
            self.motion_amplitude,
            self.seed,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::config(msg));
        let s = self.spatial_factor;
        if s == 0 || !s.is_power_of_two() {
            return bad(format!("spatial_factor {s} must be a power of two"));
        }
        if self.height == 0 || self.width == 0 {
            return bad("image dimensions must be positive".to_string());
        }
        if self.height % s != 0 || self.width % s != 0 {
            return bad(format!(
                "image {}x{} not divisible by spatial_factor {s}",
                self.height, self.width
            ));
        }
        if self.temporal_factor == 0 || self.f == 0 {
            return bad("temporal_factor and f must be positive".to_string());
        }
        if self.latent_channels < 3 {
            // The codec keeps three RGB channel means; fewer channels cannot
            // carry a decodable image.
            return bad(format!("latent_channels {} must be at least 3", self.latent_channels));
        }
        if self.texture_u == 0 || self.texture_v == 0 {
            return bad("texture dimensions must be positive".to_string());
        }
        if self.schedule_steps == 0 {
            return bad("schedule steps must be positive".to_string());
        }
        if !(self.beta_min > 0.0 && self.beta_min <= self.beta_max && self.beta_max < 1.0) {
            return bad(format!(
                "betas must satisfy 0 < beta_min <= beta_max < 1, got [{}, {}]",
                self.beta_min, self.beta_max
            ));
        }
        if self.sample_steps == 0 || self.sample_steps > self.schedule_steps {
            return bad(format!(
                "sample_steps {} must be in [1, {}]",
                self.sample_steps, self.schedule_steps
            ));
        }
        let t = &self.train;
        if t.lambda_diff < 0.0 || t.lambda_mc < 0.0 || t.lambda_md < 0.0 {
            return bad("loss weights must be nonnegative".to_string());
        }
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", t.learning_rate));
        }
        if t.batch_size == 0 || t.steps == 0 || t.checkpoint_interval == 0 {
            return bad("batch_size, steps, checkpoint_interval must be positive".to_string());
        }
        if !(0.0..=1.0).contains(&t.gamma_lo)
            || !(0.0..=1.0).contains(&t.gamma_hi)
            || t.gamma_lo > t.gamma_hi
        {
            return bad(format!(
                "gamma bounds [{}, {}] must satisfy 0 <= lo <= hi <= 1",
                t.gamma_lo, t.gamma_hi
            ));
        }
        if !(t.gamma_cap > 0.0 && t.gamma_cap <= 1.0) {
            return bad(format!("gamma_cap {} must be in (0, 1]", t.gamma_cap));
        }
        if !(0.0..=1.0).contains(&self.infer_gamma) {
            return bad(format!("inference gamma {} must be in [0, 1]", self.infer_gamma));
        }
        if self.clips == 0 {
            return bad("clips must be positive".to_string());
        }
        if !(self.motion_amplitude >= 0.0) {
            return bad(format!("motion_amplitude {} must be nonnegative", self.motion_amplitude));
        }
        Ok(())
    }
}

/// Parses sectioned `key = value` text: `[section]` headers, `#` comments,
/// blank lines ignored. Returns entries in file order.
pub fn parse_kv_text(text: &str) -> Result<Vec<(String, String, String)>> {
    let mut out = Vec::new();
    let mut section = String::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| Error::config(format!("line {}: unclosed section", lineno + 1)))?;
            section = name.trim().to_string();
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::config(format!("line {}: expected key = value, got {line:?}", lineno + 1))
        })?;
        out.push((section.clone(), k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}
