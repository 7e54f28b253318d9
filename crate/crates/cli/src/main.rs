//! `anw`: data generation, training, animation, evaluation, the degradation
//! sweep, the invariant self-check, and noise visualization, all driven by
//! one config file plus `--set section.key=value` overrides.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 self-check
//! failure. `ANW_THREADS` is the only environment variable consulted.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use anw_core::body::{read_skeleton, PoseSequence, Skeleton};
use anw_core::config::RunConfig;
use anw_core::dataset::{generate_dataset, load_dataset, write_dataset, Clip};
use anw_core::diffusion::model::load_checkpoint;
use anw_core::error::{Error, Result};
use anw_core::io::{read_ppm, read_tensor, write_ppm};
use anw_core::numeric::tensor::Tensor;
use anw_core::pipeline::{
    animate, best_ssim_gamma, evaluate_clips, sweep_csv, sweep_gamma, write_animation,
};
use anw_core::selfcheck;
use anw_core::training::run_training;

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_CHECK: u8 = 3;

#[derive(Parser)]
#[command(
    name = "anw",
    about = "Articulated noise warping laboratory",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file (key = value with [sections]); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config entry, e.g. --set train.steps=50 (repeatable).
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic articulated-puppet dataset.
    GenData(ConfigArgs),
    /// Train the joint appearance-motion model on the generated dataset.
    Train(ConfigArgs),
    /// Animate a reference image along a pose sequence with the trained model.
    Animate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Reference frame, P6 pixmap matching the configured size.
        #[arg(long)]
        reference: PathBuf,
        /// Driving pose sequence tensor (.anwt).
        #[arg(long)]
        poses: PathBuf,
        /// Skeleton file; the built-in humanoid when omitted.
        #[arg(long)]
        skeleton: Option<PathBuf>,
        /// Output directory; <output_dir>/animation when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score generated videos against a ground-truth dataset.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory holding clip_NNN/video.anwt for every ground-truth clip.
        #[arg(long)]
        generated: PathBuf,
        /// Ground-truth dataset directory.
        #[arg(long)]
        truth: PathBuf,
    },
    /// Animate and evaluate held-out clips across degradation levels.
    SweepGamma {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated degradation levels to sweep.
        #[arg(long, default_value = "0.1,0.3,0.5,0.7,1.0")]
        gammas: String,
    },
    /// Run the invariant self-check suite.
    Check(ConfigArgs),
    /// Render a noise tensor's channel triads as P6 pixmaps.
    DumpNoise {
        #[command(flatten)]
        config: ConfigArgs,
        /// Noise tensor (.anwt), shaped (frames, H, W, C).
        #[arg(long)]
        tensor: PathBuf,
        /// Output directory; <output_dir>/noise when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are successful outputs, not usage errors.
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Config(_) => EXIT_USAGE,
                _ => EXIT_RUNTIME,
            };
            ExitCode::from(code)
        }
    }
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for spec in &args.overrides {
        cfg.apply_override(spec)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(command: Command) -> Result<u8> {
    match command {
        Command::GenData(args) => cmd_gen_data(&load_config(&args)?),
        Command::Train(args) => cmd_train(&load_config(&args)?),
        Command::Animate { config, reference, poses, skeleton, out } => {
            cmd_animate(&load_config(&config)?, &reference, &poses, skeleton.as_deref(), out)
        }
        Command::Eval { config, generated, truth } => {
            cmd_eval(&load_config(&config)?, &generated, &truth)
        }
        Command::SweepGamma { config, gammas } => {
            let cfg = load_config(&config)?;
            let levels = parse_gammas(&gammas)?;
            cmd_sweep_gamma(&cfg, &levels)
        }
        Command::Check(args) => cmd_check(&load_config(&args)?),
        Command::DumpNoise { config, tensor, out } => {
            cmd_dump_noise(&load_config(&config)?, &tensor, out)
        }
    }
}

fn parse_gammas(text: &str) -> Result<Vec<f32>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f32>()
                .map_err(|e| Error::config(format!("gamma list entry {s:?}: {e}")))
        })
        .collect()
}

// ── subcommands ──────────────────────────────────────────────────────────

fn cmd_gen_data(cfg: &RunConfig) -> Result<u8> {
    let clips = generate_dataset(cfg)?;
    write_dataset(cfg, &clips)?;
    println!(
        "wrote {} training and {} held-out clips ({} frames of {}x{}) to {}",
        cfg.clips,
        cfg.holdout_clips,
        cfg.n_frames(),
        cfg.height,
        cfg.width,
        cfg.data_dir.display()
    );
    Ok(0)
}

fn cmd_train(cfg: &RunConfig) -> Result<u8> {
    let (train_clips, holdout) = load_dataset(&cfg.data_dir)?;
    println!(
        "training preset {} for {} steps on {} clips ({} held out)",
        cfg.train.preset,
        cfg.train.steps,
        train_clips.len(),
        holdout.len()
    );
    let interval = cfg.train.checkpoint_interval;
    let outcome = run_training(cfg, &train_clips, |s| {
        if s.step % interval == 0 || s.step + 1 == cfg.train.steps {
            println!(
                "step {}/{}: total {:.5} (diff {:.5} mc {:.5} md {:.5}) gamma {:.2} t {}",
                s.step, cfg.train.steps, s.total, s.l_diff, s.l_mc, s.l_md, s.gamma, s.t
            );
        }
    })?;
    println!("checkpoint: {}", outcome.checkpoint.display());
    println!("log: {}", outcome.log.display());
    Ok(0)
}

fn cmd_animate(
    cfg: &RunConfig,
    reference: &Path,
    poses: &Path,
    skeleton: Option<&Path>,
    out: Option<PathBuf>,
) -> Result<u8> {
    let (mcfg, _, store) = load_checkpoint(&cfg.checkpoint)?;
    let reference = read_ppm(reference)?;
    let poses = PoseSequence::from_tensor(&read_tensor(poses)?)?;
    let skeleton = match skeleton {
        Some(path) => read_skeleton(path)?,
        None => Skeleton::default_humanoid(),
    };
    let anim = animate(cfg, &mcfg, &store, &reference, &skeleton, &poses, cfg.seed)?;
    let dir = out.unwrap_or_else(|| cfg.output_dir.join("animation"));
    write_animation(&dir, cfg, &anim)?;
    println!("wrote {} frames to {}", anim.video.shape()[0], dir.display());
    Ok(0)
}

fn cmd_eval(cfg: &RunConfig, generated_dir: &Path, truth_dir: &Path) -> Result<u8> {
    let (train_clips, holdout) = load_dataset(truth_dir)?;
    let clips: Vec<Clip> = train_clips.into_iter().chain(holdout).collect();
    let mut generated = Vec::with_capacity(clips.len());
    for clip in &clips {
        let path = generated_dir.join(format!("clip_{:03}", clip.index)).join("video.anwt");
        generated.push(read_tensor(&path)?);
    }
    let report = evaluate_clips(cfg, &generated, &clips)?;
    let csv = report.to_csv();
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let out = cfg.output_dir.join("eval.csv");
    std::fs::write(&out, &csv).map_err(|e| Error::io(&out, e))?;
    print!("{csv}");
    println!("wrote {}", out.display());
    Ok(0)
}

fn cmd_sweep_gamma(cfg: &RunConfig, gammas: &[f32]) -> Result<u8> {
    let (mcfg, _, store) = load_checkpoint(&cfg.checkpoint)?;
    let (train_clips, holdout) = load_dataset(&cfg.data_dir)?;
    // Held-out motions probe generalization; fall back to the training
    // clips only when the dataset reserved none.
    let clips = if holdout.is_empty() { train_clips } else { holdout };
    let entries = sweep_gamma(cfg, &mcfg, &store, &clips, gammas)?;
    let csv = sweep_csv(&entries);
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let out = cfg.output_dir.join("sweep_gamma.csv");
    std::fs::write(&out, &csv).map_err(|e| Error::io(&out, e))?;
    let best = best_ssim_gamma(&entries).expect("entries are non-empty");
    let summary = format!("best ssim at gamma = {best}\n");
    let summary_path = cfg.output_dir.join("sweep_summary.txt");
    std::fs::write(&summary_path, &summary).map_err(|e| Error::io(&summary_path, e))?;
    print!("{csv}");
    print!("{summary}");
    println!("wrote {} and {}", out.display(), summary_path.display());
    Ok(0)
}

fn cmd_check(_cfg: &RunConfig) -> Result<u8> {
    let outcomes = selfcheck::run_all();
    print!("{}", selfcheck::render_report(&outcomes));
    Ok(if selfcheck::all_passed(&outcomes) { 0 } else { EXIT_CHECK })
}

fn cmd_dump_noise(cfg: &RunConfig, tensor: &Path, out: Option<PathBuf>) -> Result<u8> {
    let noise = read_tensor(tensor)?;
    let shape = noise.shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::shape(format!("noise tensor must be (F, H, W, C), got {shape:?}")));
    }
    let (frames, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let dir = out.unwrap_or_else(|| cfg.output_dir.join("noise"));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let triads = c.div_ceil(3);
    let mut written = 0usize;
    for f in 0..frames {
        for triad in 0..triads {
            let mut data = Vec::with_capacity(h * w * 3);
            for p in 0..h * w {
                for offset in 0..3 {
                    let ch = triad * 3 + offset;
                    // Missing channels of a ragged final triad render as the
                    // midpoint, i.e. the image of 0 under the affine map.
                    let v = if ch < c { noise.data()[(f * h * w + p) * c + ch] } else { 0.0 };
                    data.push((v.clamp(-3.0, 3.0) + 3.0) / 6.0);
                }
            }
            let frame = Tensor::from_vec(&[h, w, 3], data)?;
            write_ppm(&dir.join(format!("frame_{f:03}_triad{triad}.ppm")), &frame)?;
            written += 1;
        }
    }
    println!("wrote {written} pixmaps ({frames} frames x {triads} triads) to {}", dir.display());
    Ok(0)
}
