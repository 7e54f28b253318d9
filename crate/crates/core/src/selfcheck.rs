//! The invariant self-check suite: seven property groups, each with a hard
//! runtime budget, covering the machinery end to end.
//!
//! Groups: degradation algebra, warp/fusion roundtrip, warped-noise
//! statistics, motion transport, the downsampling contract, gradient
//! correctness on the miniature instance, and sampler determinism with
//! oracle recovery. Every group is seeded, so a pass is reproducible; the
//! report prints one line per group and the suite fails if any group does.

use std::time::Instant;

use crate::body::{generate_poses, Skeleton};
use crate::config::RunConfig;
use crate::dataset::generate_clip;
use crate::diffusion::model::{init_params, ModelConfig};
use crate::diffusion::sampler::{ddim_sample, NoisePredictor};
use crate::diffusion::schedule::{add_noise, make_schedule};
use crate::error::Result;
use crate::noisefield::{
    degrade, downsample_shape, downsample_spatiotemporal, sample_noise_texture, texel_index,
    undegrade, unwarp_fuse, warp,
};
use crate::numeric::rng::{sample_standard_normal, streams, RngState};
use crate::numeric::stats::{ks_critical_alpha_01, ks_statistic_standard_normal, pearson};
use crate::numeric::tensor::Tensor;
use crate::pipeline::animate_clip;
use crate::raster::{rasterize_sequence, MotionMap};
use crate::training::gradient_check;

/// One property group's verdict: what it measured and whether it held
/// inside its runtime budget.
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
    pub budget_seconds: f64,
}

impl CheckOutcome {
    /// One report line: verdict, group, evidence, timing.
    pub fn line(&self) -> String {
        format!(
            "{}  {:<24} {} ({:.2}s, budget {:.0}s)",
            if self.passed { "pass" } else { "FAIL" },
            self.name,
            self.detail,
            self.seconds,
            self.budget_seconds
        )
    }
}

fn run_check(
    name: &'static str,
    budget_seconds: f64,
    body: impl FnOnce() -> Result<String>,
) -> CheckOutcome {
    let start = Instant::now();
    let result = body();
    let seconds = start.elapsed().as_secs_f64();
    let (mut passed, detail) = match result {
        Ok(detail) => (true, detail),
        Err(e) => (false, e.to_string()),
    };
    if seconds >= budget_seconds {
        passed = false;
    }
    CheckOutcome { name, passed, detail, seconds, budget_seconds }
}

// ── 1: degradation algebra ───────────────────────────────────────────────

/// Reversal undoes degradation exactly, and degradation preserves unit
/// variance, across the whole reversible gamma range.
pub fn check_degradation_algebra() -> CheckOutcome {
    run_check("degradation-algebra", 5.0, || {
        let mut rng = RngState::seed(101);
        let eps = sample_standard_normal(&[100_000], &mut rng);
        let zeta = sample_standard_normal(&[100_000], &mut rng);
        let mut max_err = 0.0f32;
        for tenths in 0..=9 {
            let gamma = tenths as f32 / 10.0;
            let recovered = undegrade(&degrade(&eps, &zeta, gamma)?, &zeta, gamma)?;
            for (&a, &b) in recovered.data().iter().zip(eps.data()) {
                max_err = max_err.max((a - b).abs());
            }
        }
        if max_err >= 1e-5 {
            return Err(crate::error::Error::invalid(format!(
                "roundtrip error {max_err:.3e} reaches 1e-5"
            )));
        }

        let big_eps = sample_standard_normal(&[1_000_000], &mut rng);
        let big_zeta = sample_standard_normal(&[1_000_000], &mut rng);
        let (mut var_lo, mut var_hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for tenths in 0..=10 {
            let gamma = tenths as f32 / 10.0;
            let mixed = degrade(&big_eps, &big_zeta, gamma)?;
            let n = mixed.data().len() as f64;
            let mean = mixed.data().iter().map(|&v| v as f64).sum::<f64>() / n;
            let var =
                mixed.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            var_lo = var_lo.min(var);
            var_hi = var_hi.max(var);
        }
        if var_lo < 0.99 || var_hi > 1.01 {
            return Err(crate::error::Error::invalid(format!(
                "variance drifted to [{var_lo:.4}, {var_hi:.4}]"
            )));
        }
        Ok(format!(
            "roundtrip max |err| {max_err:.2e} over 10 gammas; variance in [{var_lo:.4}, {var_hi:.4}]"
        ))
    })
}

// ── 2: warp/fusion roundtrip ─────────────────────────────────────────────

/// Fusing a warped texture back recovers the texture on every covered
/// texel, across random poses and canvas resolutions.
pub fn check_warp_fusion_roundtrip() -> CheckOutcome {
    run_check("warp-fusion-roundtrip", 10.0, || {
        let skeleton = Skeleton::default_humanoid();
        let (tex_u, tex_v, c) = (64, 64, 3);
        let mut max_err = 0.0f32;
        let mut covered_total = 0usize;
        for (i, &(h, w)) in [(96usize, 128usize), (48, 64), (72, 104)].iter().enumerate() {
            let mut rng = RngState::seed(200 + i as u64);
            let poses = generate_poses(&skeleton, &mut rng, 10, 0.35)?;
            let maps = rasterize_sequence(&skeleton, &poses, h, w)?;
            let texture = sample_noise_texture(tex_u, tex_v, c, &mut rng);
            let warped = warp(&texture, &maps, &mut rng)?;
            let (fused, coverage) = unwarp_fuse(&warped, &maps, tex_u, tex_v)?;
            for (t, &count) in coverage.iter().enumerate() {
                if count == 0 {
                    continue;
                }
                covered_total += 1;
                for ch in 0..c {
                    max_err =
                        max_err.max((fused.data()[t * c + ch] - texture.data()[t * c + ch]).abs());
                }
            }
        }
        if covered_total == 0 {
            return Err(crate::error::Error::invalid("no texel was ever covered"));
        }
        if max_err >= 1e-6 {
            return Err(crate::error::Error::invalid(format!(
                "fused texture off by {max_err:.3e}"
            )));
        }
        Ok(format!(
            "max |fused - texture| {max_err:.2e} over {covered_total} covered texels, 10 poses x 3 resolutions"
        ))
    })
}

// ── 3: warped-noise statistics ───────────────────────────────────────────

/// Covered-texel values stay standard normal (KS at alpha = 0.01 for at
/// least 9 of 10 textures) and per-frame background fields are mutually
/// uncorrelated.
pub fn check_noise_statistics() -> CheckOutcome {
    run_check("noise-statistics", 10.0, || {
        let run = RunConfig::default();
        let skeleton = Skeleton::default_humanoid();
        let mut pose_rng = RngState::seed(300);
        let poses = generate_poses(&skeleton, &mut pose_rng, run.n_frames(), run.motion_amplitude)?;
        let maps = rasterize_sequence(&skeleton, &poses, run.height, run.width)?;

        // Marginals: one representative pixel per covered texel per clip, so
        // the sample is independent draws despite cross-frame value sharing.
        let c = 4usize;
        let mut ks_passes = 0;
        let mut worst_ratio = 0.0f64;
        for seed in 0..10u64 {
            let mut rng = RngState::seed(310 + seed);
            let texture = sample_noise_texture(run.texture_u, run.texture_v, c, &mut rng);
            let warped = warp(&texture, &maps, &mut rng)?;
            let sample = unique_covered_values(&warped, &maps, run.texture_u, run.texture_v);
            let d = ks_statistic_standard_normal(&sample);
            let crit = ks_critical_alpha_01(sample.len() / c);
            worst_ratio = worst_ratio.max(d / crit);
            if d < crit {
                ks_passes += 1;
            }
        }
        if ks_passes < 9 {
            return Err(crate::error::Error::invalid(format!(
                "only {ks_passes}/10 textures pass the KS normality test"
            )));
        }

        // Background decorrelation: pool every unordered frame pair over
        // pixels that are background in both frames.
        let mut rng = RngState::seed(330);
        let texture = sample_noise_texture(run.texture_u, run.texture_v, c, &mut rng);
        let warped = warp(&texture, &maps, &mut rng)?;
        let rho = background_pair_correlation(&warped, &maps);
        if rho.abs() >= 0.01 {
            return Err(crate::error::Error::invalid(format!(
                "background frames correlate at rho = {rho:.4}"
            )));
        }
        Ok(format!(
            "KS pass {ks_passes}/10 (worst D at {worst_ratio:.2} of critical); background |rho| {:.1e}",
            rho.abs()
        ))
    })
}

/// First-seen warped value per covered texel, all channels.
fn unique_covered_values(
    warped: &Tensor,
    maps: &[MotionMap],
    tex_u: usize,
    tex_v: usize,
) -> Vec<f32> {
    let shape = warped.shape();
    let (h, w, c) = (shape[1], shape[2], shape[3]);
    let mut seen = vec![false; tex_u * tex_v];
    let mut values = Vec::new();
    for (f, map) in maps.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let s = map.at(y, x);
                if !s.mask {
                    continue;
                }
                let (i, j) = texel_index(s.u, s.v, tex_u, tex_v);
                if seen[i * tex_v + j] {
                    continue;
                }
                seen[i * tex_v + j] = true;
                let base = ((f * h + y) * w + x) * c;
                values.extend_from_slice(&warped.data()[base..base + c]);
            }
        }
    }
    values
}

/// Pooled Pearson correlation between same-pixel background values across
/// all unordered frame pairs.
fn background_pair_correlation(warped: &Tensor, maps: &[MotionMap]) -> f64 {
    let shape = warped.shape();
    let (frames, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let background: Vec<Vec<bool>> = maps
        .iter()
        .map(|m| {
            (0..h * w).map(|p| !m.at(p / w, p % w).mask).collect()
        })
        .collect();
    let mut a = Vec::new();
    let mut b = Vec::new();
    for fi in 0..frames {
        for fj in fi + 1..frames {
            for p in 0..h * w {
                if !background[fi][p] || !background[fj][p] {
                    continue;
                }
                for ch in 0..c {
                    a.push(warped.data()[(fi * h * w + p) * c + ch]);
                    b.push(warped.data()[(fj * h * w + p) * c + ch]);
                }
            }
        }
    }
    pearson(&a, &b)
}

// ── 4: motion transport ──────────────────────────────────────────────────

/// Every texel visible in more than one place carries bitwise-identical
/// warped values everywhere it appears, checked exhaustively on one clip.
pub fn check_motion_transport() -> CheckOutcome {
    run_check("motion-transport", 5.0, || {
        let run = RunConfig::default();
        let skeleton = Skeleton::default_humanoid();
        let mut rng = RngState::seed(400);
        let poses = generate_poses(&skeleton, &mut rng, run.n_frames(), run.motion_amplitude)?;
        let maps = rasterize_sequence(&skeleton, &poses, run.height, run.width)?;
        let c = 2usize;
        let texture = sample_noise_texture(run.texture_u, run.texture_v, c, &mut rng);
        let warped = warp(&texture, &maps, &mut rng)?;

        let mut first: Vec<Option<[u32; 2]>> = vec![None; run.texture_u * run.texture_v];
        let mut revisits = 0usize;
        let (h, w) = (run.height, run.width);
        for (f, map) in maps.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    let s = map.at(y, x);
                    if !s.mask {
                        continue;
                    }
                    let (i, j) = texel_index(s.u, s.v, run.texture_u, run.texture_v);
                    let base = ((f * h + y) * w + x) * c;
                    let bits =
                        [warped.data()[base].to_bits(), warped.data()[base + 1].to_bits()];
                    match &first[i * run.texture_v + j] {
                        None => first[i * run.texture_v + j] = Some(bits),
                        Some(expected) => {
                            revisits += 1;
                            if *expected != bits {
                                return Err(crate::error::Error::invalid(format!(
                                    "texel ({i}, {j}) changed value between visits"
                                )));
                            }
                        }
                    }
                }
            }
        }
        if revisits < 1000 {
            return Err(crate::error::Error::invalid(format!(
                "only {revisits} texel revisits; the clip exercises too little sharing"
            )));
        }
        Ok(format!("{revisits} texel revisits across 9 frames, all bitwise equal"))
    })
}

// ── 5: downsampling contract ─────────────────────────────────────────────

/// Shape arithmetic (including the reference instance) and the nearest
/// gather rule against an independent index oracle.
pub fn check_downsampling() -> CheckOutcome {
    run_check("downsampling-contract", 5.0, || {
        // Reference instance, shape-level: (49, 480, 720, 16) -> (13, 60, 90, 16).
        let reference = downsample_shape(&[49, 480, 720, 16], 8, 4)?;
        if reference != [13, 60, 90, 16] {
            return Err(crate::error::Error::invalid(format!(
                "reference instance produced {reference:?}"
            )));
        }
        for f in 1..4usize {
            let got = downsample_shape(&[4 * f + 1, 8 * 12, 8 * 16, 8], 8, 4)?;
            if got != [f + 1, 12, 16, 8] {
                return Err(crate::error::Error::invalid(format!(
                    "(4f+1, 8h, 8w, C) rule broke at f = {f}: {got:?}"
                )));
            }
        }

        // Data-level: every output element equals the input element the
        // nearest rule names, with indices recomputed from scratch.
        let mut checked = 0usize;
        for &(frames, h, w, c, s, r) in
            &[(9usize, 32usize, 48usize, 5usize, 8usize, 4usize), (5, 16, 16, 3, 4, 2)]
        {
            let data: Vec<f32> = (0..frames * h * w * c).map(|i| i as f32).collect();
            let x = Tensor::from_vec(&[frames, h, w, c], data)?;
            let y = downsample_spatiotemporal(&x, s, r)?;
            let [fo, ho, wo, co] = downsample_shape(&[frames, h, w, c], s, r)?;
            for k in 0..fo {
                for yo in 0..ho {
                    for xo in 0..wo {
                        for ch in 0..co {
                            let src = (((k * r) * h + yo * s) * w + xo * s) * c + ch;
                            let dst = (((k * ho) + yo) * wo + xo) * co + ch;
                            if y.data()[dst] != x.data()[src] {
                                return Err(crate::error::Error::invalid(format!(
                                    "output ({k}, {yo}, {xo}, {ch}) does not equal input index {src}"
                                )));
                            }
                            checked += 1;
                        }
                    }
                }
            }
        }
        Ok(format!(
            "reference (49,480,720,16)->(13,60,90,16); {checked} gathered elements match the index oracle"
        ))
    })
}

// ── 6: gradient correctness ──────────────────────────────────────────────

/// Analytic gradients of the full three-loss objective match central finite
/// differences on the miniature instance.
pub fn check_gradients() -> CheckOutcome {
    run_check("gradient-check", 60.0, || {
        let report = gradient_check((1.0, 0.5, 0.5), 0.3, 11)?;
        if report.max_rel_error >= 1e-3 {
            return Err(crate::error::Error::invalid(format!(
                "max relative gradient error {:.3e} reaches 1e-3",
                report.max_rel_error
            )));
        }
        Ok(format!(
            "max rel error {:.2e} over {} parameters (gamma 0.3, all losses active)",
            report.max_rel_error, report.parameter_count
        ))
    })
}

// ── 7: sampler determinism and oracle recovery ───────────────────────────

struct OracleEps {
    eps: Tensor,
}

impl NoisePredictor for OracleEps {
    fn predict(&mut self, _z_t: &Tensor, _cond: &Tensor, _t: usize) -> Result<Tensor> {
        Ok(self.eps.clone())
    }
}

/// Two identical animation runs are bitwise equal, and a single step with
/// an oracle noise predictor recovers the clean latent.
pub fn check_sampler() -> CheckOutcome {
    run_check("sampler-determinism", 10.0, || {
        let mut run = RunConfig::default();
        run.height = 48;
        run.width = 64;
        run.f = 1;
        run.validate()?;
        let mcfg = ModelConfig::desk(&run);
        let store = init_params(&mcfg, &mut RngState::stream(5, streams::PARAMS));
        let clip = generate_clip(&run, 0, 700)?;
        let a = animate_clip(&run, &mcfg, &store, &clip)?;
        let b = animate_clip(&run, &mcfg, &store, &clip)?;
        if a.video.data() != b.video.data() {
            return Err(crate::error::Error::invalid(
                "two identical animation runs diverged",
            ));
        }

        let sched = make_schedule(run.schedule_steps, run.beta_min, run.beta_max)?;
        let mut rng = RngState::seed(701);
        let z0 = sample_standard_normal(&[3, 6, 8, 4], &mut rng);
        let eps = sample_standard_normal(&[3, 6, 8, 4], &mut rng);
        let cond = Tensor::zeros(&[6, 8, 4]);
        let t = 150;
        let z_t = add_noise(&z0, &eps, t, &sched)?;
        let mut oracle = OracleEps { eps };
        let recovered = ddim_sample(&mut oracle, &z_t, &cond, &sched, &[t])?;
        let mut max_err = 0.0f32;
        for (&x, &y) in recovered.data().iter().zip(z0.data()) {
            max_err = max_err.max((x - y).abs());
        }
        if max_err >= 1e-4 {
            return Err(crate::error::Error::invalid(format!(
                "oracle one-step recovery off by {max_err:.3e}"
            )));
        }
        Ok(format!("replays bitwise equal; oracle one-step recovery error {max_err:.2e}"))
    })
}

// ── suite ────────────────────────────────────────────────────────────────

/// Runs the seven property groups in order.
pub fn run_all() -> Vec<CheckOutcome> {
    vec![
        check_degradation_algebra(),
        check_warp_fusion_roundtrip(),
        check_noise_statistics(),
        check_motion_transport(),
        check_downsampling(),
        check_gradients(),
        check_sampler(),
    ]
}

pub fn all_passed(outcomes: &[CheckOutcome]) -> bool {
    outcomes.iter().all(|o| o.passed)
}

/// One line per group plus a summary tally.
pub fn render_report(outcomes: &[CheckOutcome]) -> String {
    let mut out = String::new();
    for o in outcomes {
        out.push_str(&o.line());
        out.push('\n');
    }
    let passed = outcomes.iter().filter(|o| o.passed).count();
    let total_s: f64 = outcomes.iter().map(|o| o.seconds).sum();
    out.push_str(&format!(
        "{passed}/{} property groups passed in {total_s:.1}s\n",
        outcomes.len()
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_property_group_passes_inside_its_budget() {
        let outcomes = run_all();
        assert_eq!(outcomes.len(), 7, "one group per machinery invariant");
        for o in &outcomes {
            assert!(o.passed, "{}", o.line());
            assert!(o.seconds < o.budget_seconds, "{}", o.line());
        }
        assert!(all_passed(&outcomes));
        let report = render_report(&outcomes);
        assert_eq!(report.lines().count(), 8);
        assert!(report.contains("7/7 property groups passed"));
    }

    #[test]
    fn failures_are_reported_not_panicked() {
        let outcome = run_check("synthetic", 1.0, || {
            Err(crate::error::Error::invalid("synthetic failure"))
        });
        assert!(!outcome.passed);
        assert!(outcome.line().starts_with("FAIL"));
        assert!(outcome.detail.contains("synthetic failure"));
        assert!(!all_passed(&[outcome]));
    }

    #[test]
    fn budget_overrun_fails_the_group() {
        let outcome = run_check("slow", 1e-9, || Ok("finished".to_string()));
        assert!(!outcome.passed, "an instant budget cannot be met");
    }
}
