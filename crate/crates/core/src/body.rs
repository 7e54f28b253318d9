//! Articulated 2D puppet: bones as capsules on a kinematic chain, each
//! carrying a rectangular UV chart in a shared texture atlas, plus
//! procedural pose-sequence generation.
//!
//! Canvas coordinates are pixels, y down. A bone's direction at world angle
//! theta is (cos theta, sin theta); child bones attach at the parent's
//! endpoint and add their own rest + offset angles onto the chain sum.

use std::path::Path;

use crate::config::parse_kv_text;
use crate::error::{Error, Result};
use crate::numeric::rng::RngState;
use crate::numeric::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Bone {
    pub name: String,
    /// None for the root (bone 0 only).
    pub parent: Option<usize>,
    /// Radians relative to the parent's world angle (to the canvas x-axis
    /// for the root).
    pub rest_angle: f32,
    pub rest_length: f32,
    /// Capsule radius in pixels.
    pub half_width: f32,
    /// UV rectangle (u0, v0, u1, v1) in the shared atlas.
    pub chart: (f32, f32, f32, f32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    pub bones: Vec<Bone>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub root: (f32, f32),
    /// Per-bone rotation offsets, radians; length equals the bone count.
    pub offsets: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    pub frames: Vec<Pose>,
}

/// World placement of one bone: origin point and absolute angle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoneTransform {
    pub origin: (f32, f32),
    pub angle: f32,
}

impl BoneTransform {
    pub fn direction(&self) -> (f32, f32) {
        (self.angle.cos(), self.angle.sin())
    }

    pub fn endpoint(&self, length: f32) -> (f32, f32) {
        let (dx, dy) = self.direction();
        (self.origin.0 + length * dx, self.origin.1 + length * dy)
    }
}

impl Skeleton {
    pub fn validate(&self) -> Result<()> {
        if self.bones.is_empty() {
            return Err(Error::invalid("skeleton has no bones".to_string()));
        }
        for (i, bone) in self.bones.iter().enumerate() {
            match (i, bone.parent) {
                (0, None) => {}
                (0, Some(_)) => {
                    return Err(Error::invalid("bone 0 must be the root".to_string()))
                }
                (_, None) => {
                    return Err(Error::invalid(format!("bone {i} has no parent")));
                }
                (_, Some(p)) if p >= i => {
                    return Err(Error::invalid(format!(
                        "bone {i} parent {p} must have a smaller index"
                    )));
                }
                _ => {}
            }
            if !(bone.rest_length > 0.0) {
                return Err(Error::invalid(format!(
                    "bone {i} rest_length {} must be positive",
                    bone.rest_length
                )));
            }
            if !(bone.half_width > 0.0) {
                return Err(Error::invalid(format!(
                    "bone {i} half_width {} must be positive",
                    bone.half_width
                )));
            }
            let (u0, v0, u1, v1) = bone.chart;
            if !(0.0 <= u0 && u0 < u1 && u1 <= 1.0 && 0.0 <= v0 && v0 < v1 && v1 <= 1.0) {
                return Err(Error::invalid(format!("bone {i} chart {:?} is malformed", bone.chart)));
            }
        }
        // Chart disjointness keeps the UV-to-surface map injective: every UV
        // point names at most one (bone, local coordinate) pair.
        for i in 0..self.bones.len() {
            for j in (i + 1)..self.bones.len() {
                let a = self.bones[i].chart;
                let b = self.bones[j].chart;
                let overlap = a.0 < b.2 && b.0 < a.2 && a.1 < b.3 && b.1 < a.3;
                if overlap {
                    return Err(Error::invalid(format!("charts of bones {i} and {j} overlap")));
                }
            }
        }
        Ok(())
    }

    pub fn bone_count(&self) -> usize {
        self.bones.len()
    }

    /// Nine-bone humanoid: pelvis root pointing down (its endpoint is the
    /// crotch, where the legs attach), torso pointing up to the neck (head
    /// and arms attach there), two-segment arms, single-segment legs. Charts
    /// pack a 3x3 atlas grid with a 2/64 gutter on every side.
    pub fn default_humanoid() -> Skeleton {
        const G: f32 = 2.0 / 64.0;
        let cell = |col: usize, row: usize| -> (f32, f32, f32, f32) {
            (
                col as f32 / 3.0 + G,
                row as f32 / 3.0 + G,
                (col + 1) as f32 / 3.0 - G,
                (row + 1) as f32 / 3.0 - G,
            )
        };
        let bone = |name: &str,
                    parent: Option<usize>,
                    rest_angle: f32,
                    rest_length: f32,
                    half_width: f32,
                    chart: (f32, f32, f32, f32)| Bone {
            name: name.to_string(),
            parent,
            rest_angle,
            rest_length,
            half_width,
            chart,
        };
        use std::f32::consts::PI;
        let skeleton = Skeleton {
            bones: vec![
                // Root points down the canvas: world angle pi/2.
                bone("pelvis", None, PI / 2.0, 6.0, 7.0, cell(0, 0)),
                // Torso reverses to point up: world angle 3*pi/2.
                bone("torso", Some(0), PI, 30.0, 8.0, cell(1, 0)),
                bone("head", Some(1), 0.0, 11.0, 5.0, cell(2, 0)),
                // Arms hang from the neck, splayed slightly outward.
                bone("upper_arm_l", Some(1), -2.7916, 13.0, 3.5, cell(0, 1)),
                bone("lower_arm_l", Some(3), -0.2, 12.0, 3.0, cell(1, 1)),
                bone("upper_arm_r", Some(1), -3.4916, 13.0, 3.5, cell(2, 1)),
                bone("lower_arm_r", Some(5), 0.2, 12.0, 3.0, cell(0, 2)),
                // Legs hang from the crotch, splayed slightly outward.
                bone("leg_l", Some(0), 0.10, 30.0, 4.5, cell(1, 2)),
                bone("leg_r", Some(0), -0.10, 30.0, 4.5, cell(2, 2)),
            ],
        };
        skeleton.validate().expect("default humanoid is valid");
        skeleton
    }
}

/// World transform per bone: origin at the parent's endpoint (the root at
/// the pose's root position), angle as the chain sum of rest + offset.
pub fn forward_kinematics(skeleton: &Skeleton, pose: &Pose) -> Result<Vec<BoneTransform>> {
    if pose.offsets.len() != skeleton.bones.len() {
        return Err(Error::invalid(format!(
            "pose has {} offsets for {} bones",
            pose.offsets.len(),
            skeleton.bones.len()
        )));
    }
    let mut transforms: Vec<BoneTransform> = Vec::with_capacity(skeleton.bones.len());
    for (i, bone) in skeleton.bones.iter().enumerate() {
        let (origin, base_angle) = match bone.parent {
            None => (pose.root, 0.0),
            Some(p) => (transforms[p].endpoint(skeleton.bones[p].rest_length), transforms[p].angle),
        };
        let angle = base_angle + bone.rest_angle + pose.offsets[i];
        transforms.push(BoneTransform { origin, angle });
    }
    Ok(transforms)
}

impl PoseSequence {
    pub fn new(frames: Vec<Pose>) -> Result<PoseSequence> {
        if frames.is_empty() {
            return Err(Error::invalid("pose sequence has no frames".to_string()));
        }
        let n = frames[0].offsets.len();
        if frames.iter().any(|p| p.offsets.len() != n) {
            return Err(Error::invalid("pose frames disagree on bone count".to_string()));
        }
        Ok(PoseSequence { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Shifts every root position; joint offsets are untouched.
    pub fn translate(&mut self, dx: f32, dy: f32) {
        for pose in &mut self.frames {
            pose.root.0 += dx;
            pose.root.1 += dy;
        }
    }

    /// Rows of (root_x, root_y, offsets...), one per frame.
    pub fn to_tensor(&self) -> Tensor {
        let bones = self.frames[0].offsets.len();
        let mut data = Vec::with_capacity(self.frames.len() * (2 + bones));
        for pose in &self.frames {
            data.push(pose.root.0);
            data.push(pose.root.1);
            data.extend_from_slice(&pose.offsets);
        }
        Tensor::from_vec(&[self.frames.len(), 2 + bones], data)
            .expect("pose rows are uniform by construction")
    }

    pub fn from_tensor(t: &Tensor) -> Result<PoseSequence> {
        let shape = t.shape();
        if shape.len() != 2 || shape[1] < 3 {
            return Err(Error::shape(format!(
                "pose sequence tensor must be (frames, 2 + bones), got {shape:?}"
            )));
        }
        let cols = shape[1];
        let frames = t
            .data()
            .chunks_exact(cols)
            .map(|row| Pose { root: (row[0], row[1]), offsets: row[2..].to_vec() })
            .collect();
        PoseSequence::new(frames)
    }
}

/// Smooth procedural motion: every joint follows its own sinusoid with
/// random amplitude fraction, frequency, and phase; the root wanders on a
/// slow two-axis sinusoid scaled by 10*amplitude pixels. Roots are around
/// (0, 0); callers translate into canvas position. Frame count is 4f + 1.
///
/// Draw order (one stream, fixed): 4 root uniforms (x/y cycle counts and
/// phases), then 3 uniforms per bone (amplitude, cycles, phase).
pub fn generate_pose_sequence(
    skeleton: &Skeleton,
    rng: &mut RngState,
    f: usize,
    motion_amplitude: f32,
) -> Result<PoseSequence> {
    if f == 0 {
        return Err(Error::invalid("f must be at least 1".to_string()));
    }
    if !(motion_amplitude >= 0.0) {
        return Err(Error::invalid(format!(
            "motion_amplitude {motion_amplitude} must be nonnegative"
        )));
    }
    let n_frames = 4 * f + 1;
    generate_poses(skeleton, rng, n_frames, motion_amplitude)
}

/// As `generate_pose_sequence` for an explicit frame count.
pub fn generate_poses(
    skeleton: &Skeleton,
    rng: &mut RngState,
    n_frames: usize,
    motion_amplitude: f32,
) -> Result<PoseSequence> {
    if n_frames == 0 {
        return Err(Error::invalid("n_frames must be positive".to_string()));
    }
    if !(motion_amplitude >= 0.0) {
        return Err(Error::invalid(format!(
            "motion_amplitude {motion_amplitude} must be nonnegative"
        )));
    }
    let tau = std::f32::consts::TAU;
    let root_cycles = (rng.uniform_f32(0.5, 1.5), rng.uniform_f32(0.5, 1.5));
    let root_phase = (rng.uniform_f32(0.0, tau), rng.uniform_f32(0.0, tau));
    let per_bone: Vec<(f32, f32, f32)> = skeleton
        .bones
        .iter()
        .map(|_| {
            let amp = motion_amplitude * rng.uniform_f32(0.4, 1.0);
            let cycles = rng.uniform_f32(0.5, 1.5);
            let phase = rng.uniform_f32(0.0, tau);
            (amp, cycles, phase)
        })
        .collect();

    let wobble = 10.0 * motion_amplitude;
    let frames = (0..n_frames)
        .map(|k| {
            let t = if n_frames == 1 { 0.0 } else { k as f32 / (n_frames - 1) as f32 };
            let root = (
                wobble * (tau * root_cycles.0 * t + root_phase.0).sin(),
                wobble * (tau * root_cycles.1 * t + root_phase.1).sin(),
            );
            let offsets = per_bone
                .iter()
                .map(|&(amp, cycles, phase)| amp * (tau * cycles * t + phase).sin())
                .collect();
            Pose { root, offsets }
        })
        .collect();
    PoseSequence::new(frames)
}

// ── Skeleton text format ─────────────────────────────────────────────────

/// Renders a skeleton as sectioned text: one `[bone.N]` section per bone
/// with name, parent (-1 for the root), rest_angle, rest_length, half_width,
/// and the chart as four space-separated floats.
pub fn render_skeleton(skeleton: &Skeleton) -> String {
    let mut out = String::new();
    for (i, bone) in skeleton.bones.iter().enumerate() {
        let parent = bone.parent.map_or(-1i64, |p| p as i64);
        let (u0, v0, u1, v1) = bone.chart;
        out.push_str(&format!(
            "[bone.{i}]\nname = {}\nparent = {parent}\nrest_angle = {}\nrest_length = {}\n\
             half_width = {}\nchart = {u0} {v0} {u1} {v1}\n\n",
            bone.name, bone.rest_angle, bone.rest_length, bone.half_width,
        ));
    }
    out
}

pub fn parse_skeleton(text: &str) -> Result<Skeleton> {
    let mut bones: Vec<Bone> = Vec::new();
    for (section, key, value) in parse_kv_text(text)? {
        let index: usize = section
            .strip_prefix("bone.")
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| Error::config(format!("unexpected section [{section}]")))?;
        if index == bones.len() {
            bones.push(Bone {
                name: String::new(),
                parent: None,
                rest_angle: 0.0,
                rest_length: 0.0,
                half_width: 0.0,
                chart: (0.0, 0.0, 0.0, 0.0),
            });
        } else if index + 1 != bones.len() {
            return Err(Error::config(format!(
                "bone sections must appear in order; saw bone.{index} with {} bones parsed",
                bones.len()
            )));
        }
        let bone = bones.last_mut().expect("section created above");
        let parse_f32 = |v: &str| -> Result<f32> {
            v.parse().map_err(|e| Error::config(format!("bone.{index}.{key} = {v:?}: {e}")))
        };
        match key.as_str() {
            "name" => bone.name = value,
            "parent" => {
                let p: i64 = value
                    .parse()
                    .map_err(|e| Error::config(format!("bone.{index}.parent = {value:?}: {e}")))?;
                bone.parent = if p < 0 { None } else { Some(p as usize) };
            }
            "rest_angle" => bone.rest_angle = parse_f32(&value)?,
            "rest_length" => bone.rest_length = parse_f32(&value)?,
            "half_width" => bone.half_width = parse_f32(&value)?,
            "chart" => {
                let parts: Vec<f32> = value
                    .split_whitespace()
                    .map(|p| parse_f32(p))
                    .collect::<Result<_>>()?;
                if parts.len() != 4 {
                    return Err(Error::config(format!(
                        "bone.{index}.chart needs 4 floats, got {}",
                        parts.len()
                    )));
                }
                bone.chart = (parts[0], parts[1], parts[2], parts[3]);
            }
            other => {
                return Err(Error::config(format!("unknown skeleton key bone.{index}.{other}")))
            }
        }
    }
    let skeleton = Skeleton { bones };
    skeleton.validate()?;
    Ok(skeleton)
}

pub fn write_skeleton(path: &Path, skeleton: &Skeleton) -> Result<()> {
    Ok(std::fs::write(path, render_skeleton(skeleton))?)
}

pub fn read_skeleton(path: &Path) -> Result<Skeleton> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::format(path, format!("reading skeleton: {e}")))?;
    parse_skeleton(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_bone(rest_angle: f32, length: f32) -> Skeleton {
        Skeleton {
            bones: vec![Bone {
                name: "only".to_string(),
                parent: None,
                rest_angle,
                rest_length: length,
                half_width: 1.0,
                chart: (0.0, 0.0, 0.5, 0.5),
            }],
        }
    }

    fn close(a: (f32, f32), b: (f32, f32), tol: f32) -> bool {
        (a.0 - b.0).abs() <= tol && (a.1 - b.1).abs() <= tol
    }

    #[test]
    fn fk_zero_rotation_points_along_x() {
        let sk = single_bone(0.0, 5.0);
        let pose = Pose { root: (10.0, 20.0), offsets: vec![0.0] };
        let t = forward_kinematics(&sk, &pose).unwrap();
        assert!(close(t[0].endpoint(5.0), (15.0, 20.0), 1e-5));
    }

    #[test]
    fn fk_quarter_turn_points_along_y() {
        let sk = single_bone(0.0, 7.0);
        let pose = Pose { root: (1.0, 2.0), offsets: vec![std::f32::consts::FRAC_PI_2] };
        let t = forward_kinematics(&sk, &pose).unwrap();
        assert!(close(t[0].endpoint(7.0), (1.0, 9.0), 1e-5));
    }

    #[test]
    fn fk_two_bone_chain_composes_rotations() {
        let mut sk = single_bone(0.0, 3.0);
        sk.bones.push(Bone {
            name: "second".to_string(),
            parent: Some(0),
            rest_angle: 0.0,
            rest_length: 4.0,
            half_width: 1.0,
            chart: (0.5, 0.5, 1.0, 1.0),
        });
        let half_pi = std::f32::consts::FRAC_PI_2;
        let pose = Pose { root: (0.0, 0.0), offsets: vec![half_pi, half_pi] };
        let t = forward_kinematics(&sk, &pose).unwrap();
        assert!(close(t[1].origin, (0.0, 3.0), 1e-5), "second bone starts at first endpoint");
        assert!(close(t[1].endpoint(4.0), (-4.0, 3.0), 1e-5), "tip at root + (-L2, L1)");
    }

    #[test]
    fn fk_rejects_wrong_offset_count() {
        let sk = single_bone(0.0, 1.0);
        let pose = Pose { root: (0.0, 0.0), offsets: vec![0.0, 0.0] };
        assert!(forward_kinematics(&sk, &pose).is_err());
    }

    #[test]
    fn fk_endpoints_are_lipschitz_in_each_angle() {
        let sk = Skeleton::default_humanoid();
        let mut rng = RngState::seed(31);
        let base = generate_poses(&sk, &mut rng, 1, 0.4).unwrap().frames.remove(0);
        let delta = 1e-3f32;
        let t0 = forward_kinematics(&sk, &base).unwrap();
        for j in 0..sk.bone_count() {
            let mut perturbed = base.clone();
            perturbed.offsets[j] += delta;
            let t1 = forward_kinematics(&sk, &perturbed).unwrap();
            // Angle j rigidly rotates its subtree, so any endpoint moves by
            // at most (sum of downstream bone lengths) * delta.
            let mut downstream = vec![false; sk.bone_count()];
            downstream[j] = true;
            let mut bound = sk.bones[j].rest_length;
            for i in (j + 1)..sk.bone_count() {
                if sk.bones[i].parent.map_or(false, |p| downstream[p]) {
                    downstream[i] = true;
                    bound += sk.bones[i].rest_length;
                }
            }
            for i in 0..sk.bone_count() {
                let a = t0[i].endpoint(sk.bones[i].rest_length);
                let b = t1[i].endpoint(sk.bones[i].rest_length);
                let moved = ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
                assert!(
                    moved <= bound * delta * 1.01 + 1e-5,
                    "bone {i} moved {moved} > bound {} after perturbing angle {j}",
                    bound * delta
                );
            }
        }
    }

    #[test]
    fn default_humanoid_has_nine_disjoint_charts() {
        let sk = Skeleton::default_humanoid();
        assert_eq!(sk.bone_count(), 9);
        sk.validate().unwrap();
        // Upright pose sanity: head above the root, feet below, arms between.
        let pose = Pose { root: (64.0, 46.0), offsets: vec![0.0; 9] };
        let t = forward_kinematics(&sk, &pose).unwrap();
        let head_top = t[2].endpoint(sk.bones[2].rest_length);
        let foot_l = t[7].endpoint(sk.bones[7].rest_length);
        let foot_r = t[8].endpoint(sk.bones[8].rest_length);
        assert!(head_top.1 < 46.0 - 30.0, "head reaches well above the root");
        assert!(foot_l.1 > 46.0 + 30.0 && foot_r.1 > 46.0 + 30.0, "feet reach below");
        assert!(foot_l.0 < 64.0 && foot_r.0 > 64.0, "legs splay outward");
    }

    #[test]
    fn skeleton_validation_catches_breakage() {
        let mut sk = Skeleton::default_humanoid();
        sk.bones[3].parent = Some(5); // forward reference breaks the order rule
        assert!(sk.validate().is_err());

        let mut sk = Skeleton::default_humanoid();
        sk.bones[1].chart = sk.bones[2].chart; // overlapping charts
        assert!(sk.validate().is_err());

        let mut sk = Skeleton::default_humanoid();
        sk.bones[4].rest_length = 0.0;
        assert!(sk.validate().is_err());

        let mut sk = Skeleton::default_humanoid();
        sk.bones[0].parent = Some(0);
        assert!(sk.validate().is_err());
    }

    #[test]
    fn pose_sequence_lengths_and_determinism() {
        let sk = Skeleton::default_humanoid();
        let seq = generate_pose_sequence(&sk, &mut RngState::seed(3), 1, 0.3).unwrap();
        assert_eq!(seq.len(), 5);
        let a = generate_pose_sequence(&sk, &mut RngState::seed(8), 2, 0.3).unwrap();
        let b = generate_pose_sequence(&sk, &mut RngState::seed(8), 2, 0.3).unwrap();
        assert_eq!(a, b, "same rng seed gives an identical sequence");
        assert_eq!(a.len(), 9);
        let c = generate_pose_sequence(&sk, &mut RngState::seed(9), 2, 0.3).unwrap();
        assert_ne!(a, c, "different seeds differ");
    }

    #[test]
    fn zero_amplitude_freezes_the_puppet() {
        let sk = Skeleton::default_humanoid();
        let seq = generate_pose_sequence(&sk, &mut RngState::seed(4), 1, 0.0).unwrap();
        for pose in &seq.frames {
            assert_eq!(pose, &seq.frames[0]);
        }
        assert!(generate_pose_sequence(&sk, &mut RngState::seed(4), 1, -0.1).is_err());
        assert!(generate_pose_sequence(&sk, &mut RngState::seed(4), 0, 0.3).is_err());
    }

    #[test]
    fn pose_tensor_roundtrip() {
        let sk = Skeleton::default_humanoid();
        let mut seq = generate_pose_sequence(&sk, &mut RngState::seed(12), 2, 0.4).unwrap();
        seq.translate(64.0, 46.0);
        let t = seq.to_tensor();
        assert_eq!(t.shape(), &[9, 11]);
        let back = PoseSequence::from_tensor(&t).unwrap();
        assert_eq!(back, seq);
    }

    #[test]
    fn skeleton_text_roundtrip() {
        let sk = Skeleton::default_humanoid();
        let text = render_skeleton(&sk);
        let back = parse_skeleton(&text).unwrap();
        assert_eq!(back, sk);
        assert!(parse_skeleton("[bone.1]\nname = x\n").is_err(), "must start at bone.0");
        assert!(parse_skeleton("[torso]\nname = x\n").is_err(), "unknown section");
    }
}
