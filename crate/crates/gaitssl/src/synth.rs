//! Synthetic 4-class sinusoidal walking generator for desk-scale experiments.
//!
//! Classes differ by walking speed, arm-swing amplitude, head-pitch offset and
//! step frequency. The motion model is a planar pendulum walk: the root
//! translates forward at constant speed with lateral sway and vertical bounce,
//! legs and arms counter-swing at the step frequency, and the head carries a
//! per-class pitch offset. Per-sample body scale, phase and additive noise
//! keep classes from being trivially separable.

use crate::dataset::{largest_remainder, GaitDataset};
use crate::error::{Error, Result};
use crate::rng::{tags, RngStream};
use crate::sequence::{
    EmotionClass, SkeletonSequence, CANON_COORDS, CANON_FRAMES, CANON_JOINTS, CLASS_NAMES,
    NUM_CLASSES,
};
use crate::topology::{joints, JointTopology};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

/// Inclusive parameter range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    fn validate(&self, class: &str, field: &str) -> Result<()> {
        if self.min > self.max {
            return Err(Error::DegenerateRange {
                class: class.into(),
                field: field.into(),
                min: self.min,
                max: self.max,
            });
        }
        Ok(())
    }

    fn draw(&self, rng: &mut RngStream) -> f64 {
        if self.min == self.max {
            self.min
        } else {
            rng.uniform(self.min, self.max)
        }
    }
}

/// Kinematic parameter ranges for one emotion class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassKinematics {
    /// Forward walking speed in m/s.
    pub walk_speed: Range,
    /// Arm swing amplitude in radians.
    pub arm_swing: Range,
    /// Head pitch offset in radians; positive pitches down and forward.
    pub head_pitch: Range,
    /// Step frequency in Hz.
    pub step_freq: Range,
}

/// Configuration for [`generate_synthetic`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_samples: usize,
    /// Fractions per class (angry, neutral, happy, sad); must sum to 1.
    pub class_ratios: [f64; NUM_CLASSES],
    pub seed: u64,
    pub classes: [ClassKinematics; NUM_CLASSES],
    /// Standard deviation of additive joint noise in meters.
    pub noise_std: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_samples: 400,
            // E-Gait class distribution; the published percentages sum to
            // 99.99%, so they are normalised to satisfy the sum-to-1 invariant.
            class_ratios: normalized_egait_ratios(),
            seed: 0,
            classes: [
                // angry: fast, large swing, slight downward pitch
                ClassKinematics {
                    walk_speed: Range::new(1.30, 1.60),
                    arm_swing: Range::new(0.50, 0.80),
                    head_pitch: Range::new(0.00, 0.10),
                    step_freq: Range::new(1.90, 2.30),
                },
                // neutral
                ClassKinematics {
                    walk_speed: Range::new(0.90, 1.10),
                    arm_swing: Range::new(0.25, 0.40),
                    head_pitch: Range::new(-0.05, 0.05),
                    step_freq: Range::new(1.60, 1.90),
                },
                // happy: brisk, open swing, head up
                ClassKinematics {
                    walk_speed: Range::new(1.10, 1.30),
                    arm_swing: Range::new(0.35, 0.60),
                    head_pitch: Range::new(-0.15, -0.02),
                    step_freq: Range::new(1.70, 2.00),
                },
                // sad: slow, small swing, head down
                ClassKinematics {
                    walk_speed: Range::new(0.50, 0.75),
                    arm_swing: Range::new(0.05, 0.20),
                    head_pitch: Range::new(0.15, 0.35),
                    step_freq: Range::new(1.20, 1.50),
                },
            ],
            noise_std: 0.012,
        }
    }
}

/// E-Gait emotion distribution (angry, neutral, happy, sad), rescaled to sum
/// to exactly 1.
pub fn normalized_egait_ratios() -> [f64; NUM_CLASSES] {
    let raw = [0.5503, 0.2345, 0.1461, 0.0690];
    let sum: f64 = raw.iter().sum();
    let mut out = [0.0; NUM_CLASSES];
    for (o, r) in out.iter_mut().zip(raw) {
        *o = r / sum;
    }
    out
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::InvalidConfig("n_samples must be positive".into()));
        }
        let sum: f64 = self.class_ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "class ratios must sum to 1, got {sum}"
            )));
        }
        if self.class_ratios.iter().any(|&r| r < 0.0) {
            return Err(Error::InvalidConfig("class ratios must be nonnegative".into()));
        }
        if self.noise_std < 0.0 {
            return Err(Error::InvalidConfig("noise_std must be nonnegative".into()));
        }
        for (c, k) in self.classes.iter().enumerate() {
            let name = CLASS_NAMES[c];
            k.walk_speed.validate(name, "walk_speed")?;
            k.arm_swing.validate(name, "arm_swing")?;
            k.head_pitch.validate(name, "head_pitch")?;
            k.step_freq.validate(name, "step_freq")?;
        }
        Ok(())
    }
}

const DT: f64 = 1.0 / 30.0;

/// Body segment lengths in meters before per-sample scaling.
struct Body {
    hip_height: f64,
    spine_up: f64,
    neck_up: f64,
    head_up: f64,
    shoulder_half: f64,
    hip_half: f64,
    upper_arm: f64,
    forearm: f64,
    thigh: f64,
    shank: f64,
}

const BODY: Body = Body {
    hip_height: 0.95,
    spine_up: 0.25,
    neck_up: 0.50,
    head_up: 0.15,
    shoulder_half: 0.20,
    hip_half: 0.10,
    upper_arm: 0.28,
    forearm: 0.26,
    thigh: 0.45,
    shank: 0.45,
};

/// Generate a deterministic synthetic dataset. Labels follow the
/// largest-remainder apportionment of `class_ratios`; all coordinate values
/// are quantised to f32 so the dataset round-trips the file format exactly.
pub fn generate_synthetic(cfg: &SynthConfig, topo: &JointTopology) -> Result<GaitDataset> {
    cfg.validate()?;
    topo.validate()?;

    let counts = largest_remainder(cfg.n_samples, &cfg.class_ratios);
    let mut labels: Vec<usize> = Vec::with_capacity(cfg.n_samples);
    for (class, &count) in counts.iter().enumerate() {
        labels.extend(std::iter::repeat(class).take(count));
    }
    let root = RngStream::new(cfg.seed);
    root.substream(&[tags::SYNTH, 0]).shuffle(&mut labels);

    let mut sequences = Vec::with_capacity(cfg.n_samples);
    for (i, &class) in labels.iter().enumerate() {
        let mut rng = root.substream(&[tags::SYNTH, 1, i as u64]);
        let seq = generate_sample(cfg, class, &mut rng);
        sequences.push(SkeletonSequence::new(
            seq,
            Some(EmotionClass::from_index(class).expect("class index in range")),
        ));
    }
    Ok(GaitDataset::new(sequences, topo.clone()))
}

fn generate_sample(cfg: &SynthConfig, class: usize, rng: &mut RngStream) -> Array3<f64> {
    let k = &cfg.classes[class];
    let speed = k.walk_speed.draw(rng);
    let arm_amp = k.arm_swing.draw(rng);
    let pitch = k.head_pitch.draw(rng);
    let freq = k.step_freq.draw(rng);
    let scale = rng.uniform(0.95, 1.05);
    let phase0 = rng.uniform(0.0, std::f64::consts::TAU);

    let leg_len = (BODY.thigh + BODY.shank) * scale;
    // Half-stride relative to leg length bounds the leg swing amplitude.
    let stride = speed / freq.max(0.1);
    let leg_amp = (stride * 0.5 / leg_len).clamp(0.0, 0.9);
    let lean = 0.04 * speed;

    let mut data = Array3::<f64>::zeros((CANON_FRAMES, CANON_JOINTS, CANON_COORDS));
    for t in 0..CANON_FRAMES {
        let time = t as f64 * DT;
        let phi = std::f64::consts::TAU * freq * time + phase0;

        let root_x = speed * time;
        let root_y = 0.025 * scale * phi.sin();
        let root_z = BODY.hip_height * scale + 0.02 * scale * (2.0 * phi).sin();

        let mut joint = [[0.0f64; 3]; CANON_JOINTS];
        joint[joints::ROOT] = [root_x, root_y, root_z];

        // Torso with a small speed-proportional forward lean.
        let up = |h: f64| [root_x + lean.sin() * h, root_y, root_z + lean.cos() * h];
        joint[joints::SPINE] = up(BODY.spine_up * scale);
        joint[joints::NECK] = up(BODY.neck_up * scale);
        let neck = joint[joints::NECK];
        let head_seg = BODY.head_up * scale;
        joint[joints::HEAD] = [
            neck[0] + pitch.sin() * head_seg,
            neck[1],
            neck[2] + pitch.cos() * head_seg,
        ];

        // Arms swing anti-phase with the same-side leg.
        for (side, (shoulder_j, elbow_j, hand_j)) in [
            (1.0, (joints::L_SHOULDER, joints::L_ELBOW, joints::L_HAND)),
            (-1.0, (joints::R_SHOULDER, joints::R_ELBOW, joints::R_HAND)),
        ] {
            let sh = [
                neck[0],
                neck[1] + side * BODY.shoulder_half * scale,
                neck[2] - 0.02 * scale,
            ];
            joint[shoulder_j] = sh;
            let arm_phase = if side > 0.0 { phi + std::f64::consts::PI } else { phi };
            let theta = arm_amp * arm_phase.sin();
            let ua = BODY.upper_arm * scale;
            let fa = BODY.forearm * scale;
            let elbow = [sh[0] + theta.sin() * ua, sh[1], sh[2] - theta.cos() * ua];
            joint[elbow_j] = elbow;
            let bend = theta + 0.20;
            joint[hand_j] = [
                elbow[0] + bend.sin() * fa,
                elbow[1],
                elbow[2] - bend.cos() * fa,
            ];
        }

        // Legs swing in alternation; the swinging foot lifts slightly.
        for (side, (hip_j, knee_j, foot_j)) in [
            (1.0, (joints::L_HIP, joints::L_KNEE, joints::L_FOOT)),
            (-1.0, (joints::R_HIP, joints::R_KNEE, joints::R_FOOT)),
        ] {
            let hip = [
                root_x,
                root_y + side * BODY.hip_half * scale,
                root_z,
            ];
            joint[hip_j] = hip;
            let leg_phase = if side > 0.0 { phi } else { phi + std::f64::consts::PI };
            let theta = leg_amp * leg_phase.sin();
            let th = BODY.thigh * scale;
            let sk = BODY.shank * scale;
            let knee = [hip[0] + theta.sin() * th, hip[1], hip[2] - theta.cos() * th];
            joint[knee_j] = knee;
            let swing_lift = 0.35 * leg_amp * leg_phase.cos().max(0.0);
            let shank_theta = theta - swing_lift;
            let mut foot = [
                knee[0] + shank_theta.sin() * sk,
                knee[1],
                knee[2] - shank_theta.cos() * sk,
            ];
            foot[2] += 0.04 * scale * leg_phase.sin().max(0.0) * leg_amp / 0.3_f64.max(leg_amp);
            joint[foot_j] = foot;
        }

        for (j, pos) in joint.iter().enumerate() {
            for (c, &v) in pos.iter().enumerate() {
                let noisy = v + cfg.noise_std * rng.normal();
                // Quantise so the f32 file format is lossless.
                data[[t, j, c]] = noisy as f32 as f64;
            }
        }
    }
    data
}
