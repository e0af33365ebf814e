//! Skeleton sequence augmentations.
//!
//! Five general transforms (shearing, spatial flipping, rotation, cropping,
//! temporal flipping) and two strong transforms (upper-body jitter, random
//! spatiotemporal mask), plus pipeline composition for the three training
//! views. Every transform is a pure function of `(input, spec, rng)`; the
//! randomness is split into deterministic kernels and thin wrappers that draw
//! parameters from an [`RngStream`].

use crate::rng::RngStream;
use crate::sequence::SkeletonSequence;
use crate::topology::JointTopology;
use serde::{Deserialize, Serialize};

/// Parameters of the general augmentation pipeline. The default composition
/// enables shearing and cropping, the strongest pairing in the augmentation
/// ablation; the remaining transforms can be switched on individually.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneralAugmentSpec {
    pub shear: bool,
    /// Shear factors are drawn from [-shear_limit, shear_limit].
    pub shear_limit: f64,
    pub flip: bool,
    pub flip_prob: f64,
    pub rotate: bool,
    /// Rotation about the principal axis is drawn from [0, rotate_main_deg].
    pub rotate_main_deg: f64,
    /// Rotation about each remaining axis is drawn from [0, rotate_other_deg].
    pub rotate_other_deg: f64,
    pub crop: bool,
    /// Padding ratio gamma; cropping pads T/gamma frames.
    pub crop_pad_ratio: f64,
    pub temporal_flip: bool,
    pub temporal_flip_prob: f64,
}

impl Default for GeneralAugmentSpec {
    fn default() -> Self {
        GeneralAugmentSpec {
            shear: true,
            shear_limit: 1.0,
            flip: false,
            flip_prob: 0.5,
            rotate: false,
            rotate_main_deg: 30.0,
            rotate_other_deg: 10.0,
            crop: true,
            crop_pad_ratio: 2.0,
            temporal_flip: false,
            temporal_flip_prob: 0.5,
        }
    }
}

impl GeneralAugmentSpec {
    /// All five transforms disabled; the pipeline becomes the identity.
    pub fn disabled() -> Self {
        GeneralAugmentSpec {
            shear: false,
            flip: false,
            rotate: false,
            crop: false,
            temporal_flip: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        if self.crop_pad_ratio < 1.0 {
            return Err(crate::Error::InvalidConfig(format!(
                "crop padding ratio must be >= 1, got {}",
                self.crop_pad_ratio
            )));
        }
        for (name, p) in [("flip_prob", self.flip_prob), ("temporal_flip_prob", self.temporal_flip_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(crate::Error::InvalidConfig(format!(
                    "{name} must lie in [0,1], got {p}"
                )));
            }
        }
        if self.rotate_main_deg < 0.0 || self.rotate_other_deg < 0.0 {
            return Err(crate::Error::InvalidConfig(
                "rotation angle ranges must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Parameters of the strong augmentation stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StrongAugmentSpec {
    pub jitter: bool,
    /// Jitter matrix entries are drawn from [-jitter_limit, jitter_limit].
    pub jitter_limit: f64,
    pub mask: bool,
    /// Fraction of frames zeroed by the temporal mask.
    pub temporal_mask_ratio: f64,
}

impl Default for StrongAugmentSpec {
    fn default() -> Self {
        StrongAugmentSpec {
            jitter: true,
            jitter_limit: 1.0,
            mask: true,
            temporal_mask_ratio: 0.25,
        }
    }
}

impl StrongAugmentSpec {
    pub fn validate(&self) -> crate::Result<()> {
        if !(self.temporal_mask_ratio > 0.0 && self.temporal_mask_ratio < 1.0) {
            return Err(crate::Error::InvalidConfig(format!(
                "temporal mask ratio must lie in (0,1), got {}",
                self.temporal_mask_ratio
            )));
        }
        Ok(())
    }
}

// --- deterministic kernels ---------------------------------------------------

/// Right-multiply every joint coordinate row by the shear matrix with unit
/// diagonal and the six factors off-diagonal.
pub fn shear(seq: &SkeletonSequence, factors: &[f64; 6]) -> SkeletonSequence {
    let [r12, r13, r21, r23, r31, r32] = *factors;
    let m = [[1.0, r12, r13], [r21, 1.0, r23], [r31, r32, 1.0]];
    apply_row_matrix(seq, &m, None)
}

/// Right-multiply selected joint rows (or all joints) by a 3x3 matrix.
fn apply_row_matrix(
    seq: &SkeletonSequence,
    m: &[[f64; 3]; 3],
    joints: Option<&[usize]>,
) -> SkeletonSequence {
    let mut out = seq.clone();
    let (t_n, j_n) = (seq.frames(), seq.joints());
    let selected: Vec<usize> = match joints {
        Some(list) => list.to_vec(),
        None => (0..j_n).collect(),
    };
    for t in 0..t_n {
        for &j in &selected {
            let x = seq.data[[t, j, 0]];
            let y = seq.data[[t, j, 1]];
            let z = seq.data[[t, j, 2]];
            out.data[[t, j, 0]] = x * m[0][0] + y * m[1][0] + z * m[2][0];
            out.data[[t, j, 1]] = x * m[0][1] + y * m[1][1] + z * m[2][1];
            out.data[[t, j, 2]] = x * m[0][2] + y * m[1][2] + z * m[2][2];
        }
    }
    out
}

/// Swap every left joint trajectory with its right counterpart.
pub fn spatial_flip_apply(seq: &SkeletonSequence, topo: &JointTopology) -> SkeletonSequence {
    let mut out = seq.clone();
    for &(l, r) in &topo.left_right_pairs {
        for t in 0..seq.frames() {
            for c in 0..seq.coords() {
                out.data[[t, l, c]] = seq.data[[t, r, c]];
                out.data[[t, r, c]] = seq.data[[t, l, c]];
            }
        }
    }
    out
}

/// Rotation matrix for row-vector multiplication about one axis.
fn axis_rotation(axis: usize, angle: f64) -> [[f64; 3]; 3] {
    let (s, c) = angle.sin_cos();
    match axis {
        0 => [[1.0, 0.0, 0.0], [0.0, c, s], [0.0, -s, c]],
        1 => [[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]],
        _ => [[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]],
    }
}

fn matmul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for (k, bk) in b.iter().enumerate() {
                out[i][j] += a[i][k] * bk[j];
            }
        }
    }
    out
}

/// Rotate all joints by the given per-axis angles (radians), composed in the
/// fixed order X, then Y, then Z.
pub fn rotate_apply(seq: &SkeletonSequence, angles: &[f64; 3]) -> SkeletonSequence {
    let rx = axis_rotation(0, angles[0]);
    let ry = axis_rotation(1, angles[1]);
    let rz = axis_rotation(2, angles[2]);
    let m = matmul3(&matmul3(&rx, &ry), &rz);
    apply_row_matrix(seq, &m, None)
}

/// Number of padding frames used by cropping: round(T / gamma).
pub fn crop_pad_frames(t: usize, gamma: f64) -> usize {
    (t as f64 / gamma).round() as usize
}

/// Pad by symmetric edge replication and take the T-frame window starting at
/// `start` within the padded sequence. `start` must be within [0, pad].
pub fn crop_window(seq: &SkeletonSequence, gamma: f64, start: usize) -> SkeletonSequence {
    let t_n = seq.frames();
    let pad = crop_pad_frames(t_n, gamma);
    let head = pad / 2;
    debug_assert!(start <= pad);
    let mut out = seq.clone();
    for t_out in 0..t_n {
        // Index into the padded sequence, then back into the original with
        // edge replication at both ends.
        let padded_idx = start + t_out;
        let src = padded_idx.saturating_sub(head).min(t_n - 1);
        for j in 0..seq.joints() {
            for c in 0..seq.coords() {
                out.data[[t_out, j, c]] = seq.data[[src, j, c]];
            }
        }
    }
    out
}

/// Reverse the frame order.
pub fn temporal_flip_apply(seq: &SkeletonSequence) -> SkeletonSequence {
    let mut out = seq.clone();
    let t_n = seq.frames();
    for t in 0..t_n {
        for j in 0..seq.joints() {
            for c in 0..seq.coords() {
                out.data[[t, j, c]] = seq.data[[t_n - 1 - t, j, c]];
            }
        }
    }
    out
}

/// Right-multiply the coordinate rows of the upper-body jitter set by a full
/// 3x3 matrix, leaving every other joint untouched.
pub fn upper_body_jitter_apply(
    seq: &SkeletonSequence,
    topo: &JointTopology,
    matrix: &[[f64; 3]; 3],
) -> SkeletonSequence {
    apply_row_matrix(seq, matrix, Some(&topo.upper_jitter_set))
}

/// Zero all coordinates of the given body parts in every frame.
pub fn spatial_mask_apply(
    seq: &SkeletonSequence,
    topo: &JointTopology,
    part_indices: &[usize],
) -> SkeletonSequence {
    let mut out = seq.clone();
    for &p in part_indices {
        for &j in &topo.parts[p].joints {
            for t in 0..seq.frames() {
                for c in 0..seq.coords() {
                    out.data[[t, j, c]] = 0.0;
                }
            }
        }
    }
    out
}

/// Zero all joints in the given frames.
pub fn temporal_mask_apply(seq: &SkeletonSequence, frames: &[usize]) -> SkeletonSequence {
    let mut out = seq.clone();
    for &t in frames {
        for j in 0..seq.joints() {
            for c in 0..seq.coords() {
                out.data[[t, j, c]] = 0.0;
            }
        }
    }
    out
}

// --- randomized wrappers ------------------------------------------------------

pub fn shear_random(seq: &SkeletonSequence, limit: f64, rng: &mut RngStream) -> SkeletonSequence {
    let mut f = [0.0f64; 6];
    for v in f.iter_mut() {
        *v = rng.uniform(-limit, limit);
    }
    shear(seq, &f)
}

/// With probability `prob`, swap left and right sides.
pub fn spatial_flip(
    seq: &SkeletonSequence,
    topo: &JointTopology,
    prob: f64,
    rng: &mut RngStream,
) -> SkeletonSequence {
    if rng.bernoulli(prob) {
        spatial_flip_apply(seq, topo)
    } else {
        seq.clone()
    }
}

/// Pick a principal axis uniformly, draw its angle from [0, main_deg] and the
/// other two from [0, other_deg], then rotate.
pub fn rotate(
    seq: &SkeletonSequence,
    main_deg: f64,
    other_deg: f64,
    rng: &mut RngStream,
) -> SkeletonSequence {
    let principal = rng.uniform_int(3) as usize;
    let mut angles = [0.0f64; 3];
    for (axis, a) in angles.iter_mut().enumerate() {
        let limit = if axis == principal { main_deg } else { other_deg };
        *a = rng.uniform(0.0, limit).to_radians();
    }
    rotate_apply(seq, &angles)
}

pub fn crop(seq: &SkeletonSequence, gamma: f64, rng: &mut RngStream) -> SkeletonSequence {
    let pad = crop_pad_frames(seq.frames(), gamma);
    let start = rng.uniform_int((pad + 1) as u64) as usize;
    crop_window(seq, gamma, start)
}

pub fn temporal_flip(seq: &SkeletonSequence, prob: f64, rng: &mut RngStream) -> SkeletonSequence {
    if rng.bernoulli(prob) {
        temporal_flip_apply(seq)
    } else {
        seq.clone()
    }
}

/// Draw one jitter matrix with entries uniform in [-limit, limit]; the same
/// matrix is applied to every jitter-set joint in every frame.
pub fn upper_body_jitter(
    seq: &SkeletonSequence,
    topo: &JointTopology,
    limit: f64,
    rng: &mut RngStream,
) -> SkeletonSequence {
    let mut m = [[0.0f64; 3]; 3];
    for row in m.iter_mut() {
        for v in row.iter_mut() {
            *v = rng.uniform(-limit, limit);
        }
    }
    upper_body_jitter_apply(seq, topo, &m)
}

/// Select one or two of the five parts (count uniform on {1,2}, parts uniform
/// without replacement) and zero them.
pub fn spatial_mask(
    seq: &SkeletonSequence,
    topo: &JointTopology,
    rng: &mut RngStream,
) -> SkeletonSequence {
    let count = 1 + rng.uniform_int(2) as usize;
    let parts = rng.choose_distinct(topo.parts.len(), count);
    spatial_mask_apply(seq, topo, &parts)
}

/// Zero `floor(r * T)` distinct frames chosen uniformly without replacement.
pub fn temporal_mask(seq: &SkeletonSequence, r: f64, rng: &mut RngStream) -> SkeletonSequence {
    let k = (r * seq.frames() as f64).floor() as usize;
    if k == 0 {
        return seq.clone();
    }
    let frames = rng.choose_distinct(seq.frames(), k);
    temporal_mask_apply(seq, &frames)
}

/// Spatial mask followed by temporal mask; the zeroed set is the union.
pub fn random_spatiotemporal_mask(
    seq: &SkeletonSequence,
    topo: &JointTopology,
    spec: &StrongAugmentSpec,
    rng: &mut RngStream,
) -> SkeletonSequence {
    let masked = spatial_mask(seq, topo, rng);
    temporal_mask(&masked, spec.temporal_mask_ratio, rng)
}

// --- pipelines ----------------------------------------------------------------

/// Apply the enabled general transforms in fixed order: spatial (shear, flip,
/// rotate) before temporal (crop, temporal flip).
pub fn apply_general(
    seq: &SkeletonSequence,
    topo: &JointTopology,
    spec: &GeneralAugmentSpec,
    rng: &mut RngStream,
) -> SkeletonSequence {
    let mut cur = seq.clone();
    if spec.shear {
        cur = shear_random(&cur, spec.shear_limit, rng);
    }
    if spec.flip {
        cur = spatial_flip(&cur, topo, spec.flip_prob, rng);
    }
    if spec.rotate {
        cur = rotate(&cur, spec.rotate_main_deg, spec.rotate_other_deg, rng);
    }
    if spec.crop {
        cur = crop(&cur, spec.crop_pad_ratio, rng);
    }
    if spec.temporal_flip {
        cur = temporal_flip(&cur, spec.temporal_flip_prob, rng);
    }
    cur
}

/// The strong view: general pipeline, then upper-body jitter, then the random
/// spatiotemporal mask.
pub fn apply_strong(
    seq: &SkeletonSequence,
    topo: &JointTopology,
    general: &GeneralAugmentSpec,
    strong: &StrongAugmentSpec,
    rng: &mut RngStream,
) -> SkeletonSequence {
    let mut cur = apply_general(seq, topo, general, rng);
    if strong.jitter {
        cur = upper_body_jitter(&cur, topo, strong.jitter_limit, rng);
    }
    if strong.mask {
        cur = random_spatiotemporal_mask(&cur, topo, strong, rng);
    }
    cur
}
