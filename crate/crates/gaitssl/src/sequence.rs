//! The skeleton sequence sample type and temporal resampling.

use crate::error::{Error, Result};
use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

/// Canonical number of frames.
pub const CANON_FRAMES: usize = 120;
/// Canonical number of joints.
pub const CANON_JOINTS: usize = 16;
/// Canonical number of coordinates per joint.
pub const CANON_COORDS: usize = 3;

/// Emotion classes in dataset label order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EmotionClass {
    Angry = 0,
    Neutral = 1,
    Happy = 2,
    Sad = 3,
}

pub const NUM_CLASSES: usize = 4;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["angry", "neutral", "happy", "sad"];

impl EmotionClass {
    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(EmotionClass::Angry),
            1 => Some(EmotionClass::Neutral),
            2 => Some(EmotionClass::Happy),
            3 => Some(EmotionClass::Sad),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        CLASS_NAMES[self.index()]
    }
}

/// One gait sample: a T x J x C array of joint positions in meters, plus an
/// optional emotion label.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSequence {
    pub data: Array3<f64>,
    pub label: Option<EmotionClass>,
}

impl SkeletonSequence {
    pub fn new(data: Array3<f64>, label: Option<EmotionClass>) -> Self {
        Self { data, label }
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn joints(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn coords(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn is_canonical_shape(&self) -> bool {
        self.data.shape() == [CANON_FRAMES, CANON_JOINTS, CANON_COORDS]
    }

    pub fn validate_canonical(&self) -> Result<()> {
        if !self.is_canonical_shape() {
            return Err(Error::ShapeMismatch {
                context: "sequence".into(),
                expected: format!("{CANON_FRAMES}x{CANON_JOINTS}x{CANON_COORDS}"),
                found: format!("{:?}", self.data.shape()),
            });
        }
        if let Some(((t, j, c), _)) = self
            .data
            .indexed_iter()
            .find(|(_, v)| !v.is_finite())
        {
            return Err(Error::NonFinite(format!("frame {t}, joint {j}, coord {c}")));
        }
        Ok(())
    }
}

/// Linear interpolation of every joint/coordinate channel onto a uniform grid
/// of `target_t` frames. Endpoints are preserved exactly.
pub fn resample_temporal(seq: &SkeletonSequence, target_t: usize) -> Result<SkeletonSequence> {
    let t_in = seq.frames();
    if t_in < 2 {
        return Err(Error::ShapeMismatch {
            context: "resample input".into(),
            expected: "at least 2 frames".into(),
            found: format!("{t_in}"),
        });
    }
    if target_t < 2 {
        return Err(Error::InvalidConfig(format!(
            "resample target must be at least 2 frames, got {target_t}"
        )));
    }
    if target_t == t_in {
        return Ok(seq.clone());
    }
    let (j, c) = (seq.joints(), seq.coords());
    let mut out = Array3::<f64>::zeros((target_t, j, c));
    let scale = (t_in - 1) as f64 / (target_t - 1) as f64;
    for ti in 0..target_t {
        let pos = ti as f64 * scale;
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(t_in - 1);
        let frac = pos - lo as f64;
        let (a, b) = (seq.data.index_axis(Axis(0), lo), seq.data.index_axis(Axis(0), hi));
        let mut dst = out.index_axis_mut(Axis(0), ti);
        if frac == 0.0 {
            dst.assign(&a);
        } else {
            azip_lerp(&mut dst, &a, &b, frac);
        }
    }
    Ok(SkeletonSequence::new(out, seq.label))
}

fn azip_lerp(
    dst: &mut ndarray::ArrayViewMut2<f64>,
    a: &ndarray::ArrayView2<f64>,
    b: &ndarray::ArrayView2<f64>,
    frac: f64,
) {
    ndarray::Zip::from(dst)
        .and(a)
        .and(b)
        .for_each(|d, &x, &y| *d = x + (y - x) * frac);
}
