//! Self-supervised contrastive representation learning for emotion
//! recognition from 3-D gait skeleton sequences.
//!
//! The crate covers the full pipeline at desk scale:
//!
//! - a canonical 16-joint, 120-frame skeleton data model with a portable
//!   dataset format and a synthetic 4-class gait generator ([`dataset`],
//!   [`synth`]);
//! - general and selective strong augmentations producing the three training
//!   views ([`augment`]);
//! - a two-branch encoder fusing spatial-temporal graph convolution features
//!   with frequency-domain token-mixer features, plus a projector and a
//!   parameter-free salience drop ([`cffn`]);
//! - momentum-contrast pretraining with an InfoNCE loss and a distributional
//!   divergence loss over a FIFO memory bank ([`trainer`], [`losses`],
//!   [`bank`]);
//! - linear, finetuned and semi-supervised evaluation protocols with weighted
//!   classification metrics and a 2-D discriminant projection ([`protocols`],
//!   [`metrics`], [`lda`]).

pub mod augment;
pub mod bank;
pub mod cffn;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod lda;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod protocols;
pub mod real;
pub mod rng;
pub mod sequence;
pub mod synth;
pub mod topology;
pub mod trainer;

pub use error::{Error, Result};
pub use real::Real;
