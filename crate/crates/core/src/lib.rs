//! Bone age regression by ROI score summation.
//!
//! A radiograph is encoded by a small strided backbone into a 16x down-sampled
//! feature map. The channel vector under each of the 17 anatomical ROI centers
//! (a "feature pillar") is augmented with gender and position, re-weighted by a
//! patient-specific channel attention, and scored by one of four shared
//! anatomy-group blocks. Scores are re-weighted by a per-gender context
//! attention and summed into an age in months.
//!
//! The crate is `no_std` (with `alloc`). File formats and the command-line
//! driver live in the `boneage` crate.
#![no_std]

extern crate alloc;

pub mod autodiff;
pub mod backbone;
pub mod data;
pub mod dgam;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod norm;
pub mod optim;
pub mod params;
pub mod pillars;
pub mod pipeline;
pub mod roi;
pub mod scoring;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Backbone down-sampling factor between image and feature map.
pub const DOWNSAMPLE: usize = 16;

/// Number of ROIs in the shipped schema.
pub const NUM_ROIS: usize = 17;
