//! Samples, manifest records, augmentation and the synthetic generator.

pub mod augment;
pub mod sample;
pub mod synth;

pub use augment::{augment_sample, AugmentConfig, Augmented};
pub use sample::{AgeRange, GrayImage, ManifestRecord, Sample, SampleInput};
pub use synth::{synth_generate, SynthConfig};
