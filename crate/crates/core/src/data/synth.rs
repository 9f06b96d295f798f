//! Synthetic radiographs with known ROI scores.
//!
//! Every patient has a maturity `u ~ U(0, 1)`; each ROI gets its own stage
//! `clamp(u + eps, 0, 1)` and a score `a[gender][n] * stage`. The image shows
//! one blob per ROI whose look encodes the stage by a group-specific rule:
//! group A disks grow, group B disks shrink like a closing growth plate,
//! group C spots spread and group D disks grow and brighten. The age is the group-weighted score sum.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::sample::{AgeRange, GrayImage, Sample, SampleInput};
use crate::error::{Error, Result};
use crate::init::{derived_rng, SeededRng};
use crate::pillars::{Gender, RoiCenter};
use crate::roi::{AnatomyGroup, RoiSchema};

/// Reference frame the hand layout is drawn in; scaled to `image_size`.
const LAYOUT_SIZE: f64 = 160.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub count: usize,
    pub seed: u64,
    /// Side of the square image in pixels; a multiple of 16.
    pub image_size: usize,
    /// Weight of each anatomy group A..D in the age sum.
    pub group_weights: [f64; 4],
    /// Age reached when every ROI is fully mature.
    pub full_maturity_age: f64,
    /// Standard deviation of the per-ROI stage perturbation.
    pub stage_noise: f64,
    pub ages: AgeRange,
    /// Blob radius at stage 0 and 1, in layout pixels.
    pub radius: (f64, f64),
    /// Maximum center displacement, in layout pixels.
    pub jitter: usize,
    /// Per-patient multiplicative exposure.
    pub gain: (f64, f64),
    pub background: f64,
    pub pixel_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 640,
            seed: 0,
            image_size: 512,
            group_weights: [1.0, 1.2, 1.4, 2.0],
            full_maturity_age: 200.0,
            stage_noise: 0.2,
            ages: AgeRange::default(),
            radius: (1.5, 6.0),
            jitter: 2,
            gain: (0.75, 1.25),
            background: 0.1,
            pixel_noise: 0.02,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("synthetic data: {}", m)));
        if self.image_size == 0 || self.image_size % crate::DOWNSAMPLE != 0 {
            return bad("image size must be a positive multiple of 16");
        }
        if self.group_weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return bad("group weights must be positive");
        }
        if !(self.radius.0 > 0.0 && self.radius.0 <= self.radius.1) {
            return bad("radius range must be positive and ordered");
        }
        if !(self.gain.0 > 0.0 && self.gain.0 <= self.gain.1) || self.stage_noise < 0.0 || self.pixel_noise < 0.0 {
            return bad("noise and gain parameters out of range");
        }
        Ok(())
    }

    fn scale(&self) -> f64 {
        self.image_size as f64 / LAYOUT_SIZE
    }
}

/// Nominal center of every ROI of the default hand, in layout pixels.
///
/// At the layout scale ROIs sit on every other 16-pixel cell in both
/// directions, so no two share a feature-map cell or touch one diagonally.
pub fn layout(schema: &RoiSchema) -> Vec<(f64, f64)> {
    let mut next = [0usize; 4];
    schema
        .groups()
        .iter()
        .map(|g| {
            let k = next[g.index()];
            next[g.index()] += 1;
            match g {
                AnatomyGroup::A => (24.0, 24.0 + 32.0 * k as f64),
                AnatomyGroup::B => (56.0, 24.0 + 32.0 * k as f64),
                AnatomyGroup::C => (88.0, 24.0 + 32.0 * k as f64),
                AnatomyGroup::D => (120.0, 56.0 + 64.0 * k as f64),
            }
        })
        .collect()
}

/// Score amplitude `a[gender][n]`, scaled so that a fully mature patient of
/// either gender has age `full_maturity_age`. ROIs of one anatomy group share
/// an amplitude, so one scoring rule serves the whole group.
pub fn score_amplitudes(schema: &RoiSchema, cfg: &SynthConfig) -> [Vec<f64>; 2] {
    const GROUP_BASE: [[f64; 4]; 2] = [[1.0, 1.3, 0.8, 1.1], [1.1, 1.15, 0.95, 1.0]];
    let table = |gender: usize| -> Vec<f64> {
        let raw: Vec<f64> = schema.groups().iter().map(|g| GROUP_BASE[gender][g.index()]).collect();
        let total: f64 = raw
            .iter()
            .zip(schema.groups())
            .map(|(a, g)| a * cfg.group_weights[g.index()])
            .sum();
        raw.iter().map(|a| a * cfg.full_maturity_age / total).collect()
    };
    [table(0), table(1)]
}

/// Blob radius in image pixels for a stage in `[0, 1]`.
pub fn blob_radius(stage: f64, cfg: &SynthConfig) -> f64 {
    (cfg.radius.0 + (cfg.radius.1 - cfg.radius.0) * stage) * cfg.scale()
}

/// Weighted score sum, `sum_n w[group(n)] * score[n]`.
pub fn weighted_sum(schema: &RoiSchema, weights: &[f64; 4], scores: &[f64]) -> f64 {
    scores
        .iter()
        .zip(schema.groups())
        .map(|(s, g)| weights[g.index()] * s)
        .sum()
}

/// Generates `cfg.count` samples. Scores are attached to each sample; writers
/// decide whether to publish them.
pub fn synth_generate(schema: &RoiSchema, cfg: &SynthConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let amplitudes = score_amplitudes(schema, cfg);
    let nominal = layout(schema);
    (0..cfg.count)
        .map(|k| generate_one(schema, cfg, &amplitudes, &nominal, k))
        .collect()
}

fn generate_one(
    schema: &RoiSchema,
    cfg: &SynthConfig,
    amplitudes: &[Vec<f64>; 2],
    nominal: &[(f64, f64)],
    index: usize,
) -> Result<Sample> {
    let mut r: SeededRng = derived_rng(cfg.seed, index as u64);
    let gender = if r.random::<bool>() { Gender::Male } else { Gender::Female };
    let u: f64 = r.random();
    let noise = Normal::new(0.0, cfg.stage_noise.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::InvalidConfig(format!("{}", e)))?;
    let stages: Vec<f64> = (0..schema.len())
        .map(|_| (u + noise.sample(&mut r)).clamp(0.0, 1.0))
        .collect();
    let scores: Vec<f64> = stages
        .iter()
        .zip(&amplitudes[gender.index()])
        .map(|(s, a)| a * s)
        .collect();
    let age = cfg.ages.clamp(weighted_sum(schema, &cfg.group_weights, &scores));

    let scale = cfg.scale();
    let size = cfg.image_size;
    let jitter = cfg.jitter as i64;
    let centers: Vec<RoiCenter> = nominal
        .iter()
        .map(|&(i, j)| {
            let di = r.random_range(-jitter..=jitter) as f64;
            let dj = r.random_range(-jitter..=jitter) as f64;
            let row = libm::round((i + di) * scale) as usize;
            let col = libm::round((j + dj) * scale) as usize;
            RoiCenter::new(row.min(size - 1), col.min(size - 1))
        })
        .collect();

    let gain = r.random_range(cfg.gain.0..=cfg.gain.1);
    let mut signal = vec![cfg.background; size * size];
    for ((center, stage), group) in centers.iter().zip(&stages).zip(schema.groups()) {
        draw_blob(&mut signal, size, *center, *stage, *group, cfg);
    }
    let pixel = Normal::new(0.0, cfg.pixel_noise.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::InvalidConfig(format!("{}", e)))?;
    let pixels = signal
        .into_iter()
        .map(|v| {
            let v = (gain * v + pixel.sample(&mut r)).clamp(0.0, 1.0);
            libm::round(v * 255.0) / 255.0
        })
        .collect();
    Ok(Sample {
        id: format!("syn{:05}", index),
        input: SampleInput::Image(GrayImage::new(size, size, pixels)?),
        gender,
        centers,
        age_months: age,
        scores: Some(scores),
    })
}

fn draw_blob(signal: &mut [f64], size: usize, center: RoiCenter, stage: f64, group: AnatomyGroup, cfg: &SynthConfig) {
    let radius = blob_radius(stage, cfg);
    let closing = blob_radius(1.0 - stage, cfg);
    let reach = libm::ceil(blob_radius(1.0, cfg) + 2.0) as i64;
    let (ci, cj) = (center.row as i64, center.col as i64);
    let coverage = |r: f64, d: f64| (r + 0.5 - d).clamp(0.0, 1.0);
    for y in (ci - reach).max(0)..=(ci + reach).min(size as i64 - 1) {
        for x in (cj - reach).max(0)..=(cj + reach).min(size as i64 - 1) {
            let d = libm::hypot((y - ci) as f64, (x - cj) as f64);
            let v = match group {
                AnatomyGroup::A => 0.7 * coverage(radius, d),
                AnatomyGroup::B => 0.7 * coverage(closing, d),
                AnatomyGroup::C => {
                    let sigma = radius / 2.0;
                    0.7 * libm::exp(-d * d / (2.0 * sigma * sigma))
                }
                AnatomyGroup::D => (0.2 + 0.6 * stage) * coverage(radius, d),
            };
            let p = &mut signal[y as usize * size + x as usize];
            *p = (*p + v).min(1.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(count: usize) -> SynthConfig {
        SynthConfig {
            count,
            image_size: 128,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn ages_are_weighted_score_sums() {
        let schema = RoiSchema::default_hand();
        let cfg = small(8);
        for s in synth_generate(&schema, &cfg).unwrap() {
            let sum = weighted_sum(&schema, &cfg.group_weights, s.scores.as_ref().unwrap());
            assert_eq!(s.age_months, sum);
            s.validate(17, cfg.ages).unwrap();
        }
    }

    #[test]
    fn amplitudes_reach_full_maturity_age() {
        let schema = RoiSchema::default_hand();
        let cfg = small(1);
        for table in score_amplitudes(&schema, &cfg) {
            let age = weighted_sum(&schema, &cfg.group_weights, &table);
            assert!((age - cfg.full_maturity_age).abs() < 1e-9);
        }
    }

    #[test]
    fn layout_puts_each_roi_in_its_own_cell() {
        let schema = RoiSchema::default_hand();
        let mut cells: Vec<(usize, usize)> = layout(&schema)
            .iter()
            .map(|&(i, j)| (i as usize / 16, j as usize / 16))
            .collect();
        cells.sort();
        cells.dedup();
        assert_eq!(cells.len(), 17);
    }

    #[test]
    fn rejects_indivisible_size() {
        let cfg = SynthConfig {
            image_size: 100,
            ..small(1)
        };
        assert!(synth_generate(&RoiSchema::default_hand(), &cfg).is_err());
    }
}
