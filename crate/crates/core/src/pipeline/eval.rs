use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::{Model, PredictionRecord};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::init::derived_rng;
use crate::stats::{mad, spearman};

/// Batch size used for inference passes.
pub const EVAL_BATCH: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiCorrelation {
    pub roi: String,
    pub spearman: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub count: usize,
    pub mad: f64,
    /// Present when every sample carries ground-truth scores.
    pub per_roi: Option<Vec<RoiCorrelation>>,
    pub records: Vec<PredictionRecord>,
}

impl EvalReport {
    pub fn mean_spearman(&self) -> Option<f64> {
        self.per_roi
            .as_ref()
            .map(|rows| rows.iter().map(|r| r.spearman).sum::<f64>() / rows.len() as f64)
    }

    /// `max |age - sum(weighted scores)|` over all records.
    pub fn max_sum_deviation(&self) -> f64 {
        self.records
            .iter()
            .map(|r| (r.age - r.weighted_scores.iter().fold(0.0, |a, v| a + v)).abs())
            .fold(0.0, f64::max)
    }
}

/// Inference-mode MAD, plus per-ROI rank correlation between the weighted
/// scores and the ground-truth scores when those are known.
pub fn evaluate(model: &mut Model, samples: &[Sample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Dataset("cannot evaluate an empty dataset".into()));
    }
    let records = model.predict(samples, EVAL_BATCH)?;
    let pred: Vec<f64> = records.iter().map(|r| r.age).collect();
    let truth: Vec<f64> = samples.iter().map(|s| s.age_months).collect();
    let per_roi = if samples.len() >= 2 && samples.iter().all(|s| s.scores.is_some()) {
        let rows = (0..model.rois())
            .map(|n| {
                let p: Vec<f64> = records.iter().map(|r| r.weighted_scores[n]).collect();
                let t: Vec<f64> = samples.iter().map(|s| s.scores.as_ref().expect("checked")[n]).collect();
                Ok(RoiCorrelation {
                    roi: model.schema.names()[n].clone(),
                    spearman: spearman(&p, &t)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Some(rows)
    } else {
        None
    };
    Ok(EvalReport {
        count: samples.len(),
        mad: mad(&pred, &truth)?,
        per_roi,
        records,
    })
}

/// Seeded shuffle, then the first `1 - val_fraction` share is training data.
pub fn split_train_val(samples: &[Sample], val_fraction: f64, seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut derived_rng(seed, 0x5_911));
    let n_val = libm::round(samples.len() as f64 * val_fraction) as usize;
    let n_train = samples.len() - n_val;
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect();
    (pick(&order[..n_train]), pick(&order[n_train..]))
}
