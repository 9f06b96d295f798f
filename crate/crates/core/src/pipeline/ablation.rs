use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::config::{Ablation, ModelConfig, TrainConfig};
use super::eval::evaluate;
use super::model::Model;
use super::train::train;
use crate::data::Sample;
use crate::error::Result;
use crate::roi::RoiSchema;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub ablation: Ablation,
    pub seeds: Vec<u64>,
    /// Final validation MAD for each seed.
    pub mads: Vec<f64>,
}

impl AblationRow {
    pub fn mean_mad(&self) -> f64 {
        self.mads.iter().sum::<f64>() / self.mads.len() as f64
    }
}

/// Trains and evaluates the six ablation configurations on the same split.
/// Each seed drives both initialization and batch order.
pub fn run_ablation(
    schema: &RoiSchema,
    train_set: &[Sample],
    val_set: &[Sample],
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(6);
    for ablation in Ablation::table() {
        let mut mads = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mcfg = ModelConfig {
                ablation,
                seed,
                ..base_model.clone()
            };
            let tcfg = TrainConfig {
                seed,
                ..base_train.clone()
            };
            let mut model = Model::new(mcfg, schema.clone())?;
            let outcome = train(&mut model, train_set, val_set, &tcfg)?;
            if let Some(e) = outcome.aborted {
                return Err(e);
            }
            mads.push(evaluate(&mut model, val_set)?.mad);
        }
        rows.push(AblationRow {
            label: ablation.label(),
            ablation,
            seeds: seeds.to_vec(),
            mads,
        });
    }
    Ok(rows)
}
