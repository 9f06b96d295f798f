//! Model checkpoints and schema files.

use std::fs;
use std::path::Path;

use boneage_core::pipeline::{Model, ModelConfig, TrainConfig};
use boneage_core::roi::{RoiSchema, SchemaConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::{read_archive, write_archive};
use crate::error::{Error, Result};

pub const CHECKPOINT_KIND: &str = "checkpoint";

/// The configuration stored in a checkpoint header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub model: ModelConfig,
    pub schema: SchemaConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
}

/// SHA-256 of the schema's canonical text, hex encoded.
pub fn schema_hash(schema: &RoiSchema) -> String {
    Sha256::digest(schema.canonical_string().as_bytes())
        .iter()
        .map(|b| format!("{:02x}", b))
        .collect()
}

pub fn load_schema(path: &Path) -> Result<RoiSchema> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg: SchemaConfig = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(RoiSchema::from_config(&cfg)?)
}

pub fn save_schema(path: &Path, schema: &RoiSchema) -> Result<()> {
    let json = serde_json::to_string_pretty(&schema.to_config()).expect("schema serializes");
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(path: &Path, model: &Model, train: Option<&TrainConfig>) -> Result<()> {
    let config = CheckpointConfig {
        model: model.config.clone(),
        schema: model.schema.to_config(),
        train: train.cloned(),
    };
    write_archive(
        path,
        CHECKPOINT_KIND,
        serde_json::to_value(&config).expect("config serializes"),
        Some(schema_hash(&model.schema)),
        &model.state_tensors(),
    )
}

/// Loads a checkpoint. The stored schema must hash to the stored hash, and to
/// `expected` when one is given.
pub fn load_checkpoint(path: &Path, expected: Option<&RoiSchema>) -> Result<(Model, CheckpointConfig)> {
    let (header, tensors) = read_archive(path)?;
    if header.kind != CHECKPOINT_KIND {
        return Err(Error::format(path, format!("archive holds `{}`, not a checkpoint", header.kind)));
    }
    let config: CheckpointConfig =
        serde_json::from_value(header.config).map_err(|e| Error::format(path, format!("config: {}", e)))?;
    let schema = RoiSchema::from_config(&config.schema)?;
    let stored = header
        .schema_hash
        .ok_or_else(|| Error::format(path, "checkpoint has no schema hash"))?;
    let own = schema_hash(&schema);
    if stored != own {
        return Err(Error::SchemaMismatch { stored, expected: own });
    }
    if let Some(exp) = expected {
        let want = schema_hash(exp);
        if stored != want {
            return Err(Error::SchemaMismatch { stored, expected: want });
        }
    }
    let model = Model::from_state(config.model.clone(), schema, tensors)?;
    Ok((model, config))
}
