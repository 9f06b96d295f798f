//! The assembled model, its training loop, evaluation and the ablation study.

pub mod ablation;
pub mod config;
pub mod eval;
pub mod model;
pub mod train;

pub use ablation::{run_ablation, AblationRow};
pub use config::{Ablation, GroupingMode, ModelConfig, TrainConfig};
pub use eval::{evaluate, split_train_val, EvalReport, RoiCorrelation, EVAL_BATCH};
pub use model::{AttentionSnapshot, ForwardVars, Model, ParamCounts, PredictionRecord};
pub use train::{calibrate_statistics, epoch_batches, train, LogRow, TrainOutcome};
