//! Command-line interface.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use boneage_core::backbone::BackboneConfig;
use boneage_core::data::{synth_generate, AgeRange, Sample, SynthConfig};
use boneage_core::pipeline::{
    evaluate, run_ablation, split_train_val, train, Ablation, Model, ModelConfig, TrainConfig, EVAL_BATCH,
};
use boneage_core::roi::{DualGraph, LaplacianMode, RoiSchema};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::checkpoint::{load_checkpoint, load_schema, save_checkpoint, schema_hash};
use crate::manifest::{attach_scores, load_manifest, write_dataset, write_scores_csv};
use crate::report::{
    roi_scores_svg, write_ablation_csv, write_eval_report, write_json, write_log_csv, write_predictions,
    write_roi_scores_csv,
};

#[derive(Debug, Parser)]
#[command(name = "boneage", version, about = "Bone age regression from ROI feature pillars")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write a checkpoint and a log.
    Train(TrainArgs),
    /// Report MAD (and per-ROI score agreement) of a checkpoint.
    Eval(EvalArgs),
    /// Write one prediction record per sample.
    Predict(PredictArgs),
    /// Train and evaluate the six ablation configurations.
    Ablate(AblateArgs),
    /// Generate a synthetic dataset with known ROI scores.
    Synth(SynthArgs),
    /// Print parameter counts and a schema summary.
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
pub enum LaplacianArg {
    Symmetric,
    Literal,
}

impl From<LaplacianArg> for LaplacianMode {
    fn from(a: LaplacianArg) -> Self {
        match a {
            LaplacianArg::Symmetric => LaplacianMode::Symmetric,
            LaplacianArg::Literal => LaplacianMode::Literal,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelArgs {
    /// Schema JSON; the built-in 17-ROI hand schema when omitted.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// `baseline`, or a `+`-joined subset of agconv|rgconv, pa, ca.
    #[arg(long, default_value = "agconv+pa+ca")]
    pub ablation: String,
    #[arg(long, value_enum, default_value = "symmetric")]
    pub laplacian_mode: LaplacianArg,
    #[arg(long, default_value_t = 0.01)]
    pub ema_theta: f64,
    /// Backbone output channels.
    #[arg(long, default_value_t = 64)]
    pub channels: usize,
    /// Upper end of the admissible age range in months.
    #[arg(long, default_value_t = 216.0)]
    pub max_age: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainingArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 48)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Comma-separated decay epochs; by default 60 and 120 scaled to `--epochs`
    /// out of 200.
    #[arg(long, value_delimiter = ',')]
    pub milestones: Option<Vec<usize>>,
    /// Random flip, rotation and blur on training images.
    #[arg(long)]
    pub augment: bool,
    /// Validation share when no validation manifest is given.
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub val_manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub training: TrainingArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Ground-truth score table (`id,<roi>...`), e.g. the one `synth` writes.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Schema the checkpoint must match.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Output directory; `<checkpoint dir>/eval` when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AblateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub val_manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of seeds, counting up from `--seed`.
    #[arg(long, default_value_t = 3)]
    pub repeats: u64,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub training: TrainingArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 640)]
    pub count: usize,
    #[arg(long, default_value_t = 512)]
    pub image_size: usize,
    /// Also write the latent scores into the manifest.
    #[arg(long)]
    pub with_scores: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Serialize)]
struct RunConfig<'a, A: Serialize> {
    command: &'a str,
    args: &'a A,
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<&'a ModelConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    train: Option<&'a TrainConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    synth: Option<&'a SynthConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    schema_hash: Option<String>,
}

fn require_file(path: &Path, what: &str) -> anyhow::Result<()> {
    if !path.is_file() {
        bail!("{} `{}` does not exist", what, path.display());
    }
    Ok(())
}

fn prepare_out(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory `{}`", dir.display()))
}

fn schema_from(path: Option<&Path>) -> anyhow::Result<RoiSchema> {
    match path {
        Some(p) => Ok(load_schema(p)?),
        None => Ok(RoiSchema::default_hand()),
    }
}

impl ModelArgs {
    fn check_paths(&self) -> anyhow::Result<()> {
        if let Some(s) = &self.schema {
            require_file(s, "schema")?;
        }
        Ok(())
    }

    fn config(&self, seed: u64) -> anyhow::Result<ModelConfig> {
        let mut cfg = ModelConfig {
            backbone: BackboneConfig::small(self.channels),
            laplacian: self.laplacian_mode.into(),
            ema_theta: self.ema_theta,
            ablation: Ablation::parse(&self.ablation)?,
            seed,
            ..ModelConfig::default()
        };
        cfg.ages = AgeRange {
            min: 0.0,
            max: self.max_age,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl TrainingArgs {
    fn config(&self) -> anyhow::Result<TrainConfig> {
        let base = TrainConfig::default();
        let cfg = TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            milestones: self
                .milestones
                .clone()
                .unwrap_or_else(|| base.rescaled_milestones(self.epochs)),
            seed: self.seed,
            augment: self.augment,
            val_fraction: self.val_fraction,
            ..base
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load_split(
    manifest: &Path,
    val_manifest: Option<&Path>,
    schema: &RoiSchema,
    ages: AgeRange,
    tcfg: &TrainConfig,
) -> anyhow::Result<(Vec<Sample>, Vec<Sample>)> {
    let samples = load_manifest(manifest, schema.len(), ages)?;
    Ok(match val_manifest {
        Some(v) => (samples, load_manifest(v, schema.len(), ages)?),
        None => split_train_val(&samples, tcfg.val_fraction, tcfg.seed),
    })
}

/// Runs one command; the error carries the message for the error stream.
pub fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::Synth(a) => cmd_synth(&a),
        Command::Inspect(a) => cmd_inspect(&a),
    }
}

fn cmd_train(a: &TrainArgs) -> anyhow::Result<()> {
    require_file(&a.manifest, "manifest")?;
    if let Some(v) = &a.val_manifest {
        require_file(v, "validation manifest")?;
    }
    a.model.check_paths()?;
    let mcfg = a.model.config(a.training.seed)?;
    let tcfg = a.training.config()?;
    prepare_out(&a.out)?;
    let schema = schema_from(a.model.schema.as_deref())?;
    write_json(
        &a.out.join("config.json"),
        &RunConfig {
            command: "train",
            args: a,
            model: Some(&mcfg),
            train: Some(&tcfg),
            synth: None,
            schema_hash: Some(schema_hash(&schema)),
        },
    )?;
    let (train_set, val_set) = load_split(&a.manifest, a.val_manifest.as_deref(), &schema, mcfg.ages, &tcfg)?;
    let mut model = Model::new(mcfg, schema)?;
    let outcome = train(&mut model, &train_set, &val_set, &tcfg)?;
    save_checkpoint(&a.out.join("checkpoint"), &model, Some(&tcfg))?;
    write_log_csv(&a.out.join("log.csv"), &outcome.log)?;
    if let Some(e) = outcome.aborted {
        bail!("training stopped early: {}; the checkpoint holds the last good state", e);
    }
    if let Some(last) = outcome.log.last() {
        println!(
            "trained {} epochs on {} samples; final train loss {:.3}{}",
            outcome.log.len(),
            train_set.len(),
            last.train_loss,
            last.val_mad.map(|m| format!(", validation MAD {:.3} months", m)).unwrap_or_default()
        );
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> anyhow::Result<()> {
    require_file(&a.checkpoint, "checkpoint")?;
    require_file(&a.manifest, "manifest")?;
    if let Some(s) = &a.scores {
        require_file(s, "score table")?;
    }
    if let Some(s) = &a.schema {
        require_file(s, "schema")?;
    }
    let out = a.out.clone().unwrap_or_else(|| {
        a.checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join("eval")
    });
    prepare_out(&out)?;
    let expected = a.schema.as_deref().map(load_schema).transpose()?;
    let (mut model, _) = load_checkpoint(&a.checkpoint, expected.as_ref())?;
    write_json(
        &out.join("config.json"),
        &RunConfig {
            command: "eval",
            args: a,
            model: Some(&model.config),
            train: None,
            synth: None,
            schema_hash: Some(schema_hash(&model.schema)),
        },
    )?;
    let mut samples = load_manifest(&a.manifest, model.rois(), model.config.ages)?;
    if let Some(s) = &a.scores {
        attach_scores(s, model.schema.names(), &mut samples)?;
    }
    let report = evaluate(&mut model, &samples)?;
    write_eval_report(&out.join("report.json"), &report)?;
    if report.per_roi.is_some() {
        let names = model.schema.names();
        write_roi_scores_csv(&out.join("roi_scores.csv"), names, &samples, &report)?;
        let svg = roi_scores_svg(names, &samples, &report);
        fs::write(out.join("roi_scores.svg"), svg).with_context(|| format!("writing into {}", out.display()))?;
    }
    println!("MAD {:.4} months over {} samples", report.mad, report.count);
    if let Some(rho) = report.mean_spearman() {
        println!("mean per-ROI Spearman {:.4}", rho);
    }
    Ok(())
}

fn cmd_predict(a: &PredictArgs) -> anyhow::Result<()> {
    require_file(&a.checkpoint, "checkpoint")?;
    require_file(&a.manifest, "manifest")?;
    if let Some(s) = &a.schema {
        require_file(s, "schema")?;
    }
    prepare_out(&a.out)?;
    let expected = a.schema.as_deref().map(load_schema).transpose()?;
    let (mut model, _) = load_checkpoint(&a.checkpoint, expected.as_ref())?;
    write_json(
        &a.out.join("config.json"),
        &RunConfig {
            command: "predict",
            args: a,
            model: Some(&model.config),
            train: None,
            synth: None,
            schema_hash: Some(schema_hash(&model.schema)),
        },
    )?;
    let samples = load_manifest(&a.manifest, model.rois(), model.config.ages)?;
    let records = model.predict(&samples, EVAL_BATCH)?;
    write_predictions(&a.out.join("predictions.jsonl"), &records)?;
    println!("wrote {} predictions", records.len());
    Ok(())
}

fn cmd_ablate(a: &AblateArgs) -> anyhow::Result<()> {
    require_file(&a.manifest, "manifest")?;
    if let Some(v) = &a.val_manifest {
        require_file(v, "validation manifest")?;
    }
    a.model.check_paths()?;
    if a.repeats == 0 {
        bail!("--repeats must be at least 1");
    }
    let mcfg = a.model.config(a.training.seed)?;
    let tcfg = a.training.config()?;
    prepare_out(&a.out)?;
    let schema = schema_from(a.model.schema.as_deref())?;
    write_json(
        &a.out.join("config.json"),
        &RunConfig {
            command: "ablate",
            args: a,
            model: Some(&mcfg),
            train: Some(&tcfg),
            synth: None,
            schema_hash: Some(schema_hash(&schema)),
        },
    )?;
    let (train_set, val_set) = load_split(&a.manifest, a.val_manifest.as_deref(), &schema, mcfg.ages, &tcfg)?;
    if val_set.is_empty() {
        bail!("the ablation needs validation samples");
    }
    let seeds: Vec<u64> = (0..a.repeats).map(|k| a.training.seed + k).collect();
    let rows = run_ablation(&schema, &train_set, &val_set, &mcfg, &tcfg, &seeds)?;
    write_ablation_csv(&a.out.join("ablation.csv"), &rows)?;
    for (k, r) in rows.iter().enumerate() {
        println!("{} {:<28} mean MAD {:.4}", k + 1, r.label, r.mean_mad());
    }
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> anyhow::Result<()> {
    prepare_out(&a.out)?;
    let cfg = SynthConfig {
        count: a.count,
        seed: a.seed,
        image_size: a.image_size,
        ..SynthConfig::default()
    };
    cfg.validate()?;
    let schema = RoiSchema::default_hand();
    write_json(
        &a.out.join("config.json"),
        &RunConfig {
            command: "synth",
            args: a,
            model: None,
            train: None,
            synth: Some(&cfg),
            schema_hash: Some(schema_hash(&schema)),
        },
    )?;
    let samples = synth_generate(&schema, &cfg)?;
    write_dataset(&a.out, &samples, a.with_scores)?;
    write_scores_csv(&a.out.join("scores.csv"), schema.names(), &samples)?;
    println!("wrote {} samples to {}", samples.len(), a.out.display());
    Ok(())
}

fn cmd_inspect(a: &InspectArgs) -> anyhow::Result<()> {
    let model = match &a.checkpoint {
        Some(c) => {
            require_file(c, "checkpoint")?;
            load_checkpoint(c, None)?.0
        }
        None => {
            a.model.check_paths()?;
            Model::new(a.model.config(0)?, schema_from(a.model.schema.as_deref())?)?
        }
    };
    let counts = model.count_params();
    println!("parameters");
    println!("  backbone  {:>10}", counts.backbone);
    println!("  pab       {:>10}", counts.pab);
    println!("  cab       {:>10}", counts.cab);
    println!("  head      {:>10}", counts.head);
    println!("  dgam+head {:>10}", counts.dgam() + counts.head);
    println!("  total     {:>10}", counts.total());
    println!("configuration {}", model.config.ablation.label());
    let schema = &model.schema;
    println!(
        "schema: {} ROIs, {} joint edges, hash {}",
        schema.len(),
        schema.g1_edges().len(),
        schema_hash(schema)
    );
    for group in boneage_core::roi::AnatomyGroup::ALL {
        let members: Vec<&str> = schema
            .names()
            .iter()
            .zip(schema.groups())
            .filter(|(_, g)| **g == group)
            .map(|(n, _)| n.as_str())
            .collect();
        println!("  group {}: {}", group.as_str(), members.join(" "));
    }
    let graphs = DualGraph::build(schema, model.config.laplacian);
    println!("  laplacian mode {:?}, {} nodes", graphs.mode, graphs.nodes());
    Ok(())
}
