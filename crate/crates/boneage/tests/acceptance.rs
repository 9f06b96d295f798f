//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.
//!
//! Criteria run one after another so the timed training run does not share
//! the CPU with other checks.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use boneage::checkpoint::{load_checkpoint, save_checkpoint};
use boneage_core::backbone::BackboneConfig;
use boneage_core::data::{synth_generate, Sample, SynthConfig};
use boneage_core::pipeline::{
    calibrate_statistics, evaluate, run_ablation, split_train_val, train, Ablation, GroupingMode, Model,
    ModelConfig, TrainConfig,
};
use boneage_core::roi::RoiSchema;

const GRAD_BUDGET: Duration = Duration::from_secs(60);
const TRAIN_BUDGET: Duration = Duration::from_secs(600);
const MAD_RATIO: f64 = 0.20;
const MIN_SPEARMAN: f64 = 0.8;

struct Verdicts(Vec<(u8, bool)>);

impl Verdicts {
    fn record(&mut self, id: u8, pass: bool, what: &str, detail: String) {
        println!("[{}] {:>2} {}: {}", if pass { "PASS" } else { "FAIL" }, id, what, detail);
        self.0.push((id, pass));
    }
}

/// 512 training and 128 validation samples at 160 px.
fn benchmark(schema: &RoiSchema) -> (Vec<Sample>, Vec<Sample>) {
    let data = synth_generate(
        schema,
        &SynthConfig {
            count: 640,
            image_size: 160,
            seed: 0,
            ..SynthConfig::default()
        },
    )
    .unwrap();
    let (train_set, val_set) = split_train_val(&data, 0.2, 0);
    assert_eq!((train_set.len(), val_set.len()), (512, 128));
    (train_set, val_set)
}

fn benchmark_model(seed: u64) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig::small(16),
        seed,
        ..ModelConfig::default()
    }
}

fn benchmark_training(seed: u64) -> TrainConfig {
    let base = TrainConfig::default();
    TrainConfig {
        epochs: 60,
        batch_size: 16,
        milestones: base.rescaled_milestones(60),
        seed,
        ..base
    }
}

fn gradient_suite(v: &mut Verdicts) {
    let start = Instant::now();
    let primitives = support::primitive_errors(5);
    let chain = support::attention_chain_error();
    let composed: Vec<_> = (0..2).map(support::composed_model_check).collect();
    let elapsed = start.elapsed();

    let worst_primitive = primitives.iter().max_by(|a, b| a.error.total_cmp(&b.error)).unwrap();
    let worst_composed = composed.iter().map(|r| r.worst).fold(0.0, f64::max);
    let probed: usize = composed.iter().map(|r| r.probed).sum();
    let kinked: usize = composed.iter().map(|r| r.kinked).sum();
    let worst = worst_primitive.error.max(chain).max(worst_composed);
    let pass = primitives.len() >= 100
        && worst <= support::GRAD_TOL
        && kinked * 20 <= probed
        && composed.iter().all(|r| r.grads_finite)
        && elapsed < GRAD_BUDGET;
    v.record(
        1,
        pass,
        "gradient suite",
        format!(
            "{} primitive cases (worst {:.1e}, {}), attention chain {:.1e}, composed 64px C=8 model {:.1e} \
             over {} coordinates ({} on ReLU kinks skipped); tol {:.0e}; {:.1} s of {} s",
            primitives.len(),
            worst_primitive.error,
            worst_primitive.name,
            chain,
            worst_composed,
            probed,
            kinked,
            support::GRAD_TOL,
            elapsed.as_secs_f64(),
            GRAD_BUDGET.as_secs()
        ),
    );
}

fn graph_checks(v: &mut Verdicts) {
    let dev = support::gconv_oracle_deviation(50);
    v.record(
        2,
        dev <= 1e-10,
        "graph convolution vs dense oracle",
        format!("50 instances, max deviation {:.1e} (tol 1e-10)", dev),
    );

    let spectra = support::default_spectra();
    let pass = spectra
        .iter()
        .all(|s| s.symmetric && s.bottom >= -1.0 - 1e-12 && s.top <= 1.0 + 1e-12 && (s.top - 1.0).abs() <= 1e-6);
    let detail = spectra
        .iter()
        .enumerate()
        .map(|(j, s)| format!("graph {} eigenvalues in [{:.4}, {:.12}]", j + 1, s.bottom, s.top))
        .collect::<Vec<_>>()
        .join(", ");
    v.record(3, pass, "propagation spectrum", format!("{} (top 1 +- 1e-6)", detail));

    let dev = support::attention_equivariance_deviation(20);
    v.record(
        4,
        dev <= 1e-10,
        "attention permutation equivariance",
        format!("20 relabelings, max deviation {:.1e} (tol 1e-10)", dev),
    );

    let dev = support::ema_closed_form_deviation(1000);
    let first = support::first_ema_update_is_batch_mean(4);
    v.record(
        5,
        dev <= 1e-12 && first,
        "context EMA",
        format!(
            "k=1000 closed-form deviation {:.1e} (tol 1e-12), first update equals batch mean: {}",
            dev, first
        ),
    );
}

fn end_to_end(v: &mut Verdicts, schema: &RoiSchema, train_set: &[Sample], val_set: &[Sample]) {
    let mut untrained = Model::new(benchmark_model(0), schema.clone()).unwrap();
    calibrate_statistics(&mut untrained, train_set, 16, 0).unwrap();
    let before = evaluate(&mut untrained, val_set).unwrap();

    let mut model = Model::new(benchmark_model(0), schema.clone()).unwrap();
    let start = Instant::now();
    let outcome = train(&mut model, train_set, val_set, &benchmark_training(0)).unwrap();
    let elapsed = start.elapsed();
    let after = evaluate(&mut model, val_set).unwrap();
    let rho = after.mean_spearman().unwrap();
    let pass = outcome.aborted.is_none()
        && elapsed <= TRAIN_BUDGET
        && after.mad <= MAD_RATIO * before.mad
        && rho >= MIN_SPEARMAN;
    v.record(
        7,
        pass,
        "synthetic end-to-end",
        format!(
            "512/128 samples, C=16, 60 epochs, batch 16: trained in {:.0} s (limit {} s), val MAD {:.3} vs untrained \
             {:.3} (ratio {:.3}, limit {:.2}), mean per-ROI Spearman {:.3} (min {})",
            elapsed.as_secs_f64(),
            TRAIN_BUDGET.as_secs(),
            after.mad,
            before.mad,
            after.mad / before.mad,
            MAD_RATIO,
            rho,
            MIN_SPEARMAN
        ),
    );

    let deviations = [before.max_sum_deviation(), after.max_sum_deviation()];
    v.record(
        6,
        deviations.iter().all(|d| d.to_bits() == 0),
        "age equals sum of weighted scores",
        format!(
            "max |age - sum| over {} untrained and {} trained predictions: {:e}, {:e}",
            before.count, after.count, deviations[0], deviations[1]
        ),
    );
}

fn ablation_ordering(v: &mut Verdicts, schema: &RoiSchema, train_set: &[Sample], val_set: &[Sample]) {
    let seeds = [0, 1, 2];
    let rows = run_ablation(schema, train_set, val_set, &benchmark_model(0), &benchmark_training(0), &seeds).unwrap();
    for row in &rows {
        println!(
            "       {:<24} mean MAD {:.3}  per seed {:?}",
            row.label,
            row.mean_mad(),
            row.mads.iter().map(|m| (m * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        );
    }
    let mad_of = |a: Ablation| rows.iter().find(|r| r.ablation == a).unwrap().mean_mad();
    let full = mad_of(Ablation::FULL);
    let lowest = rows.iter().all(|r| r.ablation == Ablation::FULL || r.mean_mad() > full);
    let plain = |grouping| Ablation {
        grouping,
        use_pa: false,
        use_ca: false,
    };
    let (ag, rg) = (mad_of(plain(GroupingMode::Anatomy)), mad_of(plain(GroupingMode::Random)));
    v.record(
        8,
        lowest && ag < rg,
        "ablation ordering",
        format!(
            "3 seeds: full {:.3} lowest of six: {}; AG-Conv {:.3} < RG-Conv {:.3}: {}",
            full,
            lowest,
            ag,
            rg,
            ag < rg
        ),
    );
}

fn determinism(v: &mut Verdicts, schema: &RoiSchema) {
    let data = synth_generate(
        schema,
        &SynthConfig {
            count: 40,
            image_size: 64,
            seed: 5,
            ..SynthConfig::default()
        },
    )
    .unwrap();
    let (train_set, val_set) = split_train_val(&data, 0.2, 5);
    let dir = tempfile::tempdir().unwrap();
    let base = TrainConfig::default();
    let tcfg = TrainConfig {
        epochs: 3,
        batch_size: 8,
        milestones: base.rescaled_milestones(3),
        augment: true,
        seed: 5,
        ..base
    };
    let mut bytes = Vec::new();
    let mut mads = Vec::new();
    for k in 0..2 {
        let config = ModelConfig {
            backbone: BackboneConfig::small(8),
            seed: 5,
            ..ModelConfig::default()
        };
        let mut model = Model::new(config, schema.clone()).unwrap();
        train(&mut model, &train_set, &val_set, &tcfg).unwrap();
        let path = dir.path().join(format!("run{}", k));
        save_checkpoint(&path, &model, Some(&tcfg)).unwrap();
        bytes.push(std::fs::read(&path).unwrap());
        mads.push(evaluate(&mut model, &val_set).unwrap().mad);
    }
    let (mut restored, _) = load_checkpoint(&dir.path().join("run0"), Some(schema)).unwrap();
    let reloaded = evaluate(&mut restored, &val_set).unwrap().mad;
    let same_bytes = bytes[0] == bytes[1];
    let same_mad = mads[0].to_bits() == reloaded.to_bits();
    v.record(
        9,
        same_bytes && same_mad,
        "determinism",
        format!(
            "two seeded runs give identical checkpoints ({} bytes): {}; MAD {:.6} before and {:.6} after reload, \
             bit-identical: {}",
            bytes[0].len(),
            same_bytes,
            mads[0],
            reloaded,
            same_mad
        ),
    );
}

fn head_sharing(v: &mut Verdicts) {
    let counts = support::head_counts_17_and_34();
    let pass = counts.iter().all(|(_, a, b)| a == b);
    let detail = counts
        .iter()
        .map(|(w, a, b)| format!("width {}: {} vs {}", w, a, b))
        .collect::<Vec<_>>()
        .join(", ");
    v.record(10, pass, "head size independent of ROI count (17 vs 34)", detail);
}

fn main() -> ExitCode {
    // a plain binary, so the verdict lines show without --nocapture;
    // `cargo test -- --skip acceptance` still skips it
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.windows(2).any(|w| w[0] == "--skip" && "acceptance".contains(w[1].as_str())) {
        println!("acceptance suite skipped");
        return ExitCode::SUCCESS;
    }
    let mut v = Verdicts(Vec::new());
    let schema = RoiSchema::default_hand();
    gradient_suite(&mut v);
    graph_checks(&mut v);
    let (train_set, val_set) = benchmark(&schema);
    end_to_end(&mut v, &schema, &train_set, &val_set);
    ablation_ordering(&mut v, &schema, &train_set, &val_set);
    determinism(&mut v, &schema);
    head_sharing(&mut v);

    v.0.sort();
    let failed: Vec<u8> = v.0.iter().filter(|(_, pass)| !pass).map(|(id, _)| *id).collect();
    println!("{} of {} criteria pass", v.0.len() - failed.len(), v.0.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed criteria: {:?}", failed);
        ExitCode::FAILURE
    }
}
