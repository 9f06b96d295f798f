//! CSV, JSON and SVG outputs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use boneage_core::data::Sample;
use boneage_core::pipeline::{AblationRow, EvalReport, LogRow, PredictionRecord};
use serde::Serialize;

use crate::error::{Error, Result};

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

/// `epoch,lr,train_loss,val_mad`; `val_mad` is empty without validation data.
pub fn write_log_csv(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["epoch", "lr", "train_loss", "val_mad"])
        .map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            format!("{:e}", r.lr),
            format!("{:.6}", r.train_loss),
            r.val_mad.map(|v| format!("{:.6}", v)).unwrap_or_default(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Serialize)]
struct ReportSummary<'a> {
    count: usize,
    mad_months: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean_spearman: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    per_roi: Option<&'a [boneage_core::pipeline::RoiCorrelation]>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn write_eval_report(path: &Path, report: &EvalReport) -> Result<()> {
    write_json(
        path,
        &ReportSummary {
            count: report.count,
            mad_months: report.mad,
            mean_spearman: report.mean_spearman(),
            per_roi: report.per_roi.as_deref(),
        },
    )
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("record serializes"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Long table `id,roi,predicted,truth` of weighted scores against ground truth.
pub fn write_roi_scores_csv(path: &Path, roi_names: &[String], samples: &[Sample], report: &EvalReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["id", "roi", "predicted", "truth"])
        .map_err(|e| csv_err(path, e))?;
    for (s, r) in samples.iter().zip(&report.records) {
        let Some(truth) = &s.scores else { continue };
        for (n, name) in roi_names.iter().enumerate() {
            w.write_record([
                s.id.clone(),
                name.clone(),
                format!("{:.6}", r.weighted_scores[n]),
                format!("{:.6}", truth[n]),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let seeds = rows.first().map_or(0, |r| r.seeds.len());
    let mut header = vec!["experiment".to_string(), "label".into(), "flags".into()];
    for k in 0..seeds {
        header.push(format!("mad_seed{}", rows[0].seeds[k]));
    }
    header.push("mean_mad".into());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (k, r) in rows.iter().enumerate() {
        let mut rec = vec![(k + 1).to_string(), r.label.clone(), r.ablation.flags()];
        rec.extend(r.mads.iter().map(|m| format!("{:.6}", m)));
        rec.push(format!("{:.6}", r.mean_mad()));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One panel per ROI: samples ordered by true score, with true and predicted
/// scores each min-max normalized and drawn as overlaid lines.
pub fn roi_scores_svg(roi_names: &[String], samples: &[Sample], report: &EvalReport) -> String {
    const COLS: usize = 5;
    const PW: f64 = 200.0;
    const PH: f64 = 130.0;
    let rows = roi_names.len().div_ceil(COLS);
    let (width, height) = (COLS as f64 * PW, rows as f64 * PH + 30.0);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r##"<text x="10" y="18"><tspan fill="#1f77b4">truth</tspan> / <tspan fill="#d62728">predicted</tspan> ROI scores, normalized per panel</text>"##
    );
    let pairs: Vec<(&Sample, &PredictionRecord)> = samples
        .iter()
        .zip(&report.records)
        .filter(|(s, _)| s.scores.is_some())
        .collect();
    for (n, name) in roi_names.iter().enumerate() {
        let (x0, y0) = ((n % COLS) as f64 * PW, (n / COLS) as f64 * PH + 30.0);
        let mut pts: Vec<(f64, f64)> = pairs
            .iter()
            .map(|(s, r)| (s.scores.as_ref().expect("filtered")[n], r.weighted_scores[n]))
            .collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let rho = report
            .per_roi
            .as_ref()
            .and_then(|rows| rows.get(n))
            .map(|r| format!(" (rho {:.2})", r.spearman))
            .unwrap_or_default();
        let _ = writeln!(
            svg,
            r##"<g transform="translate({x0},{y0})"><rect x="8" y="16" width="{}" height="{}" fill="none" stroke="#999"/><text x="10" y="12">{name}{rho}</text>"##,
            PW - 16.0,
            PH - 28.0
        );
        for (series, color) in [(0usize, "#1f77b4"), (1, "#d62728")] {
            let vals: Vec<f64> = pts.iter().map(|p| if series == 0 { p.0 } else { p.1 }).collect();
            let _ = writeln!(
                svg,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1" points="{}"/>"#,
                polyline(&vals, PW - 16.0, PH - 28.0)
            );
        }
        svg.push_str("</g>\n");
    }
    svg.push_str("</svg>\n");
    svg
}

fn polyline(vals: &[f64], w: f64, h: f64) -> String {
    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let step = if vals.len() > 1 { w / (vals.len() - 1) as f64 } else { 0.0 };
    vals.iter()
        .enumerate()
        .map(|(k, v)| format!("{:.1},{:.1}", 8.0 + k as f64 * step, 16.0 + h * (1.0 - (v - lo) / span)))
        .collect::<Vec<_>>()
        .join(" ")
}
