//! JSON-lines manifests, grayscale PNG images and precomputed feature maps.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use boneage_core::backbone::FeatureMap;
use boneage_core::data::{AgeRange, GrayImage, ManifestRecord, Sample, SampleInput};
use boneage_core::DOWNSAMPLE;
use image::{DynamicImage, ImageBuffer, Luma};

use crate::archive::{read_archive, write_archive};
use crate::error::{Error, Result};

pub const FEATURES_KIND: &str = "features";

/// Reads and validates every record, in file order. Relative image and
/// feature paths resolve against the manifest's directory.
pub fn load_manifest(path: &Path, rois: usize, ages: AgeRange) -> Result<Vec<Sample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| Error::format(path, format!("line {}: {}", line_no + 1, e)))?;
        let id = value
            .get("id")
            .and_then(|v| v.as_str())
            .map(str::to_string)
            .unwrap_or_else(|| format!("line {}", line_no + 1));
        let record_err = |reason: String| Error::Record {
            path: path.to_path_buf(),
            record: id.clone(),
            reason,
        };
        let record: ManifestRecord = serde_json::from_value(value).map_err(|e| record_err(e.to_string()))?;
        if !seen.insert(record.id.clone()) {
            return Err(record_err("duplicate id".into()));
        }
        record.validate(rois, ages).map_err(|e| record_err(e.to_string()))?;
        let input = match (&record.image, &record.features) {
            (Some(img), _) => SampleInput::Image(load_image(&base.join(img))?),
            (_, Some(feat)) => SampleInput::Features(load_features(&base.join(feat))?),
            _ => unreachable!("validated"),
        };
        let sample = record
            .into_sample(input, rois, ages)
            .map_err(|e| record_err(e.to_string()))?;
        out.push(sample);
    }
    Ok(out)
}

/// 8- or 16-bit grayscale PNG, scaled to `[0, 1]`.
pub fn load_image(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels: Vec<f64> = match img {
        DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(),
        other => {
            return Err(Error::format(
                path,
                format!("expected a grayscale image, found {:?}", other.color()),
            ))
        }
    };
    Ok(GrayImage::new(h, w, pixels)?)
}

/// Writes an 8-bit grayscale PNG; intensities are clamped and rounded.
pub fn save_image(path: &Path, img: &GrayImage) -> Result<()> {
    let raw: Vec<u8> = img
        .pixels
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(img.width as u32, img.height as u32, raw).expect("sized buffer");
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

/// A feature archive holds exactly one `C x h x w` tensor; the image it came
/// from is taken to be `16h x 16w`.
pub fn load_features(path: &Path) -> Result<FeatureMap> {
    let (header, tensors) = read_archive(path)?;
    if header.kind != FEATURES_KIND || tensors.len() != 1 {
        return Err(Error::format(path, "expected a feature archive with one tensor"));
    }
    let t = tensors.into_values().next().expect("one tensor");
    let (_, h, w) = match t.shape() {
        &[c, h, w] => (c, h, w),
        other => return Err(Error::format(path, format!("feature tensor has shape {:?}", other))),
    };
    Ok(FeatureMap::new(t, (h * DOWNSAMPLE, w * DOWNSAMPLE))?)
}

pub fn save_features(path: &Path, map: &FeatureMap) -> Result<()> {
    let mut t = BTreeMap::new();
    t.insert("features".to_string(), map.tensor.clone());
    write_archive(path, FEATURES_KIND, serde_json::Value::Null, None, &t)
}

/// Writes images (or feature maps) and `manifest.jsonl` into `dir`. Scores
/// are only written into the manifest when `include_scores` is set.
pub fn write_dataset(dir: &Path, samples: &[Sample], include_scores: bool) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut lines = String::new();
    for s in samples {
        let (image, features) = match &s.input {
            SampleInput::Image(img) => {
                let name = format!("{}.png", s.id);
                save_image(&dir.join(&name), img)?;
                (Some(name), None)
            }
            SampleInput::Features(fm) => {
                let name = format!("{}.features", s.id);
                save_features(&dir.join(&name), fm)?;
                (None, Some(name))
            }
        };
        let record = ManifestRecord {
            id: s.id.clone(),
            image,
            features,
            gender: s.gender.bit(),
            age_months: s.age_months,
            centers: s.centers.iter().map(|c| [c.row, c.col]).collect(),
            scores: if include_scores { s.scores.clone() } else { None },
        };
        lines.push_str(&serde_json::to_string(&record).expect("record serializes"));
        lines.push('\n');
    }
    let path = dir.join("manifest.jsonl");
    fs::write(&path, lines).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// `id,<roi names...>` table of ground-truth scores.
pub fn write_scores_csv(path: &Path, roi_names: &[String], samples: &[Sample]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let mut header = vec!["id".to_string()];
    header.extend(roi_names.iter().cloned());
    w.write_record(&header).map_err(|e| Error::format(path, e.to_string()))?;
    for s in samples {
        if let Some(scores) = &s.scores {
            let mut row = vec![s.id.clone()];
            row.extend(scores.iter().map(|v| format!("{:?}", v)));
            w.write_record(&row).map_err(|e| Error::format(path, e.to_string()))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Attaches scores from a table written by [`write_scores_csv`]. Columns are
/// matched to ROIs by name; every sample must have a row.
pub fn attach_scores(path: &Path, roi_names: &[String], samples: &mut [Sample]) -> Result<()> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let header = r.headers().map_err(|e| Error::format(path, e.to_string()))?.clone();
    let columns: Vec<usize> = roi_names
        .iter()
        .map(|n| {
            header
                .iter()
                .position(|h| h == n)
                .ok_or_else(|| Error::format(path, format!("no column for ROI `{}`", n)))
        })
        .collect::<Result<_>>()?;
    let mut table = BTreeMap::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        let id = rec.get(0).unwrap_or_default().to_string();
        let values = columns
            .iter()
            .map(|&c| {
                rec.get(c)
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| Error::format(path, format!("bad score for `{}`", id)))
            })
            .collect::<Result<Vec<f64>>>()?;
        table.insert(id, values);
    }
    for s in samples {
        let scores = table.remove(&s.id).ok_or_else(|| Error::Record {
            path: path.to_path_buf(),
            record: s.id.clone(),
            reason: "no scores".into(),
        })?;
        s.scores = Some(scores);
    }
    Ok(())
}
