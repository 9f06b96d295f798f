use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::pillars::{Gender, RoiCenter};
use crate::tensor::Tensor;

/// A grayscale radiograph with intensities in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::shape(
                "image",
                format!("{} pixels for {}x{}", pixels.len(), height, width),
            ));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            pixels: alloc::vec![value; height * width],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    /// `1 x H x W` tensor, ready to be stacked into a batch.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(alloc::vec![1, self.height, self.width], self.pixels.clone()).expect("consistent size")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SampleInput {
    Image(GrayImage),
    /// Precomputed `C x H/16 x W/16` features; bypasses the backbone.
    Features(FeatureMap),
}

impl SampleInput {
    pub fn image_size(&self) -> (usize, usize) {
        match self {
            SampleInput::Image(img) => (img.height, img.width),
            SampleInput::Features(fm) => fm.image_size,
        }
    }
}

/// Inclusive admissible bone-age range in months.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgeRange {
    pub min: f64,
    pub max: f64,
}

impl Default for AgeRange {
    fn default() -> Self {
        Self { min: 0.0, max: 216.0 }
    }
}

impl AgeRange {
    pub fn contains(&self, age: f64) -> bool {
        age.is_finite() && age >= self.min && age <= self.max
    }

    pub fn clamp(&self, age: f64) -> f64 {
        age.clamp(self.min, self.max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub input: SampleInput,
    pub gender: Gender,
    /// One center per ROI, in schema order.
    pub centers: Vec<RoiCenter>,
    pub age_months: f64,
    /// Ground-truth ROI scores, when known.
    pub scores: Option<Vec<f64>>,
}

impl Sample {
    pub fn validate(&self, rois: usize, ages: AgeRange) -> Result<()> {
        let fail = |reason: String| Error::Sample {
            id: self.id.clone(),
            reason,
        };
        if self.centers.len() != rois {
            return Err(fail(format!("expected {} ROI centers, found {}", rois, self.centers.len())));
        }
        if !ages.contains(self.age_months) {
            return Err(fail(format!(
                "age {} months outside [{}, {}]",
                self.age_months, ages.min, ages.max
            )));
        }
        if let Some(s) = &self.scores {
            if s.len() != rois {
                return Err(fail(format!("expected {} scores, found {}", rois, s.len())));
            }
        }
        let (h, w) = self.input.image_size();
        if let Some(c) = self.centers.iter().find(|c| c.row >= h || c.col >= w) {
            return Err(fail(format!("center ({}, {}) outside the {}x{} image", c.row, c.col, h, w)));
        }
        Ok(())
    }
}

/// One manifest line. Exactly one of `image` and `features` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<String>,
    pub gender: u8,
    pub age_months: f64,
    pub centers: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
}

impl ManifestRecord {
    /// Checks everything that does not need the referenced file.
    pub fn validate(&self, rois: usize, ages: AgeRange) -> Result<Gender> {
        let fail = |reason: &str| Error::Sample {
            id: self.id.clone(),
            reason: reason.to_string(),
        };
        let gender = Gender::from_bit(self.gender).ok_or_else(|| fail("gender must be 0 or 1"))?;
        match (&self.image, &self.features) {
            (Some(_), None) | (None, Some(_)) => {}
            _ => return Err(fail("exactly one of `image` and `features` is required")),
        }
        if self.centers.len() != rois {
            return Err(fail(&format!(
                "expected {} ROI centers, found {}",
                rois,
                self.centers.len()
            )));
        }
        if !ages.contains(self.age_months) {
            return Err(fail(&format!(
                "age {} months outside [{}, {}]",
                self.age_months, ages.min, ages.max
            )));
        }
        if let Some(s) = &self.scores {
            if s.len() != rois {
                return Err(fail(&format!("expected {} scores, found {}", rois, s.len())));
            }
        }
        Ok(gender)
    }

    pub fn roi_centers(&self) -> Vec<RoiCenter> {
        self.centers.iter().map(|&[i, j]| RoiCenter::new(i, j)).collect()
    }

    pub fn into_sample(self, input: SampleInput, rois: usize, ages: AgeRange) -> Result<Sample> {
        let gender = self.validate(rois, ages)?;
        let sample = Sample {
            centers: self.roi_centers(),
            id: self.id,
            input,
            gender,
            age_months: self.age_months,
            scores: self.scores,
        };
        sample.validate(rois, ages)?;
        Ok(sample)
    }
}
