//! ROI feature pillars: the channel vector under each projected ROI center,
//! extended with the gender bit and the normalized center position.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Number of columns appended to each pillar (gender, row, column).
pub const EXTRA_FEATURES: usize = 3;

/// An ROI center in original-image pixels: `row` is `I`, `col` is `J`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RoiCenter {
    pub row: usize,
    pub col: usize,
}

impl RoiCenter {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

/// Binary gender as fed to the network: `Male` is 1, `Female` is 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Gender {
    Female,
    Male,
}

impl Gender {
    pub fn from_bit(bit: u8) -> Option<Self> {
        match bit {
            0 => Some(Gender::Female),
            1 => Some(Gender::Male),
            _ => None,
        }
    }

    pub fn bit(self) -> u8 {
        match self {
            Gender::Female => 0,
            Gender::Male => 1,
        }
    }

    pub fn index(self) -> usize {
        self.bit() as usize
    }
}

/// Feature-map cell `(floor(I/s), floor(J/s))` of a center, bounds-checked
/// against a `map_height x map_width` map.
pub fn project_position(center: RoiCenter, stride: usize, map: (usize, usize)) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(Error::InvalidConfig("down-sampling factor must be positive".into()));
    }
    let (i, j) = (center.row / stride, center.col / stride);
    if i >= map.0 || j >= map.1 {
        return Err(Error::ProjectionOutOfBounds {
            row: center.row,
            col: center.col,
            i,
            j,
            map_height: map.0,
            map_width: map.1,
        });
    }
    Ok((i, j))
}

/// Rows of the result are the pillars of `centers`, in order (`N x C`).
pub fn extract_pillars(map: &FeatureMap, centers: &[RoiCenter]) -> Result<Tensor> {
    let (c, h, w) = (map.channels(), map.spatial().0, map.spatial().1);
    let stride = map.image_size.0 / h;
    let mut data = Vec::with_capacity(centers.len() * c);
    for &center in centers {
        check_center(center, map.image_size)?;
        let (i, j) = project_position(center, stride, (h, w))?;
        for ch in 0..c {
            data.push(map.tensor.data()[(ch * h + i) * w + j]);
        }
    }
    Tensor::new(vec![centers.len(), c], data)
}

fn check_center(center: RoiCenter, image_size: (usize, usize)) -> Result<()> {
    if center.row >= image_size.0 || center.col >= image_size.1 {
        return Err(Error::InvalidConfig(format!(
            "ROI center ({}, {}) lies outside the {}x{} image",
            center.row, center.col, image_size.0, image_size.1
        )));
    }
    Ok(())
}

/// The appended `[gender, I/H, J/W]` triple for each center.
pub fn position_features(gender: Gender, centers: &[RoiCenter], image_size: (usize, usize)) -> Vec<[f64; 3]> {
    let (h, w) = (image_size.0 as f64, image_size.1 as f64);
    centers
        .iter()
        .map(|c| [gender.bit() as f64, c.row as f64 / h, c.col as f64 / w])
        .collect()
}

/// The node-feature matrix `X` of one radiograph: `N x (C + 3)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PillarMatrix {
    pub x: Tensor,
    pub channels: usize,
}

impl PillarMatrix {
    pub fn width(&self) -> usize {
        self.channels + EXTRA_FEATURES
    }

    pub fn rois(&self) -> usize {
        self.x.shape()[0]
    }
}

pub fn augment_pillars(
    raw: &Tensor,
    gender: Gender,
    centers: &[RoiCenter],
    image_size: (usize, usize),
) -> Result<PillarMatrix> {
    let (n, c) = raw.dims2("augment_pillars")?;
    if n != centers.len() {
        return Err(Error::shape(
            "augment_pillars",
            format!("{} pillars for {} centers", n, centers.len()),
        ));
    }
    let extra = position_features(gender, centers, image_size);
    let mut data = Vec::with_capacity(n * (c + EXTRA_FEATURES));
    for (row, e) in extra.iter().enumerate() {
        data.extend_from_slice(raw.row(row));
        data.extend_from_slice(e);
    }
    Ok(PillarMatrix {
        x: Tensor::new(vec![n, c + EXTRA_FEATURES], data)?,
        channels: c,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_floors() {
        assert_eq!(project_position(RoiCenter::new(259, 133), 16, (32, 32)).unwrap(), (16, 8));
        assert_eq!(project_position(RoiCenter::new(0, 0), 7, (1, 1)).unwrap(), (0, 0));
        assert_eq!(project_position(RoiCenter::new(511, 511), 16, (32, 32)).unwrap(), (31, 31));
    }

    #[test]
    fn projection_outside_map_is_an_error() {
        let err = project_position(RoiCenter::new(512, 3), 16, (32, 32)).unwrap_err();
        assert!(matches!(err, Error::ProjectionOutOfBounds { i: 32, .. }));
    }

    #[test]
    fn constant_map_gives_constant_pillars() {
        let fm = FeatureMap::new(Tensor::full(&[4, 2, 2], 2.5), (32, 32)).unwrap();
        let centers = [RoiCenter::new(1, 1), RoiCenter::new(31, 17)];
        let p = extract_pillars(&fm, &centers).unwrap();
        assert_eq!(p.shape(), &[2, 4]);
        assert!(p.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn indicator_map_selects_one_roi() {
        let mut t = Tensor::zeros(&[3, 2, 2]);
        for ch in 0..3 {
            t.data_mut()[(ch * 2 + 1) * 2] = 1.0; // cell (1, 0)
        }
        let fm = FeatureMap::new(t, (32, 32)).unwrap();
        let centers = [RoiCenter::new(3, 3), RoiCenter::new(20, 5), RoiCenter::new(20, 20)];
        let p = extract_pillars(&fm, &centers).unwrap();
        assert_eq!(p.row(0), &[0.0; 3]);
        assert_eq!(p.row(1), &[1.0; 3]);
        assert_eq!(p.row(2), &[0.0; 3]);
    }

    #[test]
    fn augmentation_appends_gender_and_position() {
        let raw = Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]).unwrap();
        let centers = [RoiCenter::new(256, 256), RoiCenter::new(0, 0)];
        let m = augment_pillars(&raw, Gender::Male, &centers, (512, 512)).unwrap();
        assert_eq!(m.width(), 5);
        assert_eq!(m.x.row(0), &[1., 2., 1.0, 0.5, 0.5]);
        let f = augment_pillars(&raw, Gender::Female, &centers, (512, 512)).unwrap();
        assert_eq!(f.x.row(1), &[3., 4., 0.0, 0.0, 0.0]);
    }
}
