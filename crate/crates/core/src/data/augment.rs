//! Training-time augmentation: horizontal flip, small rotation, Gaussian blur.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::sample::{GrayImage, Sample, SampleInput};
use crate::error::{Error, Result};
use crate::init::rng;
use crate::pillars::RoiCenter;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip_probability: f64,
    pub max_rotation_deg: f64,
    pub blur_probability: f64,
    pub blur_sigma: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_probability: 0.5,
            max_rotation_deg: 5.0,
            blur_probability: 0.5,
            blur_sigma: (0.5, 1.5),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Augmented {
    pub sample: Sample,
    /// Set when a rotated center left the frame and was clamped back.
    pub clamped: bool,
}

/// Mirrors columns; centers map `J -> W - 1 - J`.
pub fn flip_horizontal(img: &GrayImage, centers: &[RoiCenter]) -> (GrayImage, Vec<RoiCenter>) {
    let mut out = img.clone();
    for r in 0..img.height {
        let row = &mut out.pixels[r * img.width..(r + 1) * img.width];
        row.reverse();
    }
    let centers = centers
        .iter()
        .map(|c| RoiCenter::new(c.row, img.width - 1 - c.col))
        .collect();
    (out, centers)
}

/// Rotates counter-clockwise by `degrees` about the image center, with
/// bilinear sampling and edge replication. Returns whether any center had to
/// be clamped into the frame.
pub fn rotate(img: &GrayImage, centers: &[RoiCenter], degrees: f64) -> (GrayImage, Vec<RoiCenter>, bool) {
    let theta = degrees.to_radians();
    let (s, c) = (libm::sin(theta), libm::cos(theta));
    let cy = (img.height as f64 - 1.0) / 2.0;
    let cx = (img.width as f64 - 1.0) / 2.0;
    let mut pixels = vec![0.0; img.pixels.len()];
    for y in 0..img.height {
        for x in 0..img.width {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            // inverse rotation of the destination pixel
            let sy = c * dy + s * dx + cy;
            let sx = -s * dy + c * dx + cx;
            pixels[y * img.width + x] = bilinear(img, sy, sx);
        }
    }
    let mut clamped = false;
    let moved = centers
        .iter()
        .map(|p| {
            let (dy, dx) = (p.row as f64 - cy, p.col as f64 - cx);
            let ry = libm::round(c * dy - s * dx + cy);
            let rx = libm::round(s * dy + c * dx + cx);
            let fy = ry.clamp(0.0, img.height as f64 - 1.0);
            let fx = rx.clamp(0.0, img.width as f64 - 1.0);
            clamped |= fy != ry || fx != rx;
            RoiCenter::new(fy as usize, fx as usize)
        })
        .collect();
    let out = GrayImage {
        height: img.height,
        width: img.width,
        pixels,
    };
    (out, moved, clamped)
}

fn bilinear(img: &GrayImage, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, img.height as f64 - 1.0);
    let x = x.clamp(0.0, img.width as f64 - 1.0);
    let (y0, x0) = (libm::floor(y) as usize, libm::floor(x) as usize);
    let (y1, x1) = ((y0 + 1).min(img.height - 1), (x0 + 1).min(img.width - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = img.get(y0, x0) * (1.0 - fx) + img.get(y0, x1) * fx;
    let bottom = img.get(y1, x0) * (1.0 - fx) + img.get(y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Separable Gaussian blur with a `ceil(3 sigma)` radius and reflected borders.
pub fn gaussian_blur(img: &GrayImage, sigma: f64) -> GrayImage {
    let radius = libm::ceil(3.0 * sigma) as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|k| libm::exp(-((k * k) as f64) / (2.0 * sigma * sigma)))
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        while i < 0 || i >= n {
            i = if i < 0 { -i - 1 } else { 2 * n - i - 1 };
        }
        i as usize
    };
    let (h, w) = (img.height, img.width);
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * img.pixels[y * w + reflect(x as isize + k as isize - radius, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[reflect(y as isize + k as isize - radius, h) * w + x])
                .sum();
        }
    }
    GrayImage {
        height: h,
        width: w,
        pixels: out,
    }
}

/// Draws one random augmentation from `seed`. Gender, age and scores are
/// carried over unchanged.
pub fn augment_sample(sample: &Sample, seed: u64, cfg: &AugmentConfig) -> Result<Augmented> {
    let SampleInput::Image(img) = &sample.input else {
        return Err(Error::Sample {
            id: sample.id.clone(),
            reason: "augmentation needs an image-backed sample".into(),
        });
    };
    let mut r = rng(seed);
    let mut img = img.clone();
    let mut centers = sample.centers.clone();
    if r.random::<f64>() < cfg.flip_probability {
        (img, centers) = flip_horizontal(&img, &centers);
    }
    let angle = if cfg.max_rotation_deg > 0.0 {
        r.random_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg)
    } else {
        0.0
    };
    let (rotated, moved, clamped) = rotate(&img, &centers, angle);
    if r.random::<f64>() < cfg.blur_probability {
        let sigma = r.random_range(cfg.blur_sigma.0..=cfg.blur_sigma.1);
        img = gaussian_blur(&rotated, sigma);
    } else {
        img = rotated;
    }
    Ok(Augmented {
        sample: Sample {
            input: SampleInput::Image(img),
            centers: moved,
            ..sample.clone()
        },
        clamped,
    })
}
