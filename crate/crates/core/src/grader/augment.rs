//! Geometric and elastic image augmentation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::image::{gaussian_smooth, Fill, Image};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElasticParams {
    /// Per-axis raw displacement is uniform in ±amplitude pixels.
    pub amplitude: f64,
    pub sigma: f64,
    pub alpha: f64,
}

impl Default for ElasticParams {
    fn default() -> Self {
        ElasticParams {
            amplitude: 1.0,
            sigma: 10.0,
            alpha: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentParams {
    pub scale: [f64; 2],
    /// Rotation drawn uniformly from ±rotation_deg.
    pub rotation_deg: f64,
    /// Horizontal shift range as fractions of the image width.
    pub width_shift: [f64; 2],
    /// Vertical shift range as fractions of the image height.
    pub height_shift: [f64; 2],
    pub elastic: Option<ElasticParams>,
    pub fill: Fill,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams::slice_grading()
    }
}

impl AugmentParams {
    /// Ranges used when training the slice grader and building case features.
    pub fn slice_grading() -> Self {
        AugmentParams {
            scale: [0.85, 1.15],
            rotation_deg: 10.0,
            width_shift: [-0.10, 0.10],
            height_shift: [0.0, 0.01],
            elastic: None,
            fill: Fill::Zero,
        }
    }

    /// Ranges used when training the voxel classifier.
    pub fn roi_classifier() -> Self {
        AugmentParams {
            scale: [0.85, 1.15],
            rotation_deg: 2.0,
            width_shift: [-0.10, 0.10],
            height_shift: [-0.01, 0.01],
            elastic: Some(ElasticParams::default()),
            fill: Fill::Zero,
        }
    }

    pub fn identity() -> Self {
        AugmentParams {
            scale: [1.0, 1.0],
            rotation_deg: 0.0,
            width_shift: [0.0, 0.0],
            height_shift: [0.0, 0.0],
            elastic: None,
            fill: Fill::Zero,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.scale == [1.0, 1.0]
            && self.rotation_deg == 0.0
            && self.width_shift == [0.0, 0.0]
            && self.height_shift == [0.0, 0.0]
            && self.elastic.is_none_or(|e| e.alpha == 0.0)
    }

    pub fn draw(&self, rng: &mut impl Rng) -> AffineDraw {
        AffineDraw {
            scale: uniform(rng, self.scale[0], self.scale[1]),
            rotation_deg: uniform(rng, -self.rotation_deg, self.rotation_deg),
            width_shift: uniform(rng, self.width_shift[0], self.width_shift[1]),
            height_shift: uniform(rng, self.height_shift[0], self.height_shift[1]),
        }
    }
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// One concrete draw of the affine parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineDraw {
    pub scale: f64,
    pub rotation_deg: f64,
    pub width_shift: f64,
    pub height_shift: f64,
}

impl AffineDraw {
    pub fn identity() -> Self {
        AffineDraw {
            scale: 1.0,
            rotation_deg: 0.0,
            width_shift: 0.0,
            height_shift: 0.0,
        }
    }
}

/// Scale, then rotate about the image center, then translate.
pub fn apply_affine(img: &Image, d: &AffineDraw, fill: Fill) -> Image {
    if *d == AffineDraw::identity() {
        return img.clone();
    }
    let cy = (img.rows as f64 - 1.0) / 2.0;
    let cx = (img.cols as f64 - 1.0) / 2.0;
    let ty = d.height_shift * img.rows as f64;
    let tx = d.width_shift * img.cols as f64;
    let (sin, cos) = d.rotation_deg.to_radians().sin_cos();
    let mut out = Image::filled(img.rows, img.cols, 0.0);
    for r in 0..img.rows {
        for c in 0..img.cols {
            // Invert the forward map out = R·s·(in - center) + center + t.
            let y = r as f64 - cy - ty;
            let x = c as f64 - cx - tx;
            let xr = (cos * x + sin * y) / d.scale;
            let yr = (-sin * x + cos * y) / d.scale;
            out.data[r * img.cols + c] = img.bilinear(yr + cy, xr + cx, fill);
        }
    }
    out
}

pub fn augment_image(img: &Image, aug: &AugmentParams, rng: &mut impl Rng) -> Image {
    let d = aug.draw(rng);
    let out = apply_affine(img, &d, aug.fill);
    match aug.elastic {
        Some(e) => elastic_deform(&out, &e, rng),
        None => out,
    }
}

/// Smoothed random displacement field `(dx, dy)` in pixels, already scaled by α.
pub fn elastic_field(rows: usize, cols: usize, e: &ElasticParams, rng: &mut impl Rng) -> (Vec<f64>, Vec<f64>) {
    let n = rows * cols;
    let mut raw = |_: usize| -> Vec<f64> {
        (0..n)
            .map(|_| uniform(rng, -e.amplitude, e.amplitude))
            .collect()
    };
    let rx = raw(0);
    let ry = raw(1);
    let scale = |v: Vec<f64>| v.into_iter().map(|d| d * e.alpha).collect::<Vec<_>>();
    (
        scale(gaussian_smooth(&rx, rows, cols, e.sigma)),
        scale(gaussian_smooth(&ry, rows, cols, e.sigma)),
    )
}

pub fn elastic_deform(img: &Image, e: &ElasticParams, rng: &mut impl Rng) -> Image {
    if e.alpha == 0.0 {
        return img.clone();
    }
    let (dx, dy) = elastic_field(img.rows, img.cols, e, rng);
    warp(img, &dx, &dy)
}

/// Backward warp: out(r, c) = img(r + dy, c + dx), clamped at the border.
pub fn warp(img: &Image, dx: &[f64], dy: &[f64]) -> Image {
    let mut out = img.clone();
    for r in 0..img.rows {
        for c in 0..img.cols {
            let i = r * img.cols + c;
            out.data[i] = img.bilinear(r as f64 + dy[i], c as f64 + dx[i], Fill::Edge);
        }
    }
    out
}
