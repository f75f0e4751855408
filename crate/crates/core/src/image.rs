//! Single-channel row-major 2-D images with bilinear sampling.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

/// What a sample outside the frame reads as.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fill {
    #[default]
    Zero,
    Edge,
}

impl Image {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(rows * cols, data.len(), "image size");
        Image { rows, cols, data }
    }

    pub fn filled(rows: usize, cols: usize, v: f32) -> Self {
        Image::new(rows, cols, vec![v; rows * cols])
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    fn read(&self, r: isize, c: isize, fill: Fill) -> f32 {
        if r >= 0 && c >= 0 && (r as usize) < self.rows && (c as usize) < self.cols {
            return self.data[r as usize * self.cols + c as usize];
        }
        match fill {
            Fill::Zero => 0.0,
            Fill::Edge => {
                let r = r.clamp(0, self.rows as isize - 1) as usize;
                let c = c.clamp(0, self.cols as isize - 1) as usize;
                self.data[r * self.cols + c]
            }
        }
    }

    /// Bilinear sample at fractional (row, col) pixel coordinates.
    pub fn bilinear(&self, r: f64, c: f64, fill: Fill) -> f32 {
        let r0 = r.floor();
        let c0 = c.floor();
        let fr = (r - r0) as f32;
        let fc = (c - c0) as f32;
        let (r0, c0) = (r0 as isize, c0 as isize);
        let v00 = self.read(r0, c0, fill);
        let v01 = self.read(r0, c0 + 1, fill);
        let v10 = self.read(r0 + 1, c0, fill);
        let v11 = self.read(r0 + 1, c0 + 1, fill);
        let top = v00 + (v01 - v00) * fc;
        let bottom = v10 + (v11 - v10) * fc;
        top + (bottom - top) * fr
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for (dst, src) in out.data.chunks_mut(self.cols).zip(self.data.chunks(self.cols)) {
            for (d, s) in dst.iter_mut().zip(src.iter().rev()) {
                *d = *s;
            }
        }
        out
    }
}

/// 1-D Gaussian kernel truncated at 3σ, normalized to sum 1.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur of a row-major field with clamp-to-edge borders.
pub fn gaussian_smooth(field: &[f64], rows: usize, cols: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; field.len()];
    for y in 0..rows {
        for x in 0..cols {
            let mut acc = 0.0;
            for (t, w) in k.iter().enumerate() {
                let sx = (x as isize + t as isize - r).clamp(0, cols as isize - 1) as usize;
                acc += w * field[y * cols + sx];
            }
            tmp[y * cols + x] = acc;
        }
    }
    let mut out = vec![0.0; field.len()];
    for y in 0..rows {
        for x in 0..cols {
            let mut acc = 0.0;
            for (t, w) in k.iter().enumerate() {
                let sy = (y as isize + t as isize - r).clamp(0, rows as isize - 1) as usize;
                acc += w * tmp[sy * cols + x];
            }
            out[y * cols + x] = acc;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_interpolates_and_fills() {
        let img = Image::new(2, 2, vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(img.bilinear(0.5, 0.5, Fill::Zero), 1.5);
        assert_eq!(img.bilinear(1.0, 1.0, Fill::Zero), 3.0);
        assert_eq!(img.bilinear(5.0, 5.0, Fill::Zero), 0.0);
        assert_eq!(img.bilinear(5.0, 5.0, Fill::Edge), 3.0);
    }

    #[test]
    fn kernel_sums_to_one() {
        let k = gaussian_kernel(10.0);
        assert_eq!(k.len(), 61);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn flip_reverses_rows() {
        let img = Image::new(1, 3, vec![1.0, 2.0, 3.0]);
        assert_eq!(img.flip_horizontal().data, vec![3.0, 2.0, 1.0]);
    }
}
