//! RGB float images and the pixel-level transforms used by the augmentation pipeline.

use std::path::Path;

use image::imageops::FilterType;
use image::{ImageBuffer, Rgb};

use crate::error::{Result, SimError};

/// Height x width x 3, row-major, channel-last.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), height * width * 3, "image buffer size");
        Image { height, width, data }
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Image { height, width, data }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Self {
        Image::new(height, width, bytes.iter().map(|&b| f32::from(b) / 255.0).collect())
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    /// Decodes a binary (P6) or ASCII PPM file.
    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| SimError::io(path, e))?;
        let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Pnm)
            .map_err(|e| SimError::Image {
                path: path.to_path_buf(),
                msg: e.to_string(),
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Ok(Image::from_rgb8(h as usize, w as usize, img.as_raw()))
    }

    /// Writes an 8-bit binary P6 file.
    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.to_rgb8());
        std::fs::write(path, out).map_err(|e| SimError::io(path, e))
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(y, x, self.pixel(y, self.width - 1 - x));
            }
        }
        out
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Self {
        assert!(top + height <= self.height && left + width <= self.width, "crop out of bounds");
        let mut data = Vec::with_capacity(height * width * 3);
        for y in top..top + height {
            let row = (y * self.width + left) * 3;
            data.extend_from_slice(&self.data[row..row + width * 3]);
        }
        Image::new(height, width, data)
    }

    /// Bilinear (triangle filter) resampling; the filter widens when downscaling.
    pub fn resize(&self, height: usize, width: usize) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let buf: ImageBuffer<Rgb<f32>, Vec<f32>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, self.data.clone())
                .expect("buffer matches dimensions");
        let out = image::imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle);
        Image::new(height, width, out.into_raw())
    }

    pub fn max_abs_diff(&self, other: &Image) -> f32 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max)
    }

    pub fn clamp_unit(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    /// ITU-R 601 luma of every pixel.
    pub fn luma(&self) -> Vec<f32> {
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    pub fn grayscale(&self) -> Self {
        let data = self.luma().into_iter().flat_map(|l| [l, l, l]).collect();
        Image::new(self.height, self.width, data)
    }

    /// Blend toward `other`: `factor * self + (1 - factor) * other`.
    fn blend(&mut self, other: &[f32], factor: f32) {
        for (v, &o) in self.data.iter_mut().zip(other) {
            *v = (factor * *v + (1.0 - factor) * o).clamp(0.0, 1.0);
        }
    }

    pub fn adjust_brightness(&mut self, factor: f32) {
        self.data.iter_mut().for_each(|v| *v = (*v * factor).clamp(0.0, 1.0));
    }

    pub fn adjust_contrast(&mut self, factor: f32) {
        let luma = self.luma();
        let mean = luma.iter().sum::<f32>() / luma.len() as f32;
        let target = vec![mean; self.data.len()];
        self.blend(&target, factor);
    }

    pub fn adjust_saturation(&mut self, factor: f32) {
        let gray = self.grayscale();
        self.blend(&gray.data, factor);
    }

    /// Rotates hue by `shift` turns (in `[-0.5, 0.5]`).
    pub fn adjust_hue(&mut self, shift: f32) {
        for px in self.data.chunks_exact_mut(3) {
            let (h, s, v) = rgb_to_hsv(px[0], px[1], px[2]);
            let h = (h + shift).rem_euclid(1.0);
            let (r, g, b) = hsv_to_rgb(h, s, v);
            px[0] = r;
            px[1] = g;
            px[2] = b;
        }
    }

    /// Separable Gaussian blur with reflected borders.
    pub fn gaussian_blur(&mut self, kernel_size: usize, sigma: f32) {
        let half = (kernel_size / 2) as isize;
        let mut kernel: Vec<f32> = (-half..=half)
            .map(|i| (-(i as f32).powi(2) / (2.0 * sigma * sigma)).exp())
            .collect();
        let total: f32 = kernel.iter().sum();
        kernel.iter_mut().for_each(|k| *k /= total);
        let (h, w) = (self.height as isize, self.width as isize);
        let reflect = |i: isize, n: isize| -> usize {
            let mut i = i;
            if n == 1 {
                return 0;
            }
            while i < 0 || i >= n {
                i = if i < 0 { -i } else { 2 * (n - 1) - i };
            }
            i as usize
        };
        let mut tmp = vec![0.0f32; self.data.len()];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for (t, k) in kernel.iter().enumerate() {
                        let xx = reflect(x + t as isize - half, w);
                        acc += k * self.data[((y as usize) * self.width + xx) * 3 + c];
                    }
                    tmp[((y as usize) * self.width + x as usize) * 3 + c] = acc;
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for (t, k) in kernel.iter().enumerate() {
                        let yy = reflect(y + t as isize - half, h);
                        acc += k * tmp[(yy * self.width + x as usize) * 3 + c];
                    }
                    self.data[((y as usize) * self.width + x as usize) * 3 + c] = acc;
                }
            }
        }
    }

    /// Inverts every value at or above `threshold`.
    pub fn solarize(&mut self, threshold: f32) {
        self.data.iter_mut().for_each(|v| {
            if *v >= threshold {
                *v = 1.0 - *v;
            }
        });
    }

    pub fn normalize(&mut self, norm: &Normalization) {
        for px in self.data.chunks_exact_mut(3) {
            for c in 0..3 {
                px[c] = (px[c] - norm.mean[c]) / norm.std[c];
            }
        }
    }
}

/// Per-channel normalisation constants.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: [0.5; 3],
            std: [0.25; 3],
        }
    }
}

impl Normalization {
    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a Image>) -> Self {
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let mut n = 0usize;
        for img in images {
            for px in img.data.chunks_exact(3) {
                for c in 0..3 {
                    sum[c] += f64::from(px[c]);
                    sq[c] += f64::from(px[c]) * f64::from(px[c]);
                }
                n += 1;
            }
        }
        if n == 0 {
            return Self::default();
        }
        let mut out = Self::default();
        for c in 0..3 {
            let m = sum[c] / n as f64;
            let var = (sq[c] / n as f64 - m * m).max(1e-8);
            out.mean[c] = m as f32;
            out.std[c] = var.sqrt() as f32;
        }
        out
    }
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match (i as i32).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solarize_inverts_bright_values() {
        let mut img = Image::new(1, 1, vec![0.8, 0.2, 0.5]);
        img.solarize(0.5);
        assert!((img.data[0] - 0.2).abs() < 1e-6);
        assert_eq!(img.data[1], 0.2);
        assert_eq!(img.data[2], 0.5);
    }

    #[test]
    fn hsv_round_trip() {
        for &(r, g, b) in &[(0.1f32, 0.5, 0.9), (0.9, 0.1, 0.3), (0.4, 0.4, 0.4), (0.0, 1.0, 0.2)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-5 && (g - g2).abs() < 1e-5 && (b - b2).abs() < 1e-5);
        }
    }

    #[test]
    fn blur_preserves_constant_images() {
        let mut img = Image::filled(6, 5, [0.3, 0.6, 0.9]);
        img.gaussian_blur(3, 1.0);
        assert!(img.data.iter().zip([0.3, 0.6, 0.9].iter().cycle()).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn resize_to_same_size_is_identity() {
        let img = Image::new(2, 2, (0..12).map(|v| v as f32 / 12.0).collect());
        assert_eq!(img.resize(2, 2), img);
        let small = img.resize(1, 1);
        assert_eq!((small.height, small.width), (1, 1));
    }

    #[test]
    fn ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        let img = Image::from_rgb8(2, 3, &[0, 10, 20, 30, 40, 50, 60, 70, 80, 90, 100, 110, 120, 130, 140, 150, 160, 170]);
        img.write_ppm(&path).unwrap();
        assert_eq!(Image::read_ppm(&path).unwrap(), img);
    }
}
