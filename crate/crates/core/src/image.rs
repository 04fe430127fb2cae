//! Planar RGB images with `f64` samples in `[0, 1]`.

use std::path::Path;

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// Three-channel image stored channel-major: `data[(c * height + y) * width + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; CHANNELS * height * width],
        }
    }

    pub fn from_planar(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != CHANNELS * height * width {
            return Err(Error::shape(format!(
                "planar buffer of {} samples for a {height}x{width}x{CHANNELS} image",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Builds from an interleaved row-major `(y, x, c)` buffer.
    pub fn from_interleaved(height: usize, width: usize, data: &[f64]) -> Result<Self> {
        if data.len() != CHANNELS * height * width {
            return Err(Error::shape(format!(
                "interleaved buffer of {} samples for a {height}x{width}x{CHANNELS} image",
                data.len()
            )));
        }
        let mut img = Self::zeros(height, width);
        for y in 0..height {
            for x in 0..width {
                for c in 0..CHANNELS {
                    img.set(c, y, x, data[(y * width + x) * CHANNELS + c]);
                }
            }
        }
        Ok(img)
    }

    pub fn to_interleaved(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..CHANNELS {
                    out.push(self.get(c, y, x));
                }
            }
        }
        out
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f64) {
        let i = self.index(c, y, x);
        self.data[i] = value;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn row(&self, c: usize, y: usize) -> &[f64] {
        let start = self.index(c, y, 0);
        &self.data[start..start + self.width]
    }

    /// Mean over all samples of all channels.
    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.dims() == other.dims()
    }

    /// Quantizes to 8 bits per channel with `round(v * 255)`.
    pub fn quantize(&self) -> Vec<u8> {
        self.to_interleaved()
            .into_iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        let samples: Vec<f64> = bytes.iter().map(|&b| b as f64 / 255.0).collect();
        Self::from_interleaved(height, width, &samples)
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let rgb = ::image::open(path.as_ref())?.to_rgb8();
        let (w, h) = rgb.dimensions();
        Self::from_rgb8(h as usize, w as usize, rgb.as_raw())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let buf = ::image::RgbImage::from_raw(
            self.width as u32,
            self.height as u32,
            self.quantize(),
        )
        .ok_or_else(|| Error::shape("image buffer does not match its dimensions"))?;
        buf.save(path.as_ref())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interleaved_round_trip() {
        let data: Vec<f64> = (0..2 * 3 * 3).map(|i| i as f64 / 20.0).collect();
        let img = Image::from_interleaved(2, 3, &data).unwrap();
        assert_eq!(img.get(1, 0, 0), data[1]);
        assert_eq!(img.get(2, 1, 2), data[(3 + 2) * 3 + 2]);
        assert_eq!(img.to_interleaved(), data);
    }

    #[test]
    fn png_round_trip_is_exact_on_8bit_values() {
        let bytes: Vec<u8> = (0..4 * 5 * 3).map(|i| (i * 17 % 256) as u8).collect();
        let img = Image::from_rgb8(4, 5, &bytes).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        assert_eq!(back, img);
        assert_eq!(back.quantize(), bytes);
    }

    #[test]
    fn rejects_wrong_buffer_length() {
        assert!(Image::from_planar(2, 2, vec![0.0; 11]).is_err());
    }
}
