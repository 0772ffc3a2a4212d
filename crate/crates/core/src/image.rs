//! Floating-point RGB buffers and file I/O.
//!
//! All pixel math runs on `[0, 1]` f64 values in row-major HWC layout;
//! conversion to and from 8/16-bit files happens only at the boundary.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Rgb};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize) -> Self {
        Self::filled(height, width, [0.0; 3])
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn from_raw(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape {
                expected: format!("{} values ({height}x{width}x3)", height * width * 3),
                actual: format!("{} values", data.len()),
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> [f64; 3],
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_raw(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_shape(&self, other: &RgbImage) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn mean_rgb(&self) -> [f64; 3] {
        let mut acc = [0.0; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                acc[c] += px[c];
            }
        }
        let n = self.pixel_count().max(1) as f64;
        acc.map(|v| v / n)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bilinear resize with pixel-centre alignment and edge clamping.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> RgbImage {
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        RgbImage::from_fn(height, width, |y, x| {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
            self.sample_bilinear(fy, fx)
        })
    }

    /// Bilinear lookup at a continuous coordinate already inside
    /// `[0, h-1] x [0, w-1]`.
    pub fn sample_bilinear(&self, fy: f64, fx: f64) -> [f64; 3] {
        let (y0, wy) = split_coord(fy, self.height);
        let (x0, wx) = split_coord(fx, self.width);
        let y1 = (y0 + 1).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let a = self.get(y0, x0);
        let b = self.get(y0, x1);
        let c = self.get(y1, x0);
        let d = self.get(y1, x1);
        let mut out = [0.0; 3];
        for k in 0..3 {
            out[k] =
                (1.0 - wy) * ((1.0 - wx) * a[k] + wx * b[k]) + wy * ((1.0 - wx) * c[k] + wx * d[k]);
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| Error::ImageDecode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_dynamic(img).map_err(|reason| Error::ImageDecode {
            path: path.to_path_buf(),
            reason,
        })
    }

    pub fn from_dynamic(img: DynamicImage) -> std::result::Result<Self, String> {
        if !img.color().has_color() {
            return Err(format!("non-RGB source ({:?})", img.color()));
        }
        let rgb = img.to_rgb16();
        let (w, h) = rgb.dimensions();
        let data = rgb
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / 65535.0)
            .collect();
        Ok(Self {
            height: h as usize,
            width: w as usize,
            data,
        })
    }

    /// Writes a 16-bit RGB PNG.
    pub fn save_png16(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let raw: Vec<u16> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
            .collect();
        let buf: ImageBuffer<Rgb<u16>, Vec<u16>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, raw)
                .expect("buffer length matches dimensions");
        buf.save(path).map_err(|e| Error::ImageEncode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    /// Writes an 8-bit RGB image; format follows the extension.
    pub fn save_8bit(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let buf = self.to_rgb8();
        buf.save(path).map_err(|e| Error::ImageEncode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let raw: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        ImageBuffer::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions")
    }
}

/// Integer base index and fractional weight for bilinear interpolation
/// along an axis of length `len`.
#[inline]
pub(crate) fn split_coord(f: f64, len: usize) -> (usize, f64) {
    if len == 1 {
        return (0, 0.0);
    }
    let base = (f.floor().max(0.0) as usize).min(len - 2);
    (base, f - base as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png16_round_trip_within_quantum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.png");
        let img = RgbImage::from_fn(5, 7, |y, x| [y as f64 / 4.0, x as f64 / 6.0, 0.123456789]);
        img.save_png16(&path).unwrap();
        let back = RgbImage::load(&path).unwrap();
        assert!(back.same_shape(&img));
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-12);
        }
    }

    #[test]
    fn eight_bit_values_map_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p8.png");
        let buf: image::RgbImage =
            ImageBuffer::from_raw(2, 1, vec![0u8, 128, 255, 1, 2, 3]).unwrap();
        buf.save(&path).unwrap();
        let back = RgbImage::load(&path).unwrap();
        assert_eq!(back.get(0, 0), [0.0, 128.0 / 255.0, 1.0]);
    }

    #[test]
    fn grayscale_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.png");
        let buf: image::GrayImage = ImageBuffer::from_raw(2, 2, vec![1u8, 2, 3, 4]).unwrap();
        buf.save(&path).unwrap();
        assert!(matches!(
            RgbImage::load(&path),
            Err(Error::ImageDecode { .. })
        ));
    }

    #[test]
    fn resize_same_size_is_identity() {
        let img = RgbImage::from_fn(4, 6, |y, x| [(y * 6 + x) as f64 / 24.0, 0.5, 0.0]);
        assert_eq!(img.resize_bilinear(4, 6), img);
    }
}
