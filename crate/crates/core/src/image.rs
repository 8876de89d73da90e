//! Fixed-size 8-bit RGB rasters.

use std::path::Path;

use crate::error::{Error, Result};

/// BT.601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Row-major interleaved RGB, 8 bits per channel.
///
/// Width and height are at least 16 and divisible by 8 so every image tiles
/// exactly into 8x8 transform blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

pub fn check_dims(width: usize, height: usize) -> Result<()> {
    if width < 16 || height < 16 || width % 8 != 0 || height % 8 != 0 {
        return Err(Error::domain(format!(
            "image dimensions {width}x{height} must be >= 16 and divisible by 8"
        )));
    }
    Ok(())
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        check_dims(width, height)?;
        if data.len() != width * height * 3 {
            return Err(Error::domain(format!(
                "pixel buffer holds {} bytes, expected {}",
                data.len(),
                width * height * 3
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Channel-interleaved samples scaled to [0, 1].
    pub fn to_unit(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v) / 255.0).collect()
    }

    /// Re-quantizes unit-interval samples (clamped) into an image of the same size.
    pub fn from_unit(width: usize, height: usize, samples: &[f64]) -> Result<Self> {
        let data = samples.iter().map(|&v| quantize(v)).collect();
        Self::new(width, height, data)
    }

    /// Luma plane in [0, 1].
    pub fn luma(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| {
                (LUMA[0] * f64::from(p[0]) + LUMA[1] * f64::from(p[1]) + LUMA[2] * f64::from(p[2]))
                    / 255.0
            })
            .collect()
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)?.to_rgb8();
        let (w, h) = img.dimensions();
        Self::new(w as usize, h as usize, img.into_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .ok_or_else(|| Error::domain("pixel buffer does not match dimensions"))?;
        let mut bytes = Vec::new();
        buf.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Squared L2 distance between two same-sized images, in 8-bit units.
    pub fn l2_distance_sq(&self, other: &RgbImage) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
            .sum()
    }
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn mean_and_variance(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}
