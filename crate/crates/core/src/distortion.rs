//! Synthetic degradations: seven distortion classes plus the identity class.
//!
//! Processing happens in unit-interval `f64` arithmetic; results are clamped and
//! re-quantized to 8 bits. All random draws come from [`CounterRng`] keyed by the
//! spec seed and the row or element index.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{check_dims, RgbImage, LUMA};
use crate::rng::CounterRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistortionClass {
    Blur,
    Noise,
    Brightness,
    Compression,
    Contrast,
    Colorfulness,
    Jitter,
    Clean,
}

impl DistortionClass {
    /// Canonical order, used for confusion matrices and option lists.
    pub const ALL: [DistortionClass; 8] = [
        DistortionClass::Blur,
        DistortionClass::Noise,
        DistortionClass::Brightness,
        DistortionClass::Compression,
        DistortionClass::Contrast,
        DistortionClass::Colorfulness,
        DistortionClass::Jitter,
        DistortionClass::Clean,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Lowercase class word as it appears in answers.
    pub fn word(self) -> &'static str {
        match self {
            DistortionClass::Blur => "blur",
            DistortionClass::Noise => "noise",
            DistortionClass::Brightness => "brightness",
            DistortionClass::Compression => "compression",
            DistortionClass::Contrast => "contrast",
            DistortionClass::Colorfulness => "colorfulness",
            DistortionClass::Jitter => "jitter",
            DistortionClass::Clean => "clean",
        }
    }

    /// Capitalized display name.
    pub fn title(self) -> &'static str {
        match self {
            DistortionClass::Blur => "Blur",
            DistortionClass::Noise => "Noise",
            DistortionClass::Brightness => "Brightness",
            DistortionClass::Compression => "Compression",
            DistortionClass::Contrast => "Contrast",
            DistortionClass::Colorfulness => "Colorfulness",
            DistortionClass::Jitter => "Jitter",
            DistortionClass::Clean => "Clean",
        }
    }

    pub fn from_word(word: &str) -> Option<Self> {
        let w = word.to_ascii_lowercase();
        Self::ALL.into_iter().find(|c| c.word() == w)
    }
}

impl fmt::Display for DistortionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.word())
    }
}

impl FromStr for DistortionClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::from_word(s.trim()).ok_or_else(|| Error::validation(format!("unknown distortion class {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DistortionSpec {
    pub class: DistortionClass,
    /// 1..=5 for degradations; 0 for `Clean`.
    pub severity: u8,
    pub seed: u64,
}

impl DistortionSpec {
    pub fn new(class: DistortionClass, severity: u8, seed: u64) -> Result<Self> {
        let spec = Self {
            class,
            severity,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn clean() -> Self {
        Self {
            class: DistortionClass::Clean,
            severity: 0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.class != DistortionClass::Clean && !(1..=5).contains(&self.severity) {
            return Err(Error::domain(format!(
                "severity {} out of range 1..=5 for {}",
                self.severity, self.class
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeverityParams {
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    /// Magnitude of the brightness offset; the sign is drawn from the seed.
    pub brightness_delta: f64,
    pub quant_step: f64,
    pub contrast_gamma: f64,
    pub saturation_gain: f64,
    pub jitter_max: usize,
}

const BLUR_SIGMA: [f64; 5] = [0.5, 1.0, 1.5, 2.0, 3.0];
const NOISE_LEVEL: [f64; 5] = [5.0, 10.0, 20.0, 35.0, 50.0];
const BRIGHTNESS_LEVEL: [f64; 5] = [20.0, 35.0, 50.0, 65.0, 80.0];
const QUANT_LEVEL: [f64; 5] = [8.0, 16.0, 32.0, 64.0, 96.0];
const CONTRAST_GAMMA: [f64; 5] = [0.7, 0.6, 0.5, 0.4, 0.3];
// Level 5 over-saturates instead of desaturating further.
const SATURATION_GAIN: [f64; 5] = [0.6, 0.45, 0.3, 0.15, 1.8];
const JITTER_MAX: [usize; 5] = [1, 2, 3, 5, 8];

/// Parameter table row for a severity level. The class argument only selects
/// which field `apply_distortion` reads; every row is fully populated.
pub fn severity_params(class: DistortionClass, severity: u8) -> Result<SeverityParams> {
    if !(1..=5).contains(&severity) {
        return Err(Error::domain(format!(
            "severity {severity} out of range 1..=5 for {class}"
        )));
    }
    let i = usize::from(severity - 1);
    Ok(SeverityParams {
        blur_sigma: BLUR_SIGMA[i],
        noise_sigma: NOISE_LEVEL[i] / 255.0,
        brightness_delta: BRIGHTNESS_LEVEL[i] / 255.0,
        quant_step: QUANT_LEVEL[i] / 255.0,
        contrast_gamma: CONTRAST_GAMMA[i],
        saturation_gain: SATURATION_GAIN[i],
        jitter_max: JITTER_MAX[i],
    })
}

// Stream ids keep the draws of different primitives independent.
const STREAM_NOISE: u64 = 1;
const STREAM_BRIGHTNESS: u64 = 2;
const STREAM_JITTER: u64 = 3;

pub fn apply_distortion(img: &RgbImage, spec: &DistortionSpec) -> Result<RgbImage> {
    check_dims(img.width(), img.height())?;
    spec.validate()?;
    if spec.class == DistortionClass::Clean {
        return Ok(img.clone());
    }
    let p = severity_params(spec.class, spec.severity)?;
    let (w, h) = (img.width(), img.height());
    let src = img.to_unit();
    let out = match spec.class {
        DistortionClass::Clean => unreachable!(),
        DistortionClass::Blur => gaussian_blur(&src, w, h, p.blur_sigma),
        DistortionClass::Noise => {
            let rng = CounterRng::new(spec.seed, STREAM_NOISE);
            src.iter()
                .enumerate()
                .map(|(i, &v)| v + p.noise_sigma * rng.normal(i as u64))
                .collect()
        }
        DistortionClass::Brightness => {
            let rng = CounterRng::new(spec.seed, STREAM_BRIGHTNESS);
            let sign = if rng.bits(0) & 1 == 0 { 1.0 } else { -1.0 };
            src.iter().map(|&v| v + sign * p.brightness_delta).collect()
        }
        DistortionClass::Compression => block_dct_quantize(&src, w, h, p.quant_step),
        DistortionClass::Contrast => {
            let mean = src.iter().sum::<f64>() / src.len() as f64;
            src.iter().map(|&v| mean + p.contrast_gamma * (v - mean)).collect()
        }
        DistortionClass::Colorfulness => src
            .chunks_exact(3)
            .flat_map(|px| {
                let y = LUMA[0] * px[0] + LUMA[1] * px[1] + LUMA[2] * px[2];
                px.iter()
                    .map(move |&c| y + p.saturation_gain * (c - y))
                    .collect::<Vec<_>>()
            })
            .collect(),
        DistortionClass::Jitter => row_jitter(&src, w, h, p.jitter_max, spec.seed),
    };
    RgbImage::from_unit(w, h, &out)
}

/// Normalized 1-D Gaussian taps over radius ceil(3 sigma).
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Separable Gaussian blur with edge clamping on interleaved RGB samples.
pub fn gaussian_blur(src: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;

    let mut tmp = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                tmp[(y * w + x) * 3 + c] = k
                    .iter()
                    .enumerate()
                    .map(|(t, wt)| wt * src[(y * w + clamp(x as i64 + t as i64 - r, w)) * 3 + c])
                    .sum();
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out[(y * w + x) * 3 + c] = k
                    .iter()
                    .enumerate()
                    .map(|(t, wt)| wt * tmp[(clamp(y as i64 + t as i64 - r, h) * w + x) * 3 + c])
                    .sum();
            }
        }
    }
    out
}

/// Orthonormal 8-point DCT-II basis, `basis[k][n]`.
fn dct_basis() -> [[f64; 8]; 8] {
    let mut m = [[0.0; 8]; 8];
    for (k, row) in m.iter_mut().enumerate() {
        let alpha = if k == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (n, v) in row.iter_mut().enumerate() {
            *v = alpha * (std::f64::consts::PI * (2 * n + 1) as f64 * k as f64 / 16.0).cos();
        }
    }
    m
}

/// Per-channel 8x8 block DCT, uniform quantization of every coefficient, inverse.
pub fn block_dct_quantize(src: &[f64], w: usize, h: usize, step: f64) -> Vec<f64> {
    let basis = dct_basis();
    let mut out = vec![0.0; src.len()];
    let mut block = [[0.0; 8]; 8];
    let mut tmp = [[0.0; 8]; 8];
    for by in (0..h).step_by(8) {
        for bx in (0..w).step_by(8) {
            for c in 0..3 {
                for (y, row) in block.iter_mut().enumerate() {
                    for (x, v) in row.iter_mut().enumerate() {
                        *v = src[((by + y) * w + bx + x) * 3 + c];
                    }
                }
                // forward: coeff = B * X * B^T
                for k in 0..8 {
                    for x in 0..8 {
                        tmp[k][x] = (0..8).map(|n| basis[k][n] * block[n][x]).sum();
                    }
                }
                for k in 0..8 {
                    for l in 0..8 {
                        let coeff: f64 = (0..8).map(|n| tmp[k][n] * basis[l][n]).sum();
                        block[k][l] = (coeff / step).round() * step;
                    }
                }
                // inverse: X = B^T * coeff * B
                for n in 0..8 {
                    for l in 0..8 {
                        tmp[n][l] = (0..8).map(|k| basis[k][n] * block[k][l]).sum();
                    }
                }
                for y in 0..8 {
                    for x in 0..8 {
                        let v: f64 = (0..8).map(|l| tmp[y][l] * basis[l][x]).sum();
                        out[((by + y) * w + bx + x) * 3 + c] = v;
                    }
                }
            }
        }
    }
    out
}

/// Shifts each row horizontally (wrap-around) by an offset uniform in
/// [-max_shift, max_shift], drawn per row index.
pub fn row_jitter(src: &[f64], w: usize, h: usize, max_shift: usize, seed: u64) -> Vec<f64> {
    let rng = CounterRng::new(seed, STREAM_JITTER);
    let m = max_shift as i64;
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        let shift = rng.range_i64(y as u64, -m, m);
        for x in 0..w {
            let sx = (x as i64 - shift).rem_euclid(w as i64) as usize;
            let (d, s) = ((y * w + x) * 3, (y * w + sx) * 3);
            out[d..d + 3].copy_from_slice(&src[s..s + 3]);
        }
    }
    out
}

/// Mean absolute 4-neighbour Laplacian of a plane, with periodic boundaries.
pub fn laplacian_energy_plane(plane: &[f64], w: usize, h: usize) -> f64 {
    let at = |x: usize, y: usize| plane[y * w + x];
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let c = at(x, y);
            let lap = (c - at((x + w - 1) % w, y))
                + (c - at((x + 1) % w, y))
                + (c - at(x, (y + h - 1) % h))
                + (c - at(x, (y + 1) % h));
            total += lap.abs();
        }
    }
    total / (w * h) as f64
}

/// Mean absolute 4-neighbour Laplacian response over the luma plane.
pub fn laplacian_energy(img: &RgbImage) -> f64 {
    laplacian_energy_plane(&img.luma(), img.width(), img.height())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::mean_and_variance;

    fn textured(w: usize, h: usize) -> RgbImage {
        let data = (0..w * h)
            .flat_map(|i| {
                let (x, y) = (i % w, i / w);
                let v = ((x * 37 + y * 91) % 17) as f64 / 16.0;
                let r = 0.5 + 0.4 * (0.7 * x as f64).sin() * (0.3 * y as f64).cos();
                [
                    crate::image::quantize(0.5 * v + 0.5 * r),
                    crate::image::quantize(1.0 - v * 0.8),
                    crate::image::quantize(r),
                ]
            })
            .collect();
        RgbImage::new(w, h, data).unwrap()
    }

    #[test]
    fn table_anchors() {
        assert_eq!(severity_params(DistortionClass::Blur, 1).unwrap().blur_sigma, 0.5);
        assert_eq!(severity_params(DistortionClass::Noise, 5).unwrap().noise_sigma, 50.0 / 255.0);
        assert_eq!(severity_params(DistortionClass::Contrast, 3).unwrap().contrast_gamma, 0.5);
        assert!(severity_params(DistortionClass::Blur, 0).is_err());
        assert!(severity_params(DistortionClass::Blur, 6).is_err());
    }

    #[test]
    fn magnitudes_grow_with_severity() {
        let rows: Vec<SeverityParams> = (1..=5)
            .map(|s| severity_params(DistortionClass::Blur, s).unwrap())
            .collect();
        for pair in rows.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            assert!(b.blur_sigma > a.blur_sigma);
            assert!(b.noise_sigma > a.noise_sigma);
            assert!(b.brightness_delta > a.brightness_delta);
            assert!(b.quant_step > a.quant_step);
            assert!((1.0 - b.contrast_gamma).abs() > (1.0 - a.contrast_gamma).abs());
            assert!(b.jitter_max > a.jitter_max);
        }
        // Desaturation deepens over levels 1..4; level 5 switches to over-saturation.
        for pair in rows[..4].windows(2) {
            assert!((1.0 - pair[1].saturation_gain) > (1.0 - pair[0].saturation_gain));
        }
        assert!(rows[4].saturation_gain > 1.0);
    }

    #[test]
    fn clean_is_identity() {
        let img = textured(32, 32);
        let spec = DistortionSpec {
            class: DistortionClass::Clean,
            severity: 0,
            seed: 99,
        };
        assert_eq!(apply_distortion(&img, &spec).unwrap(), img);
    }

    #[test]
    fn every_degradation_changes_a_textured_image() {
        let img = textured(32, 32);
        for class in DistortionClass::ALL.into_iter().filter(|c| *c != DistortionClass::Clean) {
            for sev in 1..=5 {
                let out = apply_distortion(&img, &DistortionSpec::new(class, sev, 11).unwrap()).unwrap();
                assert_eq!((out.width(), out.height()), (32, 32));
                assert!(out.l2_distance_sq(&img) > 0.0, "{class} severity {sev} was a no-op");
            }
        }
    }

    #[test]
    fn deterministic() {
        let img = textured(32, 24);
        for class in DistortionClass::ALL {
            let spec = DistortionSpec {
                class,
                severity: if class == DistortionClass::Clean { 0 } else { 4 },
                seed: 1234,
            };
            assert_eq!(apply_distortion(&img, &spec).unwrap(), apply_distortion(&img, &spec).unwrap());
        }
    }

    #[test]
    fn invalid_severity_rejected() {
        let img = textured(16, 16);
        let spec = DistortionSpec {
            class: DistortionClass::Noise,
            severity: 0,
            seed: 0,
        };
        assert!(matches!(apply_distortion(&img, &spec), Err(Error::Domain(_))));
    }

    #[test]
    fn noise_matches_target_sigma_on_gray() {
        let img = RgbImage::filled(256, 256, [128; 3]).unwrap();
        let spec = DistortionSpec::new(DistortionClass::Noise, 3, 7).unwrap();
        let out = apply_distortion(&img, &spec).unwrap();
        let (_, var) = mean_and_variance(&out.to_unit());
        let target = 20.0 / 255.0;
        assert!((var.sqrt() / target - 1.0).abs() < 0.1, "sigma {}", var.sqrt());
    }

    #[test]
    fn blur_lowers_laplacian_energy() {
        let img = textured(64, 64);
        let out = apply_distortion(&img, &DistortionSpec::new(DistortionClass::Blur, 3, 0).unwrap()).unwrap();
        assert!(laplacian_energy(&out) < laplacian_energy(&img));
    }

    #[test]
    fn contrast_reduces_luma_variance_and_brightness_keeps_it() {
        let img = textured(32, 32);
        let (_, v0) = mean_and_variance(&img.luma());
        let c = apply_distortion(&img, &DistortionSpec::new(DistortionClass::Contrast, 1, 0).unwrap()).unwrap();
        let (_, vc) = mean_and_variance(&c.luma());
        assert!(vc < v0);

        let mid = RgbImage::new(
            32,
            32,
            img.data().iter().map(|&v| 64 + v / 2).collect(),
        )
        .unwrap();
        let (_, vm) = mean_and_variance(&mid.luma());
        let b = apply_distortion(&mid, &DistortionSpec::new(DistortionClass::Brightness, 2, 5).unwrap()).unwrap();
        let (_, vb) = mean_and_variance(&b.luma());
        assert!((vb - vm).abs() < 1e-3 * vm.max(1e-6) + 1e-5, "{vb} vs {vm}");
    }

    #[test]
    fn colorfulness_preserves_luma() {
        let img = textured(32, 32);
        let out = apply_distortion(&img, &DistortionSpec::new(DistortionClass::Colorfulness, 2, 0).unwrap()).unwrap();
        for (a, b) in img.luma().iter().zip(out.luma()) {
            // Re-quantization of each channel moves luma by at most half a level.
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn jitter_shifts_rows_by_bounded_wrapping_offsets() {
        let img = textured(32, 32);
        let out = apply_distortion(&img, &DistortionSpec::new(DistortionClass::Jitter, 2, 3).unwrap()).unwrap();
        for y in 0..32 {
            let row = |im: &RgbImage, x: usize| im.pixel(x, y);
            let found = (-2i64..=2).any(|s| {
                (0..32).all(|x| row(&out, x) == row(&img, (x as i64 - s).rem_euclid(32) as usize))
            });
            assert!(found, "row {y} is not a bounded cyclic shift");
        }
    }

    #[test]
    fn compression_with_fine_step_is_near_lossless() {
        let img = textured(16, 16);
        let out = block_dct_quantize(&img.to_unit(), 16, 16, 1e-9);
        for (a, b) in img.to_unit().iter().zip(&out) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn laplacian_of_flat_field_is_zero() {
        assert_eq!(laplacian_energy(&RgbImage::filled(16, 16, [77, 20, 200]).unwrap()), 0.0);
    }

    // Direct convolution with explicit neighbour enumeration on small planes.
    fn brute_laplacian(plane: &[f64], w: usize, h: usize) -> f64 {
        let mut total = 0.0;
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let mut acc = 0.0;
                for (dx, dy, k) in [(0, 0, 4.0), (-1, 0, -1.0), (1, 0, -1.0), (0, -1, -1.0), (0, 1, -1.0)] {
                    let sx = (x + dx).rem_euclid(w as i64) as usize;
                    let sy = (y + dy).rem_euclid(h as i64) as usize;
                    acc += k * plane[sy * w + sx];
                }
                total += f64::abs(acc);
            }
        }
        total / (w * h) as f64
    }

    #[test]
    fn impulse_and_checkerboard() {
        let (w, h) = (16, 16);
        let mut plane = vec![0.0; w * h];
        plane[5 * w + 7] = 1.0;
        let e = laplacian_energy_plane(&plane, w, h);
        assert!((e - 8.0 / (w * h) as f64).abs() < 1e-15);
        assert!((e - brute_laplacian(&plane, w, h)).abs() < 1e-15);

        let a = 0.3;
        let checker: Vec<f64> = (0..w * h)
            .map(|i| if (i % w + i / w) % 2 == 0 { a } else { -a })
            .collect();
        let e = laplacian_energy_plane(&checker, w, h);
        assert!((e - 8.0 * a).abs() < 1e-12);
        assert!((e - brute_laplacian(&checker, w, h)).abs() < 1e-12);
    }
}
