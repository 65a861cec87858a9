//! Image containers, exact grayscale conversion, PSNR, float/8-bit bridging
//! and PNG I/O.
//!
//! Grayscale is the integer BT.601 form
//! `v = floor((299 r + 587 g + 114 b + 500) / 1000)`, which is what every
//! invariance guarantee in the codec is stated against.

use std::fmt;
use std::io::{BufWriter, Cursor, Read, Write};
use std::path::Path;

use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::seeded;

/// Smallest accepted edge length. The codec needs neighbours and anchors.
pub const MIN_SIDE: usize = 8;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image is {height}x{width}, both sides must be at least {MIN_SIDE}")]
    TooSmall { height: usize, width: usize },
    #[error("expected {expected} samples, got {actual}")]
    DataLength { expected: usize, actual: usize },
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("non-finite sample in float image")]
    NonFinite,
    #[error("unsupported PNG: {0}")]
    Unsupported(String),
    #[error("png decode: {0}")]
    Decode(#[from] png::DecodingError),
    #[error("png encode: {0}")]
    Encode(#[from] png::EncodingError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

fn check_dims(height: usize, width: usize) -> Result<(), ImageError> {
    if height < MIN_SIDE || width < MIN_SIDE {
        return Err(ImageError::TooSmall { height, width });
    }
    Ok(())
}

/// 8-bit RGB raster, row-major, channels interleaved.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct ColorImage {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl fmt::Debug for ColorImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ColorImage({}x{})", self.height, self.width)
    }
}

impl ColorImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self, ImageError> {
        check_dims(height, width)?;
        if data.len() != height * width * 3 {
            return Err(ImageError::DataLength {
                expected: height * width * 3,
                actual: data.len(),
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> [u8; 3],
    ) -> Result<Self, ImageError> {
        check_dims(height, width)?;
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Interleaved RGB samples.
    pub fn as_raw(&self) -> &[u8] {
        &self.data
    }

    /// One channel as a row-major plane.
    pub fn channel(&self, c: usize) -> Vec<u8> {
        self.data.iter().skip(c).step_by(3).copied().collect()
    }

    /// Rebuilds an image from three planes of equal size.
    pub fn from_planes(
        height: usize,
        width: usize,
        r: &[u8],
        g: &[u8],
        b: &[u8],
    ) -> Result<Self, ImageError> {
        let n = height * width;
        if r.len() != n || g.len() != n || b.len() != n {
            return Err(ImageError::DataLength {
                expected: n,
                actual: r.len().min(g.len()).min(b.len()),
            });
        }
        Self::from_fn(height, width, |y, x| {
            let i = y * width + x;
            [r[i], g[i], b[i]]
        })
    }
}

/// The grayscale plane of a [`ColorImage`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayPlane {
    pub height: usize,
    pub width: usize,
    pub values: Vec<u8>,
}

/// Image in the attack domain: samples in `[0, 1]`, same layout as
/// [`ColorImage`].
#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FloatImage {
    /// Clamps every sample into `[0, 1]`. NaN and infinities are rejected.
    pub fn new(height: usize, width: usize, mut data: Vec<f64>) -> Result<Self, ImageError> {
        check_dims(height, width)?;
        if data.len() != height * width * 3 {
            return Err(ImageError::DataLength {
                expected: height * width * 3,
                actual: data.len(),
            });
        }
        for s in &mut data {
            if !s.is_finite() {
                return Err(ImageError::NonFinite);
            }
            *s = s.clamp(0.0, 1.0);
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Grayscale of a single pixel.
#[inline]
pub fn gray_value(r: u8, g: u8, b: u8) -> u8 {
    ((299 * r as u32 + 587 * g as u32 + 114 * b as u32 + 500) / 1000) as u8
}

pub fn to_grayscale(img: &ColorImage) -> GrayPlane {
    let values = img
        .data
        .chunks_exact(3)
        .map(|p| gray_value(p[0], p[1], p[2]))
        .collect();
    GrayPlane {
        height: img.height,
        width: img.width,
        values,
    }
}

/// PSNR in decibels. Identical images are `Infinite`, never a large float.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    Finite(f64),
    Infinite,
}

impl Psnr {
    pub fn finite(self) -> Option<f64> {
        match self {
            Psnr::Finite(v) => Some(v),
            Psnr::Infinite => None,
        }
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Finite(v) => write!(f, "{v:.4}"),
            Psnr::Infinite => f.write_str("inf"),
        }
    }
}

/// Finite values serialize as numbers, the sentinel as the string `"inf"`.
impl Serialize for Psnr {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Psnr::Finite(v) => s.serialize_f64(*v),
            Psnr::Infinite => s.serialize_str("inf"),
        }
    }
}

pub fn psnr(a: &ColorImage, b: &ColorImage) -> Result<Psnr, ImageError> {
    if a.height != b.height || a.width != b.width {
        return Err(ImageError::DimensionMismatch(
            a.height, a.width, b.height, b.width,
        ));
    }
    let sse: u64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&p, &q)| {
            let d = p as i64 - q as i64;
            (d * d) as u64
        })
        .sum();
    if sse == 0 {
        return Ok(Psnr::Infinite);
    }
    let mse = sse as f64 / a.data.len() as f64;
    Ok(Psnr::Finite(10.0 * (65025.0 / mse).log10()))
}

/// `round(255 u)` with halves rounded up, clamped to `[0, 255]`.
#[inline]
pub fn quantize_value(u: f64) -> u8 {
    (255.0 * u + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn quantize(x: &FloatImage) -> ColorImage {
    ColorImage {
        height: x.height,
        width: x.width,
        data: x.data.iter().map(|&u| quantize_value(u)).collect(),
    }
}

pub fn dequantize(img: &ColorImage) -> FloatImage {
    FloatImage {
        height: img.height,
        width: img.width,
        data: img.data.iter().map(|&c| c as f64 / 255.0).collect(),
    }
}

/// Euclidean distance between two images in the float domain.
pub fn l2_distance(a: &FloatImage, b: &FloatImage) -> f64 {
    a.data
        .iter()
        .zip(&b.data)
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        .sqrt()
}

// ==================== PNG ====================

pub fn decode_png(bytes: impl Read) -> Result<ColorImage, ImageError> {
    let mut decoder = png::Decoder::new(bytes);
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info()?;
    if reader.info().bit_depth == png::BitDepth::Sixteen {
        return Err(ImageError::Unsupported("16-bit samples".into()));
    }
    let mut buf = vec![0; reader.output_buffer_size()];
    let frame = reader.next_frame(&mut buf)?;
    let (height, width) = (frame.height as usize, frame.width as usize);
    let samples = &buf[..frame.buffer_size()];
    let data: Vec<u8> = match frame.color_type {
        png::ColorType::Rgb => samples.to_vec(),
        png::ColorType::Rgba => samples
            .chunks_exact(4)
            .flat_map(|p| [p[0], p[1], p[2]])
            .collect(),
        png::ColorType::Grayscale => samples.iter().flat_map(|&v| [v, v, v]).collect(),
        png::ColorType::GrayscaleAlpha => samples
            .chunks_exact(2)
            .flat_map(|p| [p[0], p[0], p[0]])
            .collect(),
        other => return Err(ImageError::Unsupported(format!("{other:?}"))),
    };
    ColorImage::new(height, width, data)
}

pub fn encode_png(img: &ColorImage, out: impl Write) -> Result<(), ImageError> {
    let mut enc = png::Encoder::new(out, img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    writer.write_image_data(&img.data)?;
    writer.finish()?;
    Ok(())
}

pub fn png_bytes(img: &ColorImage) -> Vec<u8> {
    let mut buf = Cursor::new(Vec::new());
    encode_png(img, &mut buf).expect("encoding into memory cannot fail");
    buf.into_inner()
}

pub fn load_png(path: impl AsRef<Path>) -> Result<ColorImage, ImageError> {
    let f = std::fs::File::open(path)?;
    decode_png(std::io::BufReader::new(f))
}

pub fn save_png(img: &ColorImage, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let f = std::fs::File::create(path)?;
    encode_png(img, BufWriter::new(f))
}

/// Writes a grayscale plane as an 8-bit single-channel PNG.
pub fn save_gray_png(plane: &GrayPlane, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let f = std::fs::File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(f), plane.width as u32, plane.height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    writer.write_image_data(&plane.values)?;
    writer.finish()?;
    Ok(())
}

// ==================== Synthetic textures ====================

/// Smooth seeded texture: a shared luminance field of a few low-frequency
/// plane waves, a per-channel tint and offset, and sparse ±1 grain.
///
/// Deterministic for a given `(height, width, seed)`.
pub fn synthetic_texture(height: usize, width: usize, seed: u64) -> Result<ColorImage, ImageError> {
    let mut rng = seeded::rng(seed);
    let mut waves = Vec::new();
    for _ in 0..4 {
        let fy = 0.3 + 2.2 * seeded::unit(&mut rng);
        let fx = 0.3 + 2.2 * seeded::unit(&mut rng);
        let phase = std::f64::consts::TAU * seeded::unit(&mut rng);
        let amp = 10.0 + 30.0 * seeded::unit(&mut rng);
        waves.push((fy, fx, phase, amp));
    }
    let mut tint = [0.0; 3];
    let mut base = [0.0; 3];
    for c in 0..3 {
        tint[c] = 0.5 + seeded::unit(&mut rng);
        base[c] = 70.0 + 110.0 * seeded::unit(&mut rng);
    }
    let (h, w) = (height as f64, width as f64);
    ColorImage::from_fn(height, width, |y, x| {
        let lum: f64 = waves
            .iter()
            .map(|&(fy, fx, ph, a)| {
                a * (std::f64::consts::TAU * (fy * y as f64 / h + fx * x as f64 / w) + ph).sin()
            })
            .sum();
        let mut px = [0u8; 3];
        for c in 0..3 {
            let grain = match seeded::below(&mut rng, 8) {
                0 => -1.0,
                1 => 1.0,
                _ => 0.0,
            };
            px[c] = (base[c] + tint[c] * lum + grain).round().clamp(0.0, 255.0) as u8;
        }
        px
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solid(c: [u8; 3]) -> ColorImage {
        ColorImage::from_fn(8, 8, |_, _| c).unwrap()
    }

    #[test]
    fn gray_examples() {
        assert_eq!(gray_value(0, 0, 0), 0);
        assert_eq!(gray_value(255, 255, 255), 255);
        assert_eq!(gray_value(255, 0, 0), 76);
        for c in 0..=255u8 {
            assert_eq!(gray_value(c, c, c), c);
        }
    }

    #[test]
    fn gray_matches_reference_float_formula() {
        // Independent computation: round-half-up of the weighted sum in
        // exact rational arithmetic, expressed in thousandths.
        for r in (0..=255u32).step_by(5) {
            for g in (0..=255u32).step_by(3) {
                for b in 0..=255u32 {
                    let s = 299 * r + 587 * g + 114 * b;
                    let expect = s / 1000 + u32::from(s % 1000 >= 500);
                    assert_eq!(gray_value(r as u8, g as u8, b as u8) as u32, expect);
                }
            }
        }
    }

    #[test]
    fn psnr_examples() {
        let a = solid([100, 100, 100]);
        assert_eq!(psnr(&a, &a).unwrap(), Psnr::Infinite);
        let b16 = solid([116, 116, 116]);
        let v = psnr(&a, &b16).unwrap().finite().unwrap();
        assert!((v - 24.0483).abs() < 1e-3, "{v}");
        let b1 = solid([101, 99, 101]);
        let v = psnr(&a, &b1).unwrap().finite().unwrap();
        assert!((v - 48.1308).abs() < 1e-3, "{v}");
    }

    #[test]
    fn psnr_rejects_mismatched_dims() {
        let a = solid([0, 0, 0]);
        let b = ColorImage::from_fn(9, 8, |_, _| [0, 0, 0]).unwrap();
        assert!(matches!(psnr(&a, &b), Err(ImageError::DimensionMismatch(..))));
    }

    #[test]
    fn psnr_is_symmetric_and_decreasing() {
        let a = solid([128, 128, 128]);
        let mut last = f64::INFINITY;
        for d in 1..=100u8 {
            let b = solid([128 + d, 128 - d, 128 + d]);
            let p = psnr(&a, &b).unwrap().finite().unwrap();
            assert_eq!(Some(p), psnr(&b, &a).unwrap().finite());
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize_value(0.5), 128);
        assert_eq!(quantize_value(1.0), 255);
        assert_eq!(quantize_value(0.0), 0);
        assert_eq!(quantize_value(-3.0), 0);
        assert_eq!(quantize_value(7.0), 255);
    }

    #[test]
    fn quantize_dequantize_exhaustive() {
        for c in 0..=255u8 {
            assert_eq!(quantize_value(c as f64 / 255.0), c);
        }
        let img = ColorImage::from_fn(16, 16, |y, x| {
            let k = (y * 16 + x) as u8;
            [k, 255 - k, k.wrapping_mul(7)]
        })
        .unwrap();
        assert_eq!(quantize(&dequantize(&img)), img);
    }

    #[test]
    fn float_image_clamps_and_rejects_nan() {
        let mut data = vec![0.5; 8 * 8 * 3];
        data[0] = -1.0;
        data[1] = 2.0;
        let x = FloatImage::new(8, 8, data.clone()).unwrap();
        assert_eq!(x.as_slice()[0], 0.0);
        assert_eq!(x.as_slice()[1], 1.0);
        data[2] = f64::NAN;
        assert!(matches!(FloatImage::new(8, 8, data), Err(ImageError::NonFinite)));
    }

    #[test]
    fn too_small_rejected() {
        assert!(matches!(
            ColorImage::new(7, 8, vec![0; 7 * 8 * 3]),
            Err(ImageError::TooSmall { .. })
        ));
    }

    #[test]
    fn png_roundtrip_and_alpha_strip() {
        let img = synthetic_texture(12, 20, 3).unwrap();
        let bytes = png_bytes(&img);
        assert_eq!(decode_png(Cursor::new(bytes)).unwrap(), img);

        let mut rgba = Vec::new();
        let mut enc = png::Encoder::new(&mut rgba, 8, 8);
        enc.set_color(png::ColorType::Rgba);
        enc.set_depth(png::BitDepth::Eight);
        let data: Vec<u8> = (0..64).flat_map(|i| [i as u8, 2, 3, 99]).collect();
        enc.write_header().unwrap().write_image_data(&data).unwrap();
        let back = decode_png(Cursor::new(rgba)).unwrap();
        assert_eq!(back.pixel(0, 5), [5, 2, 3]);
    }

    #[test]
    fn png_rejects_sixteen_bit() {
        let mut out = Vec::new();
        let mut enc = png::Encoder::new(&mut out, 8, 8);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Sixteen);
        enc.write_header()
            .unwrap()
            .write_image_data(&vec![0u8; 8 * 8 * 6])
            .unwrap();
        assert!(matches!(
            decode_png(Cursor::new(out)),
            Err(ImageError::Unsupported(_))
        ));
    }

    #[test]
    fn texture_is_deterministic() {
        let a = synthetic_texture(32, 40, 9).unwrap();
        assert_eq!(a, synthetic_texture(32, 40, 9).unwrap());
        assert_ne!(a, synthetic_texture(32, 40, 10).unwrap());
    }
}
