//! Orthonormal DCT-II, low-frequency basis directions, and the seeded
//! without-replacement direction sampler used by the attack.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeded::{self, SeededRng};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DctError {
    #[error("frequency index {0:?} outside the {1}x{2} basis")]
    IndexOutOfRange(FrequencyIndex, usize, usize),
    #[error("all low-frequency directions have been emitted")]
    Exhausted,
    #[error("frequency fraction {0}/{1} is not in (0, 1]")]
    BadFraction(u32, u32),
}

/// One coordinate of the DCT basis: channel, row frequency `u`, column
/// frequency `w`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrequencyIndex {
    pub channel: u8,
    pub u: usize,
    pub w: usize,
}

/// Fraction of each axis kept as "low frequency", held as a rational so that
/// `floor(f * n)` is exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyFraction {
    pub num: u32,
    pub den: u32,
}

impl FrequencyFraction {
    pub fn new(num: u32, den: u32) -> Result<Self, DctError> {
        if num == 0 || den == 0 || num > den {
            return Err(DctError::BadFraction(num, den));
        }
        Ok(Self { num, den })
    }

    /// 1/3 for images with a side under 64 pixels, 1/8 otherwise.
    pub fn default_for(height: usize, width: usize) -> Self {
        if height.min(width) < 64 {
            Self { num: 1, den: 3 }
        } else {
            Self { num: 1, den: 8 }
        }
    }

    /// `floor(f * n)`, never below 1.
    pub fn keep(&self, n: usize) -> usize {
        (n * self.num as usize / self.den as usize).max(1)
    }
}

impl std::str::FromStr for FrequencyFraction {
    type Err = String;

    /// Accepts `a/b` or a decimal such as `0.125`.
    fn from_str(s: &str) -> Result<Self, String> {
        let (num, den) = if let Some((a, b)) = s.split_once('/') {
            let a: u32 = a.trim().parse().map_err(|e| format!("{s}: {e}"))?;
            let b: u32 = b.trim().parse().map_err(|e| format!("{s}: {e}"))?;
            (a, b)
        } else {
            let v: f64 = s.trim().parse().map_err(|e| format!("{s}: {e}"))?;
            let den = 1_000_000u32;
            ((v * den as f64).round() as u32, den)
        };
        FrequencyFraction::new(num, den).map_err(|e| e.to_string())
    }
}

/// Orthonormal DCT-II matrix, row `k` holds basis function `k` sampled at
/// `n` points.
pub fn dct_matrix(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    let s0 = (1.0 / n as f64).sqrt();
    let s = (2.0 / n as f64).sqrt();
    for k in 0..n {
        let scale = if k == 0 { s0 } else { s };
        for i in 0..n {
            m[k * n + i] =
                scale * (std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64).cos();
        }
    }
    m
}

fn transform(plane: &[f64], h: usize, w: usize, inverse: bool) -> Vec<f64> {
    assert_eq!(plane.len(), h * w, "plane size");
    let ch = dct_matrix(h);
    let cw = dct_matrix(w);
    // Rows first.
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for k in 0..w {
            let mut acc = 0.0;
            for x in 0..w {
                let c = if inverse { cw[x * w + k] } else { cw[k * w + x] };
                acc += c * plane[y * w + x];
            }
            tmp[y * w + k] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for k in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for y in 0..h {
                let c = if inverse { ch[y * h + k] } else { ch[k * h + y] };
                acc += c * tmp[y * w + x];
            }
            out[k * w + x] = acc;
        }
    }
    out
}

/// Orthonormal 2-D DCT-II of a row-major `h x w` plane.
pub fn dct2(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    transform(plane, h, w, false)
}

/// Inverse of [`dct2`].
pub fn idct2(coeffs: &[f64], h: usize, w: usize) -> Vec<f64> {
    transform(coeffs, h, w, true)
}

/// Cached 1-D bases for one image size, so repeated directions cost a single
/// outer product.
#[derive(Debug, Clone)]
pub struct DctBasis {
    height: usize,
    width: usize,
    rows: Vec<f64>,
    cols: Vec<f64>,
}

impl DctBasis {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            rows: dct_matrix(height),
            cols: dct_matrix(width),
        }
    }

    /// Spatial pattern of coefficient `(u, w)` as a single `h x w` plane.
    pub fn plane(&self, u: usize, w: usize) -> Vec<f64> {
        let (h, wd) = (self.height, self.width);
        let mut out = Vec::with_capacity(h * wd);
        for y in 0..h {
            let ry = self.rows[u * h + y];
            for x in 0..wd {
                out.push(ry * self.cols[w * wd + x]);
            }
        }
        out
    }

    /// Interleaved three-channel direction, zero outside `idx.channel`.
    pub fn direction(&self, idx: FrequencyIndex) -> Result<Vec<f64>, DctError> {
        if idx.channel > 2 || idx.u >= self.height || idx.w >= self.width {
            return Err(DctError::IndexOutOfRange(idx, self.height, self.width));
        }
        let plane = self.plane(idx.u, idx.w);
        let mut out = vec![0.0; plane.len() * 3];
        for (i, v) in plane.into_iter().enumerate() {
            out[i * 3 + idx.channel as usize] = v;
        }
        Ok(out)
    }
}

/// Image-shaped unit vector for one DCT coefficient in one channel.
pub fn basis_direction(idx: FrequencyIndex, height: usize, width: usize) -> Result<Vec<f64>, DctError> {
    DctBasis::new(height, width).direction(idx)
}

/// Draws low-frequency indices uniformly without replacement.
///
/// Index space: `channel`, then `u < keep(H)`, then `w < keep(W)`, flattened
/// as `(channel * keep(H) + u) * keep(W) + w`. Each draw is one step of an
/// incremental Fisher-Yates shuffle over that space.
#[derive(Debug, Clone)]
pub struct DirectionSampler {
    rng: SeededRng,
    rows: usize,
    cols: usize,
    pool: Vec<u32>,
    cursor: usize,
}

impl DirectionSampler {
    pub fn new(seed: u64, fraction: FrequencyFraction, height: usize, width: usize) -> Self {
        let rows = fraction.keep(height);
        let cols = fraction.keep(width);
        let total = rows * cols * 3;
        Self {
            rng: seeded::rng(seed),
            rows,
            cols,
            pool: (0..total as u32).collect(),
            cursor: 0,
        }
    }

    /// Number of indices in the low-frequency block.
    pub fn total(&self) -> usize {
        self.pool.len()
    }

    pub fn remaining(&self) -> usize {
        self.pool.len() - self.cursor
    }

    pub fn next_direction(&mut self) -> Result<FrequencyIndex, DctError> {
        let left = self.remaining();
        if left == 0 {
            return Err(DctError::Exhausted);
        }
        let j = self.cursor + seeded::below(&mut self.rng, left as u64) as usize;
        self.pool.swap(self.cursor, j);
        let flat = self.pool[self.cursor] as usize;
        self.cursor += 1;
        let w = flat % self.cols;
        let u = (flat / self.cols) % self.rows;
        let channel = (flat / (self.cols * self.rows)) as u8;
        Ok(FrequencyIndex { channel, u, w })
    }
}
