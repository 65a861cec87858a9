//! Grayscale-invariant reversible data hiding.
//!
//! The payload goes into R and the side information into B, both by
//! prediction-error histogram shifting. G is then re-chosen so that
//! `gray(r', g', b') == gray(r, g, b)` at every pixel. Extraction returns the
//! payload and the bit-exact cover.
//!
//! # Geometry
//!
//! Embeddable positions are every pixel except the last row and last column
//! (the *anchors*), visited in raster order when embedding and in reverse
//! raster order when extracting. A pixel is predicted only from neighbours
//! later in raster order, which are therefore original values on both sides.
//! Anchors are never modified, so predictor coefficients fitted on them are
//! recomputed by the decoder and never transmitted.
//!
//! # Predictor
//!
//! `poly(v) = a + b v + c v^2` in Q16.16, least-squares fitted per channel
//! against the grayscale plane. The codec predicts
//!
//! ```text
//! P = round(poly(v) + n - poly(v_n))
//! ```
//!
//! where `n` is whichever of the right, lower, lower-right and lower-left
//! neighbours is closest to the pixel in grayscale. Clamping between
//! neighbours, as [`predict`] does, hurts badly on steep gradients.
//!
//! # Histogram shifting
//!
//! With peak `P` and direction `d = ±1`, a pixel with `d e > P` moves by `d`,
//! a pixel with `d e == P` carries one bit (moves by `d` for a 1), others stay.
//!
//! # Streams
//!
//! R carries `payload_len:32 | crc32:32 | payload`. A pixel whose R move is
//! impossible (leaves `[0, 255]` or leaves no valid G) is flagged and left
//! alone; the flags travel in B.
//!
//! Before B is shifted, each pixel's B value is clamped into the range where
//! a move in direction `d` stays G-feasible. Pixels whose feasible B range is
//! a single value are frozen. A clamp moves B by at most one, toward the
//! shift side, so one bit per unfrozen pixel says whether it happened. B
//! carries
//!
//! ```text
//! magic:32 | version:8 | r_down:1 | r_peak:16 | rle(clamp map) | rle(R flags) | gamma(tail_len + 1) | tail
//! ```
//!
//! R flags are sent only for pixels where an R move could be impossible, a
//! set the decoder recomputes. The tail holds G disambiguation bits that no
//! later carrier could take. The B peak and direction are found by the
//! decoder by trial.
//!
//! # G
//!
//! For a modified pixel let `O` be the G candidates of the original `(r, b)`
//! and `S` those of the marked `(r', b')`, each of size 1 or 2.
//!
//! * `|O| == |S|`: the order-preserving map, no side information.
//! * `|O| == 1, |S| == 2`: a free choice, which carries one pending
//!   disambiguation bit if any, else defaults to [`g_compensate`].
//! * `|O| == 2, |S| == 1`: one disambiguation bit is needed. It goes to the
//!   oldest unused free choice, or else is queued onto the B stream.
//!
//! A free choice arriving while bits are queued takes the newest queued bit.

use std::collections::{BTreeMap, VecDeque};
use std::sync::OnceLock;

use serde::Serialize;
use thiserror::Error;

use crate::imagecore::{gray_value, ColorImage};
use crate::seeded;

pub const MAGIC: u32 = 0x5241_4547; // "RAEG"
pub const VERSION: u8 = 1;
/// Bits the R stream spends before the payload.
pub const R_HEADER_BITS: usize = 64;
/// Peaks tried per channel and direction before giving up.
const MAX_PEAKS: usize = 8;
/// Passes spent settling the G tail for one B peak.
const TAIL_ROUNDS: usize = 4;

/// Q16.16 unit.
pub const Q: i64 = 1 << 16;
const COEFF_LIMIT: i64 = 1 << 40;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RdhError {
    #[error("payload of {needed} bits does not fit")]
    InsufficientCapacity { needed: usize },
    #[error("no embedding header found")]
    BadMagic,
    #[error("unsupported stream version {0}")]
    UnsupportedVersion(u8),
    #[error("payload checksum mismatch")]
    CrcMismatch,
    #[error("embedded stream ended early")]
    StreamUnderflow,
    #[error("inconsistent stego image: {0}")]
    Corrupt(&'static str),
    #[error("compensated g {0} outside [0, 255]")]
    OutOfRange(i64),
}

// ==================== G arithmetic ====================

/// The one or two G values that keep grayscale `v` for the given R and B.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Candidates {
    first: u8,
    count: u8,
}

impl Candidates {
    pub fn len(self) -> usize {
        self.count as usize
    }

    pub fn is_empty(self) -> bool {
        self.count == 0
    }

    pub fn get(self, i: usize) -> u8 {
        debug_assert!(i < self.len());
        self.first + i as u8
    }

    pub fn index_of(self, g: u8) -> Option<usize> {
        (g >= self.first && ((g - self.first) as usize) < self.len()).then(|| (g - self.first) as usize)
    }

    pub fn to_vec(self) -> Vec<u8> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }
}

/// All `g` in `[0, 255]` with `gray(r, g, b) == v`.
pub fn g_candidates(v: u8, r: u8, b: u8) -> Candidates {
    // gray == v  <=>  lo <= 587 g < lo + 1000
    let lo = 1000 * v as i64 - 500 - 299 * r as i64 - 114 * b as i64;
    let first = if lo <= 0 { 0 } else { (lo + 586) / 587 };
    let mut count = 0u8;
    let mut g = first;
    while g <= 255 && 587 * g < lo + 1000 {
        count += 1;
        g += 1;
    }
    Candidates {
        first: first.min(255) as u8,
        count,
    }
}

/// The G that best restores grayscale: `round((1000 v - 299 r - 114 b) / 587)`,
/// halves up.
pub fn g_compensate(v: u8, r: u8, b: u8) -> Result<u8, RdhError> {
    let n = 1000 * v as i64 - 299 * r as i64 - 114 * b as i64;
    let g = (2 * n + 587).div_euclid(1174);
    if (0..=255).contains(&g) {
        Ok(g as u8)
    } else {
        Err(RdhError::OutOfRange(g))
    }
}

/// Inclusive range of B values for which `(v, r, b)` has a G candidate.
fn b_feasible(v: u8, r: u8) -> Option<(u8, u8)> {
    static TABLE: OnceLock<Vec<(i16, i16)>> = OnceLock::new();
    let t = TABLE.get_or_init(|| {
        let mut t = vec![(-1, -1); 256 * 256];
        for v in 0..=255u8 {
            for r in 0..=255u8 {
                let ok: Vec<u8> = (0..=255u8).filter(|&b| !g_candidates(v, r, b).is_empty()).collect();
                if let (Some(&lo), Some(&hi)) = (ok.first(), ok.last()) {
                    t[v as usize * 256 + r as usize] = (lo as i16, hi as i16);
                }
            }
        }
        t
    });
    let (lo, hi) = t[v as usize * 256 + r as usize];
    (lo >= 0).then_some((lo as u8, hi as u8))
}

// ==================== Predictor ====================

/// Q16.16 coefficients of `a + b v + c v^2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PredictorParams {
    pub a: i64,
    pub b: i64,
    pub c: i64,
}

impl PredictorParams {
    pub fn poly(&self, v: u8) -> i64 {
        let v = v as i64;
        self.a + self.b * v + self.c * v * v
    }
}

fn round_ratio_q16(num: i128, den: i128) -> i64 {
    let (num, den) = if den < 0 { (-num, -den) } else { (num, den) };
    let whole = num.div_euclid(den);
    let rem = num.rem_euclid(den);
    let frac = rem as f64 / den as f64;
    let scaled = (whole as f64 + frac) * Q as f64;
    let r = (scaled + 0.5).floor();
    r.clamp(-(COEFF_LIMIT as f64), COEFF_LIMIT as f64) as i64
}

fn det3(m: [[i128; 3]; 3]) -> Option<i128> {
    let t = |a: i128, b: i128, c: i128| a.checked_mul(b)?.checked_mul(c);
    let p = t(m[0][0], m[1][1], m[2][2])?
        .checked_add(t(m[0][1], m[1][2], m[2][0])?)?
        .checked_add(t(m[0][2], m[1][0], m[2][1])?)?;
    let n = t(m[0][2], m[1][1], m[2][0])?
        .checked_add(t(m[0][0], m[1][2], m[2][1])?)?
        .checked_add(t(m[0][1], m[1][0], m[2][2])?)?;
    p.checked_sub(n)
}

/// Least-squares fit of `plane ≈ a + b v + c v^2` over the pixels listed in
/// `at`. Fewer than three distinct `v` values fall back to `(mean, 0, 0)`.
pub fn fit_predictor_at(plane: &[u8], v: &[u8], at: impl IntoIterator<Item = usize>) -> PredictorParams {
    let mut s = [0i128; 5];
    let mut t = [0i128; 3];
    let mut seen = [false; 256];
    let mut distinct = 0;
    for i in at {
        let (x, y) = (v[i] as i128, plane[i] as i128);
        if !seen[v[i] as usize] {
            seen[v[i] as usize] = true;
            distinct += 1;
        }
        let mut p = 1i128;
        for k in 0..5 {
            s[k] += p;
            if k < 3 {
                t[k] += p * y;
            }
            p *= x;
        }
    }
    if s[0] == 0 {
        return PredictorParams { a: 0, b: 0, c: 0 };
    }
    let mean = PredictorParams {
        a: ((2 * t[0] * Q as i128 + s[0]) / (2 * s[0])) as i64,
        b: 0,
        c: 0,
    };
    if distinct < 3 {
        return mean;
    }
    let m = [[s[0], s[1], s[2]], [s[1], s[2], s[3]], [s[2], s[3], s[4]]];
    let col = |k: usize| {
        let mut mk = m;
        for r in 0..3 {
            mk[r][k] = t[r];
        }
        mk
    };
    match (det3(m), det3(col(0)), det3(col(1)), det3(col(2))) {
        (Some(d), Some(da), Some(db), Some(dc)) if d != 0 => PredictorParams {
            a: round_ratio_q16(da, d),
            b: round_ratio_q16(db, d),
            c: round_ratio_q16(dc, d),
        },
        _ => mean,
    }
}

/// Fit over every pixel.
pub fn fit_predictor(plane: &[u8], v: &[u8]) -> PredictorParams {
    fit_predictor_at(plane, v, 0..plane.len().min(v.len()))
}

/// Plain polynomial prediction clamped between the two neighbours.
pub fn predict(params: &PredictorParams, v: u8, right: i32, down: i32) -> i32 {
    let p = ((params.poly(v) + Q / 2) >> 16) as i32;
    clamp_between(p, right, down)
}

fn clamp_between(p: i32, n1: i32, n2: i32) -> i32 {
    let (lo, hi) = (n1.min(n2), n1.max(n2));
    if p <= lo {
        lo
    } else if p >= hi {
        hi
    } else {
        p
    }
}

/// Image geometry plus everything the predictor needs.
#[derive(Debug, Clone, Copy)]
struct Grid<'a> {
    height: usize,
    width: usize,
    v: &'a [u8],
}

impl Grid<'_> {
    fn positions(&self) -> impl DoubleEndedIterator<Item = usize> + '_ {
        (0..self.height - 1).flat_map(move |y| (0..self.width - 1).map(move |x| y * self.width + x))
    }

    fn position_count(&self) -> usize {
        (self.height - 1) * (self.width - 1)
    }

    fn anchors(&self) -> impl Iterator<Item = usize> + '_ {
        let last = (self.height - 1) * self.width;
        (last..last + self.width).chain((0..self.height - 1).map(move |y| y * self.width + self.width - 1))
    }

    /// Prediction at pixel `i`: the polynomial corrected by the residual of
    /// the neighbour closest in grayscale. Only neighbours later in raster
    /// order are used, so both sides see original values.
    fn predict(&self, params: &PredictorParams, plane: &[i32], i: usize) -> i32 {
        let w = self.width;
        let vi = self.v[i];
        let mut best = i + 1;
        let mut consider = |j: usize| {
            if self.v[j].abs_diff(vi) < self.v[best].abs_diff(vi) {
                best = j;
            }
        };
        consider(i + w);
        consider(i + w + 1);
        if !i.is_multiple_of(w) {
            consider(i + w - 1);
        }
        let resid = plane[best] as i64 * Q - params.poly(self.v[best]);
        ((params.poly(vi) + resid + Q / 2) >> 16) as i32
    }
}

// ==================== Histogram shifting ====================

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Shift {
    pub peak: i32,
    /// `true` for left expansion (values move down).
    pub down: bool,
}

impl Shift {
    fn sign(self) -> i32 {
        if self.down {
            -1
        } else {
            1
        }
    }
}

/// Result of [`hs_embed_channel`].
#[derive(Debug, Clone)]
pub struct HsEmbedding {
    pub plane: Vec<i32>,
    /// Bits taken from the input; carriers beyond that embed 0.
    pub consumed: usize,
    /// Per embeddable position, in raster order: left alone because the
    /// move was refused.
    pub flags: Vec<bool>,
    pub carriers: usize,
}

/// Forward histogram-shift pass over one channel.
///
/// `skip[i]` removes pixel `i` from the pass. `can_move(i, new)` refuses a
/// move, which flags the pixel. All predictions see original values.
#[allow(clippy::too_many_arguments)]
pub fn hs_embed_channel(
    plane: &[u8],
    v: &[u8],
    height: usize,
    width: usize,
    params: &PredictorParams,
    shift: Shift,
    bits: &[bool],
    skip: &[bool],
    mut can_move: impl FnMut(usize, i32) -> bool,
) -> HsEmbedding {
    let grid = Grid { height, width, v };
    let orig: Vec<i32> = plane.iter().map(|&p| p as i32).collect();
    let mut out = orig.clone();
    let d = shift.sign();
    let mut consumed = 0;
    let mut carriers = 0;
    let mut flags = Vec::with_capacity(grid.position_count());
    for i in grid.positions() {
        if skip[i] {
            flags.push(false);
            continue;
        }
        let e = d * (orig[i] - grid.predict(params, &orig, i));
        if e < shift.peak {
            flags.push(false);
            continue;
        }
        if !can_move(i, orig[i] + d) {
            flags.push(true);
            continue;
        }
        flags.push(false);
        if e > shift.peak {
            out[i] += d;
        } else {
            carriers += 1;
            if consumed < bits.len() {
                if bits[consumed] {
                    out[i] += d;
                }
                consumed += 1;
            }
        }
    }
    HsEmbedding {
        plane: out,
        consumed,
        flags,
        carriers,
    }
}

/// Result of [`hs_extract_channel`].
#[derive(Debug, Clone)]
pub struct HsExtraction {
    pub plane: Vec<i32>,
    /// Bits in embedding order.
    pub bits: Vec<bool>,
    /// Carrier pixel indices in raster order, aligned with `bits`.
    pub carriers: Vec<usize>,
}

/// Inverse of [`hs_embed_channel`]: reverse raster order, skipped pixels
/// untouched. Returns every carried bit; with `count` set, fewer than `count`
/// is an underflow and the surplus is dropped.
#[allow(clippy::too_many_arguments)]
pub fn hs_extract_channel(
    plane: &[i32],
    v: &[u8],
    height: usize,
    width: usize,
    params: &PredictorParams,
    shift: Shift,
    skip: &[bool],
    count: Option<usize>,
) -> Result<HsExtraction, RdhError> {
    let grid = Grid { height, width, v };
    let mut out = plane.to_vec();
    let d = shift.sign();
    let mut bits = Vec::new();
    let mut carriers = Vec::new();
    for i in grid.positions().rev() {
        if skip[i] {
            continue;
        }
        let e = d * (out[i] - grid.predict(params, &out, i));
        if e == shift.peak {
            bits.push(false);
            carriers.push(i);
        } else if e == shift.peak + 1 {
            bits.push(true);
            carriers.push(i);
            out[i] -= d;
        } else if e > shift.peak + 1 {
            out[i] -= d;
        }
    }
    bits.reverse();
    carriers.reverse();
    if let Some(n) = count {
        if bits.len() < n {
            return Err(RdhError::StreamUnderflow);
        }
        bits.truncate(n);
        carriers.truncate(n);
    }
    Ok(HsExtraction { plane: out, bits, carriers })
}

/// Peaks with at least `need` carriers and their carrier counts, cheapest
/// first: fewest shifted pixels, then smallest `|P|`, then smallest `P`.
fn peak_order(hist: &BTreeMap<i32, usize>, need: usize, range: std::ops::RangeInclusive<i32>) -> Vec<(i32, usize)> {
    let mut above = 0usize;
    let mut cands = Vec::new();
    for (&p, &n) in hist.iter().rev() {
        if n >= need && range.contains(&p) {
            cands.push((above, p.unsigned_abs(), p, n));
        }
        above += n;
    }
    cands.sort_unstable();
    cands.into_iter().map(|c| (c.2, c.3)).collect()
}

// ==================== Bit streams ====================

#[derive(Debug, Default, Clone)]
struct BitWriter {
    bits: Vec<bool>,
}

impl BitWriter {
    fn uint(&mut self, value: u64, width: u32) {
        for k in (0..width).rev() {
            self.bits.push((value >> k) & 1 == 1);
        }
    }

    /// Elias gamma, `n >= 1`.
    fn gamma(&mut self, n: u64) {
        debug_assert!(n >= 1);
        let len = 64 - n.leading_zeros();
        self.bits.extend(std::iter::repeat_n(false, len as usize - 1));
        self.uint(n, len);
    }

    /// First bit, then gamma-coded run lengths.
    fn rle(&mut self, bits: &[bool]) {
        let Some(&first) = bits.first() else { return };
        self.bits.push(first);
        let mut run = 1u64;
        for w in bits.windows(2) {
            if w[0] == w[1] {
                run += 1;
            } else {
                self.gamma(run);
                run = 1;
            }
        }
        self.gamma(run);
    }
}

struct BitReader<'a> {
    bits: &'a [bool],
    pos: usize,
}

impl<'a> BitReader<'a> {
    fn new(bits: &'a [bool]) -> Self {
        Self { bits, pos: 0 }
    }

    fn bit(&mut self) -> Result<bool, RdhError> {
        let b = *self.bits.get(self.pos).ok_or(RdhError::StreamUnderflow)?;
        self.pos += 1;
        Ok(b)
    }

    fn uint(&mut self, width: u32) -> Result<u64, RdhError> {
        let mut v = 0;
        for _ in 0..width {
            v = (v << 1) | self.bit()? as u64;
        }
        Ok(v)
    }

    fn gamma(&mut self) -> Result<u64, RdhError> {
        let mut zeros = 0;
        while !self.bit()? {
            zeros += 1;
            if zeros > 40 {
                return Err(RdhError::Corrupt("gamma code too long"));
            }
        }
        Ok((1 << zeros) | self.uint(zeros)?)
    }

    fn rle(&mut self, n: usize) -> Result<Vec<bool>, RdhError> {
        let mut out = Vec::with_capacity(n);
        if n == 0 {
            return Ok(out);
        }
        let mut cur = self.bit()?;
        while out.len() < n {
            let run = self.gamma()? as usize;
            if out.len() + run > n {
                return Err(RdhError::Corrupt("run overflows map"));
            }
            out.extend(std::iter::repeat_n(cur, run));
            cur = !cur;
        }
        Ok(out)
    }
}

// ==================== Payload ====================

/// A bit string, most significant bit of each byte first.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Payload {
    pub bits: Vec<bool>,
}

impl Payload {
    pub fn new(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn from_bytes(bytes: &[u8]) -> Self {
        let mut w = BitWriter::default();
        for &b in bytes {
            w.uint(b as u64, 8);
        }
        Self { bits: w.bits }
    }

    /// `count` seeded pseudo-random bits.
    pub fn random(count: usize, seed: u64) -> Self {
        Self {
            bits: seeded::bits(seed, count),
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Packs the bits, zero-padding the last byte.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.bits
            .chunks(8)
            .map(|c| c.iter().enumerate().fold(0u8, |acc, (k, &b)| acc | ((b as u8) << (7 - k))))
            .collect()
    }

    pub fn crc32(&self) -> u32 {
        crc32fast::hash(&self.to_bytes())
    }
}

// ==================== Codec ====================

/// Everything the decoder needs besides the image itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct EmbedHeader {
    pub version: u8,
    pub r_shift: Shift,
    pub b_shift: Shift,
    pub payload_len: u32,
    pub payload_crc: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EmbedStats {
    pub header: EmbedHeader,
    /// Length of the fixed part of the B stream.
    pub side_bits: usize,
    /// Pixels with `(r, b)` changed.
    pub modified: usize,
    /// G disambiguation bits needed.
    pub g_bits: usize,
    /// Of those, carried by free G choices rather than the B stream.
    pub g_bits_in_choices: usize,
    pub r_carriers: usize,
    /// Pixels whose R move was refused.
    pub r_flagged: usize,
    pub b_carriers: usize,
    /// Peak combinations tried.
    pub attempts: usize,
}

#[derive(Debug, Clone)]
pub struct Stego {
    pub image: ColorImage,
    pub stats: EmbedStats,
}

struct Planes {
    height: usize,
    width: usize,
    r: Vec<u8>,
    g: Vec<u8>,
    b: Vec<u8>,
    v: Vec<u8>,
}

impl Planes {
    fn of(img: &ColorImage) -> Self {
        let (r, g, b) = (img.channel(0), img.channel(1), img.channel(2));
        let v = r.iter().zip(&g).zip(&b).map(|((&r, &g), &b)| gray_value(r, g, b)).collect();
        Self {
            height: img.height(),
            width: img.width(),
            r,
            g,
            b,
            v,
        }
    }

    fn grid(&self) -> Grid<'_> {
        Grid {
            height: self.height,
            width: self.width,
            v: &self.v,
        }
    }
}

/// B range kept for a shift direction so that one more step stays feasible.
fn b_window(s: (u8, u8), down: bool) -> (u8, u8) {
    if down {
        (s.0 + 1, s.1)
    } else {
        (s.0, s.1 - 1)
    }
}

fn to_u8(plane: &[i32]) -> Result<Vec<u8>, RdhError> {
    plane
        .iter()
        .map(|&p| u8::try_from(p).map_err(|_| RdhError::Corrupt("sample out of range")))
        .collect()
}

/// Upper bound on payload bits: the best R peak minus the R header.
/// Embedding can still fail if B cannot carry the side information.
pub fn capacity(cover: &ColorImage) -> usize {
    let p = Planes::of(cover);
    let grid = p.grid();
    let params = fit_predictor_at(&p.r, &p.v, grid.anchors());
    let orig: Vec<i32> = p.r.iter().map(|&x| x as i32).collect();
    let mut best = 0;
    for d in [1, -1] {
        let mut hist: BTreeMap<i32, usize> = BTreeMap::new();
        for i in grid.positions() {
            let e = d * (orig[i] - grid.predict(&params, &orig, i));
            let nr = orig[i] + d;
            if (0..=255).contains(&nr) && !g_candidates(p.v[i], nr as u8, p.b[i]).is_empty() {
                *hist.entry(e).or_default() += 1;
            }
        }
        best = best.max(hist.values().copied().max().unwrap_or(0));
    }
    best.saturating_sub(R_HEADER_BITS)
}

/// Embeds `payload` into `cover`.
pub fn embed(cover: &ColorImage, payload: &Payload) -> Result<Stego, RdhError> {
    let p = Planes::of(cover);
    let grid = p.grid();
    let n = p.r.len();
    let par_r = fit_predictor_at(&p.r, &p.v, grid.anchors());
    let par_b = fit_predictor_at(&p.b, &p.v, grid.anchors());

    if payload.len() > u32::MAX as usize {
        return Err(RdhError::InsufficientCapacity { needed: payload.len() });
    }
    let mut r_stream = BitWriter::default();
    r_stream.uint(payload.len() as u64, 32);
    r_stream.uint(payload.crc32() as u64, 32);
    r_stream.bits.extend_from_slice(&payload.bits);
    let r_stream = r_stream.bits;

    let r_orig: Vec<i32> = p.r.iter().map(|&x| x as i32).collect();
    let no_skip = vec![false; n];
    let mut attempts = 0;

    for r_down in [false, true] {
        let d = if r_down { -1 } else { 1 };
        let mut hist: BTreeMap<i32, usize> = BTreeMap::new();
        for i in grid.positions() {
            *hist.entry(d * (r_orig[i] - grid.predict(&par_r, &r_orig, i))).or_default() += 1;
        }
        let r_peaks = peak_order(&hist, r_stream.len(), i16::MIN as i32..=i16::MAX as i32);
        for &(r_peak, _) in r_peaks.iter().take(MAX_PEAKS) {
            let r_shift = Shift { peak: r_peak, down: r_down };
            let hs = hs_embed_channel(&p.r, &p.v, p.height, p.width, &par_r, r_shift, &r_stream, &no_skip, |i, nr| {
                (0..=255).contains(&nr) && !g_candidates(p.v[i], nr as u8, p.b[i]).is_empty()
            });
            if hs.consumed < r_stream.len() {
                continue;
            }
            let r2 = to_u8(&hs.plane).expect("moves are range checked");
            for b_down in [false, true] {
                let ctx = BPhase {
                    p: &p,
                    grid,
                    r2: &r2,
                    r_shift,
                    r_flags: &hs.flags,
                    b_down,
                    par_b: &par_b,
                };
                let prep = ctx.prepare();
                let mut hist: BTreeMap<i32, usize> = BTreeMap::new();
                for e in prep.errors.iter().flatten() {
                    *hist.entry(*e).or_default() += 1;
                }
                // Queued G bits are only known after a pass, so each failure
                // raises the bar for the peaks still to try.
                let mut need = prep.side.len();
                let mut tried = 0;
                for (b_peak, count) in peak_order(&hist, need, -128..=127) {
                    if count < need {
                        continue;
                    }
                    if tried == MAX_PEAKS {
                        break;
                    }
                    tried += 1;
                    attempts += 1;
                    // G bits stranded after the last carrier ride in an explicit
                    // tail, which shifts the pass; iterate to a fixed point.
                    let mut tail = Vec::new();
                    for _ in 0..TAIL_ROUNDS {
                        match ctx.run(&prep, b_peak, &tail, payload) {
                            Ok((image, mut stats)) => {
                                stats.attempts = attempts;
                                stats.r_carriers = hs.carriers;
                                stats.r_flagged = hs.flags.iter().filter(|&&f| f).count();
                                return Ok(Stego { image, stats });
                            }
                            Err(BFail::Short(short)) => {
                                need = need.max(count + short);
                                break;
                            }
                            Err(BFail::Leftover(left)) => tail = left,
                        }
                    }
                }
            }
        }
    }
    Err(RdhError::InsufficientCapacity { needed: payload.len() })
}

struct BPhase<'a> {
    p: &'a Planes,
    grid: Grid<'a>,
    r2: &'a [u8],
    r_shift: Shift,
    r_flags: &'a [bool],
    b_down: bool,
    par_b: &'a PredictorParams,
}

struct BPrep {
    b_pre: Vec<u8>,
    /// Direction-signed prediction error per pixel, `None` when frozen or
    /// not a position.
    errors: Vec<Option<i32>>,
    /// Fixed part of the B stream, before the G tail.
    side: Vec<bool>,
}

/// Why a B pass failed.
enum BFail {
    /// The fixed stream did not fit; carries the shortfall in bits.
    Short(usize),
    /// G bits left over at the end, in queue order.
    Leftover(Vec<bool>),
}

/// Whether moving R by `d` at a pixel could be refused. Only these pixels
/// can carry an R flag, and the decoder can tell which they are.
fn r_at_risk(v: u8, r: u8, b: u8, d: i32) -> bool {
    let nr = r as i32 + d;
    !(0..=255).contains(&nr) || g_candidates(v, nr as u8, b).is_empty()
}

/// Where clamping leaves a pixel: the window edge on the shift side.
fn clamp_edge(s: (u8, u8), down: bool) -> u8 {
    if down {
        s.0 + 1
    } else {
        s.1 - 1
    }
}

impl BPhase<'_> {
    fn prepare(&self) -> BPrep {
        let p = self.p;
        let n = p.b.len();
        let mut frozen = vec![true; n];
        let mut b_pre = p.b.clone();
        // Every cover b lies inside the feasible interval, so clamping moves
        // at most one step, off the end a shift would leave by.
        let mut clamped = Vec::new();
        for i in self.grid.positions() {
            let Some(s) = b_feasible(p.v[i], self.r2[i]).filter(|s| s.1 > s.0) else {
                continue;
            };
            frozen[i] = false;
            let (lo, hi) = b_window(s, self.b_down);
            let bp = p.b[i].clamp(lo, hi);
            debug_assert!(bp.abs_diff(p.b[i]) <= 1);
            b_pre[i] = bp;
            if bp == clamp_edge(s, self.b_down) {
                clamped.push(bp != p.b[i]);
            }
        }
        let mut flags = Vec::new();
        for (i, &f) in self.grid.positions().zip(self.r_flags) {
            if r_at_risk(p.v[i], self.r2[i], p.b[i], self.r_shift.sign()) {
                flags.push(f);
            } else {
                debug_assert!(!f);
            }
        }
        let mut side = BitWriter::default();
        side.uint(MAGIC as u64, 32);
        side.uint(VERSION as u64, 8);
        side.bits.push(self.r_shift.down);
        side.uint(self.r_shift.peak as u16 as u64, 16);
        side.rle(&clamped);
        side.rle(&flags);

        let d = if self.b_down { -1 } else { 1 };
        let plane: Vec<i32> = b_pre.iter().map(|&x| x as i32).collect();
        let mut errors = vec![None; n];
        for i in self.grid.positions() {
            if !frozen[i] {
                errors[i] = Some(d * (plane[i] - self.grid.predict(self.par_b, &plane, i)));
            }
        }
        BPrep {
            b_pre,
            errors,
            side: side.bits,
        }
    }

    /// Runs the B pass with `tail` as the G bits expected to be left over.
    fn run(&self, prep: &BPrep, b_peak: i32, tail: &[bool], payload: &Payload) -> Result<(ColorImage, EmbedStats), BFail> {
        let p = self.p;
        let d: i16 = if self.b_down { -1 } else { 1 };
        let mut stream = BitWriter { bits: prep.side.clone() };
        stream.gamma(tail.len() as u64 + 1);
        stream.bits.extend_from_slice(tail);
        let mut side = stream.bits.iter().copied();
        let mut b2 = prep.b_pre.clone();
        let mut g2 = p.g.clone();
        let mut queued: VecDeque<bool> = VecDeque::new();
        let mut slots: VecDeque<usize> = VecDeque::new();
        let (mut modified, mut g_bits, mut in_choices, mut carriers) = (0, 0, 0, 0);

        for i in self.grid.positions() {
            if let Some(e) = prep.errors[i] {
                if e > b_peak {
                    b2[i] = (b2[i] as i16 + d) as u8;
                } else if e == b_peak {
                    carriers += 1;
                    let bit = side.next().or_else(|| queued.pop_front()).unwrap_or(false);
                    if bit {
                        b2[i] = (b2[i] as i16 + d) as u8;
                    }
                }
            }
            let (r, g, b) = (p.r[i], p.g[i], p.b[i]);
            if (self.r2[i], b2[i]) == (r, b) {
                continue;
            }
            modified += 1;
            let v = p.v[i];
            let oc = g_candidates(v, r, b);
            let sc = g_candidates(v, self.r2[i], b2[i]);
            debug_assert!(!sc.is_empty(), "marked pixel left the feasible set");
            let idx = oc.index_of(g).expect("cover pixel is consistent");
            if oc.len() == sc.len() {
                g2[i] = sc.get(idx);
            } else if oc.len() == 1 {
                g2[i] = g_compensate(v, self.r2[i], b2[i]).expect("candidate exists");
                if let Some(bit) = queued.pop_back() {
                    g2[i] = sc.get(bit as usize);
                    in_choices += 1;
                } else {
                    slots.push_back(i);
                }
            } else {
                g_bits += 1;
                g2[i] = sc.get(0);
                let bit = idx == 1;
                if let Some(s) = slots.pop_front() {
                    g2[s] = g_candidates(p.v[s], self.r2[s], b2[s]).get(bit as usize);
                    in_choices += 1;
                } else {
                    queued.push_back(bit);
                }
            }
        }
        let unsent = side.count();
        if unsent > 0 {
            return Err(BFail::Short(unsent + queued.len()));
        }
        if !queued.iter().eq(tail) {
            return Err(BFail::Leftover(queued.into()));
        }
        let image = ColorImage::from_planes(p.height, p.width, self.r2, &g2, &b2).expect("same geometry");
        let stats = EmbedStats {
            header: EmbedHeader {
                version: VERSION,
                r_shift: self.r_shift,
                b_shift: Shift {
                    peak: b_peak,
                    down: self.b_down,
                },
                payload_len: payload.len() as u32,
                payload_crc: payload.crc32(),
            },
            side_bits: stream.bits.len(),
            modified,
            g_bits,
            g_bits_in_choices: in_choices,
            r_carriers: 0,
            r_flagged: 0,
            b_carriers: carriers,
            attempts: 0,
        };
        Ok((image, stats))
    }
}

/// Order in which the decoder tries B peaks: 0, 1, -1, 2, -2, ..., -128.
fn b_peak_trials() -> impl Iterator<Item = i32> {
    std::iter::once(0).chain((1..=128).flat_map(|m| [m, -m])).filter(|p| *p <= 127)
}

/// Extraction result.
#[derive(Debug, Clone)]
pub struct Extracted {
    pub payload: Payload,
    pub cover: ColorImage,
    pub header: EmbedHeader,
}

/// Recovers the payload and the exact cover.
pub fn extract(stego: &ColorImage) -> Result<Extracted, RdhError> {
    let p = Planes::of(stego);
    let grid = p.grid();
    let n = p.r.len();
    let par_r = fit_predictor_at(&p.r, &p.v, grid.anchors());
    let par_b = fit_predictor_at(&p.b, &p.v, grid.anchors());

    let mut frozen = vec![true; n];
    let mut window = vec![(0u8, 0u8); n];
    for i in grid.positions() {
        if let Some(s) = b_feasible(p.v[i], p.r[i]).filter(|s| s.1 > s.0) {
            frozen[i] = false;
            window[i] = s;
        }
    }

    let b_plane: Vec<i32> = p.b.iter().map(|&x| x as i32).collect();
    let mut found = None;
    'search: for peak in b_peak_trials() {
        for down in [false, true] {
            let shift = Shift { peak, down };
            let ex = hs_extract_channel(&b_plane, &p.v, p.height, p.width, &par_b, shift, &frozen, None)?;
            let mut rd = BitReader::new(&ex.bits);
            if rd.uint(32).ok() == Some(MAGIC as u64) {
                found = Some((shift, ex));
                break 'search;
            }
        }
    }
    let (b_shift, bx) = found.ok_or(RdhError::BadMagic)?;
    let mut rd = BitReader::new(&bx.bits);
    rd.uint(32)?;
    let version = rd.uint(8)? as u8;
    if version != VERSION {
        return Err(RdhError::UnsupportedVersion(version));
    }
    let r_down = rd.bit()?;
    let r_peak = rd.uint(16)? as u16 as i16 as i32;
    let r_shift = Shift { peak: r_peak, down: r_down };

    let b_pre = to_u8(&bx.plane)?;
    let edges: Vec<usize> = grid
        .positions()
        .filter(|&i| !frozen[i] && b_pre[i] == clamp_edge(window[i], b_shift.down))
        .collect();
    let clamped = rd.rle(edges.len())?;
    let mut b = b_pre;
    let step: i32 = if b_shift.down { -1 } else { 1 };
    for (&i, &c) in edges.iter().zip(&clamped) {
        if c {
            b[i] = (b[i] as i32 + step) as u8;
        }
    }

    let at_risk: Vec<usize> = grid
        .positions()
        .filter(|&i| r_at_risk(p.v[i], p.r[i], b[i], r_shift.sign()))
        .collect();
    let flags = rd.rle(at_risk.len())?;
    let tail_len = (rd.gamma()? - 1) as usize;
    let mut tail = Vec::with_capacity(tail_len.min(bx.bits.len()));
    for _ in 0..tail_len {
        tail.push(rd.bit()?);
    }
    let side_len = rd.pos;

    let mut skip_r = vec![false; n];
    for (&i, &f) in at_risk.iter().zip(&flags) {
        skip_r[i] = f;
    }
    let r_plane: Vec<i32> = p.r.iter().map(|&x| x as i32).collect();
    let rx = hs_extract_channel(&r_plane, &p.v, p.height, p.width, &par_r, r_shift, &skip_r, None)?;
    let mut rr = BitReader::new(&rx.bits);
    let len = rr.uint(32)? as usize;
    let crc = rr.uint(32)? as u32;
    if rx.bits.len() < R_HEADER_BITS + len {
        return Err(RdhError::StreamUnderflow);
    }
    let payload = Payload::new(rx.bits[R_HEADER_BITS..R_HEADER_BITS + len].to_vec());
    if payload.crc32() != crc {
        return Err(RdhError::CrcMismatch);
    }
    let r = to_u8(&rx.plane)?;

    // G recovery.
    enum Kind {
        Free(Candidates),
        Need(Candidates),
    }
    let mut g = p.g.clone();
    let mut kind: Vec<Option<Kind>> = (0..n).map(|_| None).collect();
    for i in grid.positions() {
        if (p.r[i], p.b[i]) == (r[i], b[i]) {
            continue;
        }
        let v = p.v[i];
        let oc = g_candidates(v, r[i], b[i]);
        let sc = g_candidates(v, p.r[i], p.b[i]);
        if oc.is_empty() || sc.index_of(p.g[i]).is_none() {
            return Err(RdhError::Corrupt("g candidates"));
        }
        if oc.len() == sc.len() {
            g[i] = oc.get(sc.index_of(p.g[i]).expect("checked"));
        } else if oc.len() == 1 {
            g[i] = oc.get(0);
            kind[i] = Some(Kind::Free(sc));
        } else {
            kind[i] = Some(Kind::Need(oc));
        }
    }
    let mut side_left = side_len;
    let mut carrier = bx.carriers.iter().zip(&bx.bits).peekable();
    let mut queued: VecDeque<usize> = VecDeque::new();
    let mut slots: VecDeque<usize> = VecDeque::new();
    let mut value: Vec<Option<bool>> = vec![None; n];
    for i in grid.positions() {
        if let Some((_, &bit)) = carrier.next_if(|(&c, _)| c == i) {
            if side_left > 0 {
                side_left -= 1;
            } else if let Some(j) = queued.pop_front() {
                value[j] = Some(bit);
            }
        }
        match &kind[i] {
            Some(Kind::Free(sc)) => {
                let chosen = sc.index_of(p.g[i]).expect("checked") == 1;
                if let Some(j) = queued.pop_back() {
                    value[j] = Some(chosen);
                } else {
                    slots.push_back(i);
                }
            }
            Some(Kind::Need(_)) => {
                if let Some(s) = slots.pop_front() {
                    let Some(Kind::Free(sc)) = &kind[s] else { unreachable!() };
                    value[i] = Some(sc.index_of(p.g[s]).expect("checked") == 1);
                } else {
                    queued.push_back(i);
                }
            }
            None => {}
        }
    }
    if side_left > 0 || queued.len() != tail.len() {
        return Err(RdhError::StreamUnderflow);
    }
    for (j, bit) in queued.into_iter().zip(tail) {
        value[j] = Some(bit);
    }
    for i in grid.positions() {
        if let Some(Kind::Need(oc)) = &kind[i] {
            g[i] = oc.get(value[i].expect("resolved") as usize);
        }
    }

    let cover = ColorImage::from_planes(p.height, p.width, &r, &g, &b).expect("same geometry");
    Ok(Extracted {
        payload,
        cover,
        header: EmbedHeader {
            version,
            r_shift,
            b_shift,
            payload_len: len as u32,
            payload_crc: crc,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::{synthetic_texture, to_grayscale};

    #[test]
    fn g_compensate_examples() {
        assert_eq!(g_compensate(100, 100, 100), Ok(100));
        assert_eq!(g_compensate(14, 0, 0), Ok(24));
        assert!(matches!(g_compensate(0, 255, 255), Err(RdhError::OutOfRange(_))));
        assert!(matches!(g_compensate(255, 0, 0), Err(RdhError::OutOfRange(_))));
    }

    #[test]
    fn g_candidates_examples() {
        assert_eq!(g_candidates(0, 0, 0).to_vec(), vec![0]);
        assert_eq!(g_candidates(14, 0, 0).to_vec(), vec![23, 24]);
        assert!(g_candidates(255, 0, 0).is_empty());
    }

    #[test]
    fn candidates_match_brute_force_scan() {
        for v in (0..=255u8).step_by(3) {
            for r in (0..=255u8).step_by(7) {
                for b in (0..=255u8).step_by(5) {
                    let scan: Vec<u8> = (0..=255u8).filter(|&g| gray_value(r, g, b) == v).collect();
                    assert_eq!(g_candidates(v, r, b).to_vec(), scan, "v={v} r={r} b={b}");
                }
            }
        }
    }

    #[test]
    fn feasible_b_set_is_an_interval() {
        for v in (0..=255u8).step_by(5) {
            for r in (0..=255u8).step_by(3) {
                let ok: Vec<u8> = (0..=255u8).filter(|&b| !g_candidates(v, r, b).is_empty()).collect();
                match b_feasible(v, r) {
                    None => assert!(ok.is_empty()),
                    Some((lo, hi)) => assert_eq!(ok, (lo..=hi).collect::<Vec<_>>()),
                }
            }
        }
    }

    #[test]
    fn predict_examples() {
        let id = PredictorParams { a: 0, b: Q, c: 0 };
        assert_eq!(predict(&id, 100, 90, 95), 95);
        assert_eq!(predict(&id, 92, 90, 95), 92);
        assert_eq!(predict(&id, 80, 90, 95), 90);
    }

    #[test]
    fn fit_examples() {
        let v: Vec<u8> = (0..64).map(|i| (i * 3 % 200) as u8).collect();
        assert_eq!(fit_predictor(&v, &v), PredictorParams { a: 0, b: Q, c: 0 });
        let c = vec![77u8; 64];
        let flat = vec![40u8; 64];
        assert_eq!(fit_predictor(&c, &flat), PredictorParams { a: 77 * Q, b: 0, c: 0 });
        // Two distinct v values are degenerate too.
        let two: Vec<u8> = (0..64).map(|i| if i % 2 == 0 { 10 } else { 20 }).collect();
        let plane: Vec<u8> = (0..64).map(|i| i as u8).collect();
        let got = fit_predictor(&plane, &two);
        assert_eq!((got.b, got.c), (0, 0));
        assert_eq!(got.a, (31.5 * Q as f64) as i64);
    }

    #[test]
    fn bit_codes_roundtrip() {
        let mut w = BitWriter::default();
        w.uint(0xABC, 12);
        for n in [1u64, 2, 3, 7, 8, 1000, 1 << 30] {
            w.gamma(n);
        }
        let runs = [true, true, false, true, false, false, false, true];
        w.rle(&runs);
        w.rle(&[]);
        let mut r = BitReader::new(&w.bits);
        assert_eq!(r.uint(12).unwrap(), 0xABC);
        for n in [1u64, 2, 3, 7, 8, 1000, 1 << 30] {
            assert_eq!(r.gamma().unwrap(), n);
        }
        assert_eq!(r.rle(runs.len()).unwrap(), runs);
        assert_eq!(r.rle(0).unwrap(), Vec::<bool>::new());
        assert_eq!(r.bit(), Err(RdhError::StreamUnderflow));
    }

    #[test]
    fn payload_bytes() {
        let p = Payload::from_bytes(&[0b1010_0001, 0xFF]);
        assert_eq!(p.len(), 16);
        assert!(p.bits[0] && !p.bits[1] && p.bits[7]);
        assert_eq!(p.to_bytes(), vec![0b1010_0001, 0xFF]);
        let odd = Payload::new(vec![true, true, true]);
        assert_eq!(odd.to_bytes(), vec![0b1110_0000]);
        assert_eq!(Payload::from_bytes(b"123456789").crc32(), 0xCBF4_3926);
    }

    #[test]
    fn peak_order_prefers_light_tails() {
        let hist: BTreeMap<i32, usize> = [(-1, 30), (0, 50), (1, 40), (2, 10)].into_iter().collect();
        assert_eq!(peak_order(&hist, 20, -5..=5), vec![(1, 40), (0, 50), (-1, 30)]);
        assert_eq!(peak_order(&hist, 45, -5..=5), vec![(0, 50)]);
        assert!(peak_order(&hist, 60, -5..=5).is_empty());
    }

    fn hs_roundtrip(plane: &[u8], v: &[u8], h: usize, w: usize, shift: Shift, bits: &[bool]) -> usize {
        let params = fit_predictor(plane, v);
        let skip = vec![false; h * w];
        let em = hs_embed_channel(plane, v, h, w, &params, shift, bits, &skip, |_, nv| (0..=255).contains(&nv));
        let mut skip_x = skip.clone();
        let grid = Grid { height: h, width: w, v };
        for (i, &f) in grid.positions().zip(&em.flags) {
            skip_x[i] = f;
        }
        let ex = hs_extract_channel(&em.plane, v, h, w, &params, shift, &skip_x, Some(em.consumed)).unwrap();
        assert_eq!(ex.plane, plane.iter().map(|&x| x as i32).collect::<Vec<_>>());
        assert_eq!(&ex.bits[..], &bits[..em.consumed]);
        em.carriers
    }

    #[test]
    fn hs_constant_plane_carries_everywhere() {
        let (h, w) = (9, 11);
        let plane = vec![50u8; h * w];
        let v = vec![60u8; h * w];
        let bits = seeded::bits(4, 200);
        let carriers = hs_roundtrip(&plane, &v, h, w, Shift { peak: 0, down: false }, &bits);
        assert_eq!(carriers, (h - 1) * (w - 1));
    }

    #[test]
    fn hs_zero_bits_still_restores() {
        let img = synthetic_texture(16, 16, 2).unwrap();
        let g = to_grayscale(&img);
        for down in [false, true] {
            hs_roundtrip(&img.channel(0), &g.values, 16, 16, Shift { peak: 1, down }, &[]);
        }
    }

    #[test]
    fn hs_extract_count_underflow() {
        let plane = vec![50u8; 64];
        let v = vec![50u8; 64];
        let params = fit_predictor(&plane, &v);
        let skip = vec![false; 64];
        let p32: Vec<i32> = plane.iter().map(|&x| x as i32).collect();
        let s = Shift { peak: 5, down: false };
        let ex = hs_extract_channel(&p32, &v, 8, 8, &params, s, &skip, Some(0)).unwrap();
        assert!(ex.bits.is_empty());
        assert_eq!(
            hs_extract_channel(&p32, &v, 8, 8, &params, s, &skip, Some(1)).unwrap_err(),
            RdhError::StreamUnderflow
        );
    }

    fn roundtrip(img: &ColorImage, bits: usize, seed: u64) -> Stego {
        let payload = Payload::random(bits, seed);
        let stego = embed(img, &payload).unwrap();
        assert_eq!(to_grayscale(&stego.image), to_grayscale(img));
        let out = extract(&stego.image).unwrap();
        assert_eq!(out.payload, payload);
        assert_eq!(&out.cover, img);
        assert_eq!(out.header, stego.stats.header);
        stego
    }

    #[test]
    fn embed_extract_textures() {
        for (i, side) in [24usize, 32, 48, 64].into_iter().enumerate() {
            let img = synthetic_texture(side, side + 3, 100 + i as u64).unwrap();
            roundtrip(&img, side * (side + 3) / 20, i as u64);
        }
    }

    #[test]
    fn empty_payload_is_valid_stego() {
        let img = synthetic_texture(24, 24, 5).unwrap();
        let s = roundtrip(&img, 0, 0);
        assert_eq!(s.stats.header.payload_len, 0);
    }

    #[test]
    fn constant_cover_capacity() {
        let img = ColorImage::from_fn(12, 10, |_, _| [90, 120, 30]).unwrap();
        assert_eq!(capacity(&img), 11 * 9 - R_HEADER_BITS);
        roundtrip(&img, capacity(&img), 1);
    }

    #[test]
    fn over_capacity_is_rejected() {
        let img = synthetic_texture(32, 32, 8).unwrap();
        let cap = capacity(&img);
        let err = embed(&img, &Payload::random(cap + 1, 0)).unwrap_err();
        assert_eq!(err, RdhError::InsufficientCapacity { needed: cap + 1 });
    }

    #[test]
    fn plain_image_has_no_magic() {
        let img = synthetic_texture(20, 20, 77).unwrap();
        assert_eq!(extract(&img).unwrap_err(), RdhError::BadMagic);
    }

    #[test]
    fn extreme_colors_roundtrip() {
        // Saturated corners stress the feasibility windows.
        let img = ColorImage::from_fn(24, 24, |y, x| match (y / 6 + x / 6) % 4 {
            0 => [255, 0, 255],
            1 => [0, 255, 0],
            2 => [0, 0, 0],
            _ => [255, 255, 255],
        })
        .unwrap();
        roundtrip(&img, 16, 3);
    }

    #[test]
    fn flipped_payload_bit_fails_crc() {
        let img = synthetic_texture(48, 48, 31).unwrap();
        let payload = Payload::random(100, 9);
        let stego = embed(&img, &payload).unwrap();
        let sh = stego.stats.header.r_shift;
        let p = Planes::of(&stego.image);
        let grid = p.grid();
        let params = fit_predictor_at(&p.r, &p.v, grid.anchors());

        // Rebuild the R flags by replaying the R pass on the cover.
        let c = Planes::of(&img);
        let mut stream = BitWriter::default();
        stream.uint(100, 32);
        stream.uint(payload.crc32() as u64, 32);
        stream.bits.extend_from_slice(&payload.bits);
        let hs = hs_embed_channel(&c.r, &c.v, 48, 48, &params, sh, &stream.bits, &vec![false; 48 * 48], |i, nr| {
            !r_at_risk(c.v[i], (nr - sh.sign()) as u8, c.b[i], sh.sign())
        });
        assert_eq!(hs.flags.iter().filter(|&&f| f).count(), stego.stats.r_flagged);
        let mut skip = vec![false; 48 * 48];
        for (i, &f) in grid.positions().zip(&hs.flags) {
            skip[i] = f;
        }
        let plane: Vec<i32> = p.r.iter().map(|&x| x as i32).collect();
        let ex = hs_extract_channel(&plane, &p.v, 48, 48, &params, sh, &skip, None).unwrap();
        assert_eq!(&ex.bits[R_HEADER_BITS..R_HEADER_BITS + 100], &payload.bits[..]);
        let d = sh.sign();
        let mut tampered = None;
        for (k, (&i, &bit)) in ex.carriers.iter().zip(&ex.bits).enumerate().skip(R_HEADER_BITS + 10) {
            if bit {
                continue;
            }
            let (r, b, v) = (p.r[i], p.b[i], p.v[i]);
            let nr = r as i32 + d;
            if !(0..=255).contains(&nr) {
                continue;
            }
            let nr = nr as u8;
            let c = g_candidates(v, nr, b);
            let same_ctx = b_feasible(v, nr) == b_feasible(v, r) && r_at_risk(v, nr, b, d) == r_at_risk(v, r, b, d);
            if !c.is_empty() && same_ctx && !r_at_risk(v, r, b, d) {
                let mut t = stego.image.clone();
                t.set_pixel(i / 48, i % 48, [nr, c.get(0), b]);
                tampered = Some((k, t));
                break;
            }
        }
        let (k, t) = tampered.expect("some carrier admits a clean flip");
        assert!(k < R_HEADER_BITS + 100);
        assert_eq!(extract(&t).unwrap_err(), RdhError::CrcMismatch);
    }
}
