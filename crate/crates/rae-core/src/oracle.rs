//! Score oracles: the interface the attack queries, deterministic toy
//! victims, a budget-enforcing counter, and an HTTP client.
//!
//! # Built-in victims
//!
//! Inputs are flattened in interleaved RGB order and centred, `z = x - 0.5`.
//!
//! * linear: `softmax(W z + b)`
//! * mlp: `softmax(W2 tanh(W1 z + b1) + b2)` with [`MLP_HIDDEN`] hidden units
//!
//! Weights are drawn from the crate PRNG seeded with the victim seed, in the
//! order `W` (row-major, class by input), `b` for the linear victim and
//! `W1, b1, W2, b2` for the mlp. Every entry is `scale * (2u - 1)` with `u` a
//! unit float; the scales are listed next to the constructors. Seed 0 yields
//! all-zero parameters and therefore the uniform distribution.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imagecore::{png_bytes, quantize, FloatImage};
use crate::seeded;

/// Allowed deviation of a probability row's sum from 1.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-5;

pub const MLP_HIDDEN: usize = 32;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("query budget of {0} exhausted")]
    BudgetExhausted(u64),
    #[error("transport: {0}")]
    Transport(String),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("bad probabilities: {0}")]
    BadProbabilities(String),
    #[error("input is {got_h}x{got_w}, victim expects {want_h}x{want_w}")]
    InputShape {
        got_h: usize,
        got_w: usize,
        want_h: usize,
        want_w: usize,
    },
}

/// Class probabilities: at least two non-negative entries summing to one.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(probs: Vec<f64>) -> Result<Self, OracleError> {
        if probs.len() < 2 {
            return Err(OracleError::BadProbabilities(format!(
                "{} classes, need at least 2",
                probs.len()
            )));
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(OracleError::BadProbabilities(format!("entry {p}")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(OracleError::BadProbabilities(format!("sum {sum}")));
        }
        Ok(Self(probs))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, k: usize) -> f64 {
        self.0[k]
    }

    /// Most probable class, lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }
}

/// Anything that maps an image to class probabilities.
pub trait ScoreOracle: Send + Sync {
    fn score(&self, x: &FloatImage) -> Result<ProbVector, OracleError>;

    /// Number of classes. Remote oracles report 0 until the first response.
    fn class_count(&self) -> usize;
}

impl<T: ScoreOracle + ?Sized> ScoreOracle for &T {
    fn score(&self, x: &FloatImage) -> Result<ProbVector, OracleError> {
        (**self).score(x)
    }
    fn class_count(&self) -> usize {
        (**self).class_count()
    }
}

impl<T: ScoreOracle + ?Sized> ScoreOracle for Box<T> {
    fn score(&self, x: &FloatImage) -> Result<ProbVector, OracleError> {
        (**self).score(x)
    }
    fn class_count(&self) -> usize {
        (**self).class_count()
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn draw(rng: &mut seeded::SeededRng, n: usize, scale: f64, zero: bool) -> Vec<f64> {
    if zero {
        return vec![0.0; n];
    }
    (0..n).map(|_| scale * (2.0 * seeded::unit(rng) - 1.0)).collect()
}

fn affine(w: &[f64], b: &[f64], z: &[f64]) -> Vec<f64> {
    let d = z.len();
    b.iter()
        .enumerate()
        .map(|(k, &bk)| bk + w[k * d..(k + 1) * d].iter().zip(z).map(|(a, x)| a * x).sum::<f64>())
        .collect()
}

#[derive(Debug, Clone)]
struct Shape {
    height: usize,
    width: usize,
}

impl Shape {
    fn centred(&self, x: &FloatImage) -> Result<Vec<f64>, OracleError> {
        if x.height() != self.height || x.width() != self.width {
            return Err(OracleError::InputShape {
                got_h: x.height(),
                got_w: x.width(),
                want_h: self.height,
                want_w: self.width,
            });
        }
        Ok(x.as_slice().iter().map(|v| v - 0.5).collect())
    }
}

/// `softmax(W z + b)`.
#[derive(Debug, Clone)]
pub struct LinearVictim {
    shape: Shape,
    classes: usize,
    w: Vec<f64>,
    b: Vec<f64>,
}

/// Linear victim. Scales: `W` entries `4 / sqrt(D)`, biases `0.5`, where
/// `D = 3 H W`.
pub fn linear_victim(seed: u64, classes: usize, height: usize, width: usize) -> LinearVictim {
    assert!(classes >= 2, "need at least two classes");
    let d = 3 * height * width;
    let zero = seed == 0;
    let mut rng = seeded::rng(seed);
    let w = draw(&mut rng, classes * d, 4.0 / (d as f64).sqrt(), zero);
    let b = draw(&mut rng, classes, 0.5, zero);
    LinearVictim {
        shape: Shape { height, width },
        classes,
        w,
        b,
    }
}

impl ScoreOracle for LinearVictim {
    fn score(&self, x: &FloatImage) -> Result<ProbVector, OracleError> {
        let z = self.shape.centred(x)?;
        ProbVector::new(softmax(&affine(&self.w, &self.b, &z)))
    }

    fn class_count(&self) -> usize {
        self.classes
    }
}

/// One hidden tanh layer.
#[derive(Debug, Clone)]
pub struct MlpVictim {
    shape: Shape,
    classes: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

/// MLP victim. Scales: `W1` entries `6 / sqrt(D)`, `b1` 0.5, `W2` entries
/// `6 / sqrt(MLP_HIDDEN)`, `b2` 0.5.
pub fn mlp_victim(seed: u64, classes: usize, height: usize, width: usize) -> MlpVictim {
    assert!(classes >= 2, "need at least two classes");
    let d = 3 * height * width;
    let zero = seed == 0;
    let mut rng = seeded::rng(seed);
    let w1 = draw(&mut rng, MLP_HIDDEN * d, 6.0 / (d as f64).sqrt(), zero);
    let b1 = draw(&mut rng, MLP_HIDDEN, 0.5, zero);
    let w2 = draw(&mut rng, classes * MLP_HIDDEN, 6.0 / (MLP_HIDDEN as f64).sqrt(), zero);
    let b2 = draw(&mut rng, classes, 0.5, zero);
    MlpVictim {
        shape: Shape { height, width },
        classes,
        w1,
        b1,
        w2,
        b2,
    }
}

impl ScoreOracle for MlpVictim {
    fn score(&self, x: &FloatImage) -> Result<ProbVector, OracleError> {
        let z = self.shape.centred(x)?;
        let hidden: Vec<f64> = affine(&self.w1, &self.b1, &z).into_iter().map(f64::tanh).collect();
        ProbVector::new(softmax(&affine(&self.w2, &self.b2, &hidden)))
    }

    fn class_count(&self) -> usize {
        self.classes
    }
}

/// Counts queries against a budget. Failed calls are not counted.
pub struct CountingOracle<'a> {
    inner: &'a dyn ScoreOracle,
    used: AtomicU64,
    budget: u64,
}

impl<'a> CountingOracle<'a> {
    pub fn new(inner: &'a dyn ScoreOracle, budget: u64) -> Self {
        Self {
            inner,
            used: AtomicU64::new(0),
            budget,
        }
    }

    pub fn used(&self) -> u64 {
        self.used.load(Ordering::SeqCst)
    }

    pub fn budget(&self) -> u64 {
        self.budget
    }

    pub fn remaining(&self) -> u64 {
        self.budget - self.used()
    }

    pub fn counted_score(&self, x: &FloatImage) -> Result<ProbVector, OracleError> {
        // Reserve a slot first so concurrent callers can never overshoot.
        let reserved = self
            .used
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |u| (u < self.budget).then_some(u + 1));
        if reserved.is_err() {
            return Err(OracleError::BudgetExhausted(self.budget));
        }
        match self.inner.score(x) {
            Ok(p) => Ok(p),
            Err(e) => {
                self.used.fetch_sub(1, Ordering::SeqCst);
                Err(e)
            }
        }
    }
}

impl ScoreOracle for CountingOracle<'_> {
    fn score(&self, x: &FloatImage) -> Result<ProbVector, OracleError> {
        self.counted_score(x)
    }

    fn class_count(&self) -> usize {
        self.inner.class_count()
    }
}

// ==================== Remote ====================

#[derive(Serialize)]
struct WireImage<'a> {
    encoding: &'a str,
    data: String,
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    images: Vec<WireImage<'a>>,
}

#[derive(Deserialize)]
struct ScoreResponse {
    #[allow(dead_code)]
    model: String,
    scores: Vec<Vec<f64>>,
}

/// Client for `POST /v1/scores`. Images are quantized to 8 bits and sent as
/// base64 PNG, one per request.
pub struct RemoteOracle {
    endpoint: String,
    agent: ureq::Agent,
    classes: AtomicU64,
    last_model: Mutex<Option<String>>,
}

impl RemoteOracle {
    /// `base` is the server root, for example `http://127.0.0.1:8000`.
    pub fn new(base: &str) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout_connect(Duration::from_secs(10))
            .timeout(Duration::from_secs(120))
            .build();
        Self {
            endpoint: format!("{}/v1/scores", base.trim_end_matches('/')),
            agent,
            classes: AtomicU64::new(0),
            last_model: Mutex::new(None),
        }
    }

    /// Model id from the most recent response.
    pub fn model(&self) -> Option<String> {
        self.last_model.lock().expect("poisoned").clone()
    }

    pub fn remote_score(&self, x: &FloatImage) -> Result<ProbVector, OracleError> {
        let png = png_bytes(&quantize(x));
        let body = ScoreRequest {
            images: vec![WireImage {
                encoding: "png_base64",
                data: base64::engine::general_purpose::STANDARD.encode(png),
            }],
        };
        let body = serde_json::to_string(&body).expect("request serializes");
        let resp = self
            .agent
            .post(&self.endpoint)
            .set("Content-Type", "application/json")
            .send_string(&body);
        let resp = match resp {
            Ok(r) => r,
            Err(ureq::Error::Status(code, r)) => {
                let text = r.into_string().unwrap_or_default();
                return Err(OracleError::Protocol(format!("HTTP {code}: {text}")));
            }
            Err(ureq::Error::Transport(t)) => return Err(OracleError::Transport(t.to_string())),
        };
        let text = resp
            .into_string()
            .map_err(|e| OracleError::Transport(e.to_string()))?;
        let parsed: ScoreResponse =
            serde_json::from_str(&text).map_err(|e| OracleError::Protocol(e.to_string()))?;
        if parsed.scores.len() != 1 {
            return Err(OracleError::Protocol(format!(
                "expected 1 score row, got {}",
                parsed.scores.len()
            )));
        }
        let row = parsed.scores.into_iter().next().expect("one row");
        let probs = ProbVector::new(row)?;
        self.classes.store(probs.len() as u64, Ordering::SeqCst);
        *self.last_model.lock().expect("poisoned") = Some(parsed.model);
        Ok(probs)
    }
}

impl ScoreOracle for RemoteOracle {
    fn score(&self, x: &FloatImage) -> Result<ProbVector, OracleError> {
        self.remote_score(x)
    }

    fn class_count(&self) -> usize {
        self.classes.load(Ordering::SeqCst) as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::{dequantize, synthetic_texture};

    fn input(seed: u64) -> FloatImage {
        dequantize(&synthetic_texture(8, 8, seed).unwrap())
    }

    #[test]
    fn zero_seed_is_uniform() {
        let lin = linear_victim(0, 4, 8, 8);
        let mlp = mlp_victim(0, 5, 8, 8);
        for s in 0..3 {
            assert!(lin.score(&input(s)).unwrap().as_slice().iter().all(|&p| (p - 0.25).abs() < 1e-15));
            assert!(mlp.score(&input(s)).unwrap().as_slice().iter().all(|&p| (p - 0.2).abs() < 1e-15));
        }
    }

    #[test]
    fn victims_normalize_and_repeat() {
        let lin = linear_victim(3, 10, 8, 8);
        let mlp = mlp_victim(3, 10, 8, 8);
        for s in 0..20 {
            let x = input(s);
            for o in [&lin as &dyn ScoreOracle, &mlp] {
                let p = o.score(&x).unwrap();
                let sum: f64 = p.as_slice().iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
                assert_eq!(p, o.score(&x).unwrap());
            }
        }
    }

    #[test]
    fn victims_are_not_constant() {
        let mlp = mlp_victim(11, 10, 8, 8);
        let labels: std::collections::HashSet<_> =
            (0..40).map(|s| mlp.score(&input(s)).unwrap().argmax()).collect();
        assert!(labels.len() > 1);
    }

    #[test]
    fn victim_rejects_wrong_shape() {
        let lin = linear_victim(1, 3, 8, 8);
        let x = dequantize(&synthetic_texture(9, 8, 0).unwrap());
        assert!(matches!(lin.score(&x), Err(OracleError::InputShape { .. })));
    }

    #[test]
    fn prob_vector_validation() {
        assert!(ProbVector::new(vec![0.7, 0.3]).is_ok());
        assert!(matches!(ProbVector::new(vec![0.7, 0.7]), Err(OracleError::BadProbabilities(_))));
        assert!(ProbVector::new(vec![1.0]).is_err());
        assert!(ProbVector::new(vec![1.5, -0.5]).is_err());
        assert!(ProbVector::new(vec![0.5, 0.5 + 0.9e-5]).is_ok());
        assert!(ProbVector::new(vec![0.5, 0.5 + 1.1e-5]).is_err());
        assert_eq!(ProbVector::new(vec![0.4, 0.4, 0.2]).unwrap().argmax(), 0);
    }

    #[test]
    fn counting_and_budget() {
        let v = linear_victim(1, 3, 8, 8);
        let zero = CountingOracle::new(&v, 0);
        assert!(matches!(zero.counted_score(&input(0)), Err(OracleError::BudgetExhausted(0))));
        assert_eq!(zero.used(), 0);

        let c = CountingOracle::new(&v, 5);
        for n in 1..=5 {
            c.counted_score(&input(n)).unwrap();
            assert_eq!(c.used(), n);
        }
        assert!(c.counted_score(&input(0)).is_err());
        assert_eq!(c.used(), 5);
    }

    struct Failing;
    impl ScoreOracle for Failing {
        fn score(&self, _: &FloatImage) -> Result<ProbVector, OracleError> {
            Err(OracleError::Transport("down".into()))
        }
        fn class_count(&self) -> usize {
            2
        }
    }

    #[test]
    fn failed_call_is_not_counted() {
        let c = CountingOracle::new(&Failing, 3);
        assert!(c.counted_score(&input(0)).is_err());
        assert_eq!(c.used(), 0);
    }

    #[test]
    fn counter_is_exact_under_concurrency() {
        let v = linear_victim(2, 3, 8, 8);
        let c = CountingOracle::new(&v, 1000);
        let x = input(1);
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| {
                    for _ in 0..200 {
                        let _ = c.counted_score(&x);
                    }
                });
            }
        });
        assert_eq!(c.used(), 1000);
    }
}
