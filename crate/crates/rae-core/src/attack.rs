//! Beam-search black-box attack over low-frequency DCT directions.
//!
//! Each random step draws a fresh direction `q` and tries `+αq`, then `-αq`,
//! accepting the first that improves the objective. Accepted steps record
//! their gain ratio in a beam recorder; every `n` random steps the best
//! recorded direction is re-applied with step `kα` at no query cost.
//! With the beam disabled this is the SimBA-DCT baseline.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dctspace::{DctBasis, DctError, DirectionSampler, FrequencyFraction, FrequencyIndex};
use crate::imagecore::{dequantize, quantize, ColorImage, FloatImage};
use crate::oracle::{CountingOracle, OracleError, ProbVector, ScoreOracle};

/// Floor for the gain-ratio denominator.
pub const RATIO_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode", content = "class")]
pub enum Goal {
    /// Push the victim to this class.
    Targeted(usize),
    /// Move the victim off the true class.
    Untargeted,
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("target class equals the true class {0}")]
    TargetIsTrueClass(usize),
    #[error("class {0} out of range for {1} classes")]
    ClassOutOfRange(usize, usize),
    #[error("step size must be positive and finite")]
    StepSize,
    #[error("beam size must be at least 1")]
    BeamSize,
    #[error("decay must lie in (0, 1]")]
    Decay,
    #[error("budget must be at least 2")]
    Budget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub goal: Goal,
    pub true_class: usize,
    /// α
    pub step_size: f64,
    /// n, random steps between beam moves
    pub beam_size: usize,
    /// k, beam moves use step `k * α`
    pub decay: f64,
    pub budget: u64,
    /// `None` picks [`FrequencyFraction::default_for`] the image size.
    pub frequency_fraction: Option<FrequencyFraction>,
    pub seed: u64,
    pub beam_enabled: bool,
}

impl AttackConfig {
    pub fn targeted(true_class: usize, target: usize) -> Self {
        Self {
            goal: Goal::Targeted(target),
            true_class,
            ..Self::default()
        }
    }

    pub fn untargeted(true_class: usize) -> Self {
        Self {
            goal: Goal::Untargeted,
            true_class,
            ..Self::default()
        }
    }

    /// 2000 queries for images with a side under 64 pixels, 20000 otherwise.
    pub fn default_budget(height: usize, width: usize) -> u64 {
        if height.min(width) < 64 {
            2000
        } else {
            20000
        }
    }

    pub fn validate(&self, classes: Option<usize>) -> Result<(), ConfigError> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(ConfigError::StepSize);
        }
        if self.beam_size == 0 {
            return Err(ConfigError::BeamSize);
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(ConfigError::Decay);
        }
        if self.budget < 2 {
            return Err(ConfigError::Budget);
        }
        if let Goal::Targeted(y) = self.goal {
            if y == self.true_class {
                return Err(ConfigError::TargetIsTrueClass(y));
            }
        }
        if let Some(k) = classes.filter(|&k| k > 0) {
            let worst = match self.goal {
                Goal::Targeted(y) => y.max(self.true_class),
                Goal::Untargeted => self.true_class,
            };
            if worst >= k {
                return Err(ConfigError::ClassOutOfRange(worst, k));
            }
        }
        Ok(())
    }

    pub fn is_success(&self, p: &ProbVector) -> bool {
        match self.goal {
            Goal::Targeted(y) => p.argmax() == y,
            Goal::Untargeted => p.argmax() != self.true_class,
        }
    }
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            goal: Goal::Untargeted,
            true_class: 0,
            step_size: 0.2,
            beam_size: 3,
            decay: 1.0 / 3.0,
            budget: 2000,
            frequency_fraction: None,
            seed: 0,
            beam_enabled: true,
        }
    }
}

/// Targeted: `p[y]`. Untargeted: `1 - p[true]`.
pub fn objective(p: &ProbVector, cfg: &AttackConfig) -> f64 {
    match cfg.goal {
        Goal::Targeted(y) => p.get(y),
        Goal::Untargeted => 1.0 - p.get(cfg.true_class),
    }
}

/// A recorded direction with its sign.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SignedDirection {
    pub index: FrequencyIndex,
    pub sign: i8,
}

/// Gain ratios of the accepted steps since the last beam move, in insertion
/// order.
#[derive(Debug, Clone, Default)]
pub struct BeamRecorder {
    entries: Vec<(SignedDirection, f64)>,
}

impl BeamRecorder {
    pub fn record(&mut self, dir: SignedDirection, ratio: f64) {
        self.entries.push((dir, ratio));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(SignedDirection, f64)] {
        &self.entries
    }

    /// Entry with the largest ratio, the earliest one on ties.
    pub fn best(&self) -> Option<(SignedDirection, f64)> {
        let mut best: Option<(SignedDirection, f64)> = None;
        for &(d, r) in &self.entries {
            if best.is_none_or(|(_, b)| r > b) {
                best = Some((d, r));
            }
        }
        best
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    /// Objective of the unperturbed input.
    Base,
    /// `+αq` accepted.
    Add,
    /// `-αq` accepted.
    Sub,
    /// Candidate not accepted.
    Reject,
    /// Candidate did not improve the objective but already satisfies the
    /// success predicate; adopted so it can be confirmed.
    Hit,
    /// Query on the quantized 8-bit image.
    Confirm,
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Action::Base => "base",
            Action::Add => "add",
            Action::Sub => "sub",
            Action::Reject => "reject",
            Action::Hit => "hit",
            Action::Confirm => "confirm",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRecord {
    /// 1-based.
    pub query_index: u64,
    pub action: Action,
    pub objective: f64,
}

/// One record per oracle query.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AttackTrace {
    pub records: Vec<TraceRecord>,
    /// Number of random steps after which a beam move was applied.
    pub beam_moves: Vec<u64>,
}

impl AttackTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn push(&mut self, action: Action, objective: f64) {
        let query_index = self.records.len() as u64 + 1;
        self.records.push(TraceRecord {
            query_index,
            action,
            objective,
        });
    }

    /// CSV with header `query_index,action,objective`.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "query_index,action,objective")?;
        for r in &self.records {
            writeln!(out, "{},{},{}", r.query_index, r.action, r.objective)?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii")
    }

    /// Checks that accepted objectives (`add`/`sub`) strictly improve on the
    /// running objective, which only `base` and `confirm` queries may reset.
    /// Returns the first offending query index.
    pub fn check_monotone(&self) -> Result<(), u64> {
        let mut current: Option<f64> = None;
        for r in &self.records {
            match r.action {
                Action::Base | Action::Confirm | Action::Hit => current = Some(r.objective),
                Action::Add | Action::Sub => {
                    if current.is_some_and(|c| r.objective <= c) {
                        return Err(r.query_index);
                    }
                    current = Some(r.objective);
                }
                Action::Reject => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Success,
    BudgetExhausted,
    DirectionsExhausted,
    OracleFailure,
}

#[derive(Debug, Clone, Serialize)]
pub struct AttackOutcome {
    pub success: bool,
    pub stop_reason: StopReason,
    /// Quantized `clamp(x + δ)`.
    #[serde(skip)]
    pub adversarial_image: ColorImage,
    pub queries_used: u64,
    /// Norm of the search accumulator δ.
    pub delta_l2: f64,
    /// Norm of `dequantize(adversarial_image) - x`, the perturbation that
    /// actually ships.
    pub effective_l2: f64,
    pub random_steps: u64,
    pub accepted_steps: u64,
    /// Label of the final confirmation query, if one succeeded.
    pub final_label: Option<usize>,
    pub oracle_error: Option<String>,
    #[serde(skip)]
    pub trace: AttackTrace,
}

/// Mutable state of one run.
pub struct AttackState {
    pub x: Vec<f64>,
    pub delta: Vec<f64>,
    /// Objective of the last accepted evaluation, `None` before the first
    /// query. Beam moves do not refresh it.
    pub objective: Option<f64>,
    pub recorder: BeamRecorder,
    pub trace: AttackTrace,
    pub random_steps: u64,
    pub accepted_steps: u64,
    height: usize,
    width: usize,
}

impl AttackState {
    pub fn new(x: &FloatImage) -> Self {
        Self {
            x: x.as_slice().to_vec(),
            delta: vec![0.0; x.as_slice().len()],
            objective: None,
            recorder: BeamRecorder::default(),
            trace: AttackTrace::default(),
            random_steps: 0,
            accepted_steps: 0,
            height: x.height(),
            width: x.width(),
        }
    }

    fn image_with(&self, dir: Option<(&[f64], f64)>) -> FloatImage {
        let mut v: Vec<f64> = self.x.iter().zip(&self.delta).map(|(a, d)| a + d).collect();
        if let Some((q, s)) = dir {
            for (vi, qi) in v.iter_mut().zip(q) {
                *vi += s * qi;
            }
        }
        FloatImage::new(self.height, self.width, v).expect("finite by construction")
    }

    pub fn current_image(&self) -> FloatImage {
        self.image_with(None)
    }

    fn add(&mut self, q: &[f64], s: f64) {
        for (d, qi) in self.delta.iter_mut().zip(q) {
            *d += s * qi;
        }
    }

    pub fn delta_l2(&self) -> f64 {
        self.delta.iter().map(|d| d * d).sum::<f64>().sqrt()
    }
}

enum Halt {
    Budget,
    Directions,
    Oracle(OracleError),
}

impl From<OracleError> for Halt {
    fn from(e: OracleError) -> Self {
        match e {
            OracleError::BudgetExhausted(_) => Halt::Budget,
            other => Halt::Oracle(other),
        }
    }
}

impl From<DctError> for Halt {
    fn from(_: DctError) -> Self {
        Halt::Directions
    }
}

/// What a step ended with.
enum StepResult {
    Continue,
    /// The point now held in the state satisfies the success predicate.
    Hit,
}

struct Attack<'a> {
    cfg: &'a AttackConfig,
    oracle: &'a CountingOracle<'a>,
    basis: DctBasis,
    sampler: DirectionSampler,
}

impl Attack<'_> {
    fn query(&self, img: &FloatImage) -> Result<ProbVector, Halt> {
        Ok(self.oracle.counted_score(img)?)
    }

    /// Measures the starting objective once.
    fn ensure_base(&self, st: &mut AttackState) -> Result<StepResult, Halt> {
        if st.objective.is_some() {
            return Ok(StepResult::Continue);
        }
        let p = self.query(&st.current_image())?;
        let j = objective(&p, self.cfg);
        st.trace.push(Action::Base, j);
        st.objective = Some(j);
        Ok(if self.cfg.is_success(&p) {
            StepResult::Hit
        } else {
            StepResult::Continue
        })
    }

    fn random_step(&mut self, st: &mut AttackState) -> Result<StepResult, Halt> {
        if let StepResult::Hit = self.ensure_base(st)? {
            return Ok(StepResult::Hit);
        }
        let idx = self.sampler.next_direction()?;
        let q = self.basis.direction(idx)?;
        let alpha = self.cfg.step_size;
        st.random_steps += 1;
        for sign in [1i8, -1] {
            let j = st.objective.expect("base measured");
            let s = alpha * sign as f64;
            let p = self.query(&st.image_with(Some((&q, s))))?;
            let jn = objective(&p, self.cfg);
            let hit = self.cfg.is_success(&p);
            if jn > j {
                st.add(&q, s);
                st.objective = Some(jn);
                st.accepted_steps += 1;
                st.recorder.record(SignedDirection { index: idx, sign }, jn / j.max(RATIO_FLOOR));
                st.trace.push(if sign > 0 { Action::Add } else { Action::Sub }, jn);
                return Ok(if hit { StepResult::Hit } else { StepResult::Continue });
            }
            if hit {
                st.add(&q, s);
                st.objective = Some(jn);
                st.trace.push(Action::Hit, jn);
                return Ok(StepResult::Hit);
            }
            st.trace.push(Action::Reject, jn);
        }
        Ok(StepResult::Continue)
    }

    fn beam_step(&self, st: &mut AttackState) {
        if let Some((dir, ratio)) = st.recorder.best() {
            if ratio > 1.0 {
                let q = self.basis.direction(dir.index).expect("recorded index is valid");
                st.add(&q, self.cfg.decay * self.cfg.step_size * dir.sign as f64);
                st.trace.beam_moves.push(st.random_steps);
            }
        }
        st.recorder.clear();
    }

    /// Confirms on the quantized image. On failure the search continues from
    /// the quantized point.
    fn confirm(&self, st: &mut AttackState) -> Result<Option<(ColorImage, usize)>, Halt> {
        let adv = quantize(&st.current_image());
        let xq = dequantize(&adv);
        let p = self.query(&xq)?;
        let j = objective(&p, self.cfg);
        st.trace.push(Action::Confirm, j);
        if self.cfg.is_success(&p) {
            return Ok(Some((adv, p.argmax())));
        }
        st.delta = xq.as_slice().iter().zip(&st.x).map(|(a, b)| a - b).collect();
        st.objective = Some(j);
        Ok(None)
    }
}

/// Runs the attack against `oracle` with a fresh query counter of
/// `cfg.budget`. Terminal conditions become outcome fields.
pub fn run_attack(x: &ColorImage, cfg: &AttackConfig, oracle: &dyn ScoreOracle) -> AttackOutcome {
    let counter = CountingOracle::new(oracle, cfg.budget);
    let xf = dequantize(x);
    let (h, w) = (x.height(), x.width());
    let fraction = cfg
        .frequency_fraction
        .unwrap_or_else(|| FrequencyFraction::default_for(h, w));
    let mut atk = Attack {
        cfg,
        oracle: &counter,
        basis: DctBasis::new(h, w),
        sampler: DirectionSampler::new(cfg.seed, fraction, h, w),
    };
    let mut st = AttackState::new(&xf);

    let result: Result<(ColorImage, usize), Halt> = (|| loop {
        if let StepResult::Hit = atk.random_step(&mut st)? {
            if let Some(done) = atk.confirm(&mut st)? {
                return Ok(done);
            }
            continue;
        }
        if cfg.beam_enabled && st.random_steps.is_multiple_of(cfg.beam_size as u64) {
            atk.beam_step(&mut st);
        }
    })();

    let (success, stop_reason, adv, final_label, oracle_error) = match result {
        Ok((adv, label)) => (true, StopReason::Success, adv, Some(label), None),
        Err(halt) => {
            let adv = quantize(&st.current_image());
            let (reason, err) = match halt {
                Halt::Budget => (StopReason::BudgetExhausted, None),
                Halt::Directions => (StopReason::DirectionsExhausted, None),
                Halt::Oracle(e) => (StopReason::OracleFailure, Some(e.to_string())),
            };
            (false, reason, adv, None, err)
        }
    };
    let effective_l2 = crate::imagecore::l2_distance(&dequantize(&adv), &xf);
    AttackOutcome {
        success,
        stop_reason,
        adversarial_image: adv,
        queries_used: counter.used(),
        delta_l2: st.delta_l2(),
        effective_l2,
        random_steps: st.random_steps,
        accepted_steps: st.accepted_steps,
        final_label,
        oracle_error,
        trace: st.trace,
    }
}
