//! End-to-end reversible adversarial examples: attack, embed, verify, and a
//! corpus runner.
//!
//! A run over a corpus is a pure function of the image bytes, the config and
//! the seeds. Per-image seeds come from [`seeded::derive`] on the file's
//! position in the sorted corpus, so the worker count never changes output.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::attack::{run_attack, AttackConfig, AttackOutcome, ConfigError, Goal, StopReason};
use crate::imagecore::{
    dequantize, l2_distance, load_png, psnr, save_png, to_grayscale, ColorImage, ImageError, Psnr,
};
use crate::oracle::{linear_victim, mlp_victim, CountingOracle, OracleError, RemoteOracle, ScoreOracle};
use crate::rdhgi::{capacity, embed, extract, EmbedStats, Extracted, Payload, RdhError};
use crate::seeded;

pub const DEFAULT_CLASSES: usize = 10;
/// Embedding attempts when truncation is allowed.
const TRUNCATE_TRIES: usize = 16;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("attack failed: {reason:?} after {queries} queries")]
    AttackFailed {
        reason: StopReason,
        queries: u64,
        outcome: Box<AttackOutcome>,
    },
    #[error("payload of {needed} bits exceeds capacity {capacity}")]
    InsufficientCapacity { needed: usize, capacity: usize },
    #[error(transparent)]
    Rdh(#[from] RdhError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("corpus contains no PNG images")]
    EmptyCorpus,
    #[error("{0}")]
    Spec(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

fn io_err(path: &Path, e: impl fmt::Display) -> PipelineError {
    PipelineError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

// ==================== Specs ====================

/// Where scores come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OracleSpec {
    Linear { seed: u64, classes: usize },
    Mlp { seed: u64, classes: usize },
    Remote { url: String },
}

impl OracleSpec {
    /// Victim for `height x width` inputs. Built-in victims are shape bound.
    pub fn build(&self, height: usize, width: usize) -> Box<dyn ScoreOracle> {
        match self {
            Self::Linear { seed, classes } => Box::new(linear_victim(*seed, *classes, height, width)),
            Self::Mlp { seed, classes } => Box::new(mlp_victim(*seed, *classes, height, width)),
            Self::Remote { url } => Box::new(RemoteOracle::new(url)),
        }
    }

    /// Class count if known without a query.
    pub fn classes(&self) -> Option<usize> {
        match self {
            Self::Linear { classes, .. } | Self::Mlp { classes, .. } => Some(*classes),
            Self::Remote { .. } => None,
        }
    }
}

impl FromStr for OracleSpec {
    type Err = String;

    /// `builtin:linear:SEED[:K]`, `builtin:mlp:SEED[:K]` or an `http(s)://` URL.
    fn from_str(s: &str) -> Result<Self, String> {
        if s.starts_with("http://") || s.starts_with("https://") {
            return Ok(Self::Remote { url: s.to_string() });
        }
        let parts: Vec<&str> = s.split(':').collect();
        let (kind, seed, classes) = match parts.as_slice() {
            ["builtin", kind, seed] => (*kind, *seed, None),
            ["builtin", kind, seed, k] => (*kind, *seed, Some(*k)),
            _ => return Err(format!("bad oracle '{s}': expected builtin:linear|mlp:SEED[:K] or http://HOST:PORT")),
        };
        let seed: u64 = seed.parse().map_err(|_| format!("bad oracle seed '{seed}'"))?;
        let classes = match classes {
            None => DEFAULT_CLASSES,
            Some(k) => match k.parse::<usize>() {
                Ok(k) if k >= 2 => k,
                _ => return Err(format!("bad class count '{k}'")),
            },
        };
        match kind {
            "linear" => Ok(Self::Linear { seed, classes }),
            "mlp" => Ok(Self::Mlp { seed, classes }),
            _ => Err(format!("unknown builtin victim '{kind}'")),
        }
    }
}

impl fmt::Display for OracleSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Linear { seed, classes } => write!(f, "builtin:linear:{seed}:{classes}"),
            Self::Mlp { seed, classes } => write!(f, "builtin:mlp:{seed}:{classes}"),
            Self::Remote { url } => f.write_str(url),
        }
    }
}

/// Payload source: a file's bytes or seeded random bits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PayloadSpec {
    File(PathBuf),
    Random { bits: usize, seed: u64 },
}

impl PayloadSpec {
    pub fn load(&self) -> Result<Payload, PipelineError> {
        match self {
            Self::File(p) => Ok(Payload::from_bytes(&fs::read(p).map_err(|e| io_err(p, e))?)),
            Self::Random { bits, seed } => Ok(Payload::random(*bits, *seed)),
        }
    }

    /// Payload for the `index`-th corpus image. Random payloads get their
    /// own derived seed per image.
    pub fn load_for(&self, index: u64) -> Result<Payload, PipelineError> {
        match self {
            Self::Random { bits, seed } => Ok(Payload::random(*bits, seeded::derive(*seed, index))),
            Self::File(_) => self.load(),
        }
    }
}

impl FromStr for PayloadSpec {
    type Err = String;

    /// `random:BITS:SEED`, otherwise a file path.
    fn from_str(s: &str) -> Result<Self, String> {
        if let Some(rest) = s.strip_prefix("random:") {
            let (bits, seed) = rest
                .split_once(':')
                .ok_or_else(|| format!("bad payload '{s}': expected random:BITS:SEED"))?;
            let bits = bits.parse().map_err(|_| format!("bad bit count '{bits}'"))?;
            let seed = seed.parse().map_err(|_| format!("bad payload seed '{seed}'"))?;
            return Ok(Self::Random { bits, seed });
        }
        if s.is_empty() {
            return Err("empty payload path".into());
        }
        Ok(Self::File(PathBuf::from(s)))
    }
}

// ==================== Single image ====================

#[derive(Debug, Clone, Serialize)]
pub struct RaeReport {
    pub attack_success: bool,
    /// Whether the victim's label on the final RAE still meets the goal.
    pub rae_success: bool,
    pub rae_label: Option<usize>,
    pub true_class: usize,
    pub goal: Goal,
    /// Counted queries spent by the attack.
    pub attack_queries: u64,
    /// Attack queries plus the labeling query on the RAE.
    pub queries_used: u64,
    pub psnr_rae_vs_source: Psnr,
    pub psnr_rae_vs_ae: Psnr,
    pub psnr_ae_vs_source: Psnr,
    /// Norm of the shipped adversarial perturbation, AE minus source.
    pub l2_delta: f64,
    /// Norm of the embedding distortion, RAE minus AE.
    pub l2_rdh: f64,
    /// Norm of RAE minus source.
    pub l2_total: f64,
    pub payload_bits: usize,
    /// Requested length when the payload had to be cut.
    pub payload_requested_bits: usize,
    pub bits_per_pixel: f64,
    pub capacity: usize,
    pub embed: EmbedStats,
    pub rae_query_error: Option<String>,
    pub trace_path: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RaeOutput {
    pub ae: ColorImage,
    pub rae: ColorImage,
    pub outcome: AttackOutcome,
    pub report: RaeReport,
}

/// The victim's label for `x`, from one query that no budget counts.
pub fn label(x: &ColorImage, oracle: &dyn ScoreOracle) -> Result<usize, OracleError> {
    Ok(oracle.score(&dequantize(x))?.argmax())
}

fn embed_fitting(ae: &ColorImage, payload: &Payload, truncate: bool) -> Result<(crate::rdhgi::Stego, Payload, usize), PipelineError> {
    let cap = capacity(ae);
    let refuse = || PipelineError::InsufficientCapacity {
        needed: payload.len(),
        capacity: cap,
    };
    if payload.len() <= cap {
        match embed(ae, payload) {
            Ok(s) => return Ok((s, payload.clone(), cap)),
            Err(RdhError::InsufficientCapacity { .. }) if truncate => {}
            Err(RdhError::InsufficientCapacity { .. }) => return Err(refuse()),
            Err(e) => return Err(e.into()),
        }
    } else if !truncate {
        return Err(refuse());
    }
    // Shrink geometrically from the R bound; B side information can make
    // the bound unreachable.
    let mut n = cap.min(payload.len());
    for _ in 0..TRUNCATE_TRIES {
        let cut = Payload::new(payload.bits[..n].to_vec());
        match embed(ae, &cut) {
            Ok(s) => return Ok((s, cut, cap)),
            Err(RdhError::InsufficientCapacity { .. }) if n > 0 => n = n * 3 / 4,
            Err(RdhError::InsufficientCapacity { .. }) => break,
            Err(e) => return Err(e.into()),
        }
    }
    let cut = Payload::default();
    embed(ae, &cut).map(|s| (s, cut, cap)).map_err(|_| refuse())
}

/// Attacks `x`, embeds `payload` into the adversarial image and labels the
/// result with one counted query.
pub fn make_rae(
    x: &ColorImage,
    payload: &Payload,
    cfg: &AttackConfig,
    oracle: &dyn ScoreOracle,
    truncate: bool,
) -> Result<RaeOutput, PipelineError> {
    // Remote oracles learn K from their first response.
    let k = oracle.class_count();
    cfg.validate((k > 0).then_some(k))?;
    let outcome = run_attack(x, cfg, oracle);
    if !outcome.success {
        return Err(PipelineError::AttackFailed {
            reason: outcome.stop_reason,
            queries: outcome.queries_used,
            outcome: Box::new(outcome),
        });
    }
    let ae = outcome.adversarial_image.clone();
    let (stego, used, cap) = embed_fitting(&ae, payload, truncate)?;
    let rae = stego.image;

    let counter = CountingOracle::new(oracle, 1);
    let (rae_label, rae_query_error) = match counter.counted_score(&dequantize(&rae)) {
        Ok(p) => (Some(p.argmax()), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let rae_success = match (rae_label, cfg.goal) {
        (Some(l), Goal::Targeted(y)) => l == y,
        (Some(l), Goal::Untargeted) => l != cfg.true_class,
        (None, _) => false,
    };
    let (xf, aef, raef) = (dequantize(x), dequantize(&ae), dequantize(&rae));
    let report = RaeReport {
        attack_success: true,
        rae_success,
        rae_label,
        true_class: cfg.true_class,
        goal: cfg.goal,
        attack_queries: outcome.queries_used,
        queries_used: outcome.queries_used + counter.used(),
        psnr_rae_vs_source: psnr(&rae, x)?,
        psnr_rae_vs_ae: psnr(&rae, &ae)?,
        psnr_ae_vs_source: psnr(&ae, x)?,
        l2_delta: outcome.effective_l2,
        l2_rdh: l2_distance(&raef, &aef),
        l2_total: l2_distance(&raef, &xf),
        payload_bits: used.len(),
        payload_requested_bits: payload.len(),
        bits_per_pixel: used.len() as f64 / (x.height() * x.width()) as f64,
        capacity: cap,
        embed: stego.stats,
        rae_query_error,
        trace_path: None,
    };
    Ok(RaeOutput { ae, rae, outcome, report })
}

// ==================== Verification ====================

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub pass: bool,
    pub crc_ok: bool,
    pub payload_bits: Option<usize>,
    /// Recovered image equals the reference AE, if one was given.
    pub recovered_matches_reference: Option<bool>,
    pub grayscale_matches_reference: Option<bool>,
    pub cause: Option<String>,
}

/// Extracts and checks `rae`. Failures become a failed verdict.
pub fn verify(rae: &ColorImage, reference: Option<&ColorImage>) -> (Verdict, Option<Extracted>) {
    let gray = reference.map(|r| {
        r.height() == rae.height() && r.width() == rae.width() && to_grayscale(r) == to_grayscale(rae)
    });
    match extract(rae) {
        Err(e) => (
            Verdict {
                pass: false,
                crc_ok: false,
                payload_bits: None,
                recovered_matches_reference: reference.map(|_| false),
                grayscale_matches_reference: gray,
                cause: Some(format!("{e:?}")),
            },
            None,
        ),
        Ok(out) => {
            let matches = reference.map(|r| *r == out.cover);
            let pass = matches.unwrap_or(true) && gray.unwrap_or(true);
            let cause = match (matches, gray) {
                (Some(false), _) => Some("recovered image differs from reference".to_string()),
                (_, Some(false)) => Some("grayscale differs from reference".to_string()),
                _ => None,
            };
            (
                Verdict {
                    pass,
                    crc_ok: true,
                    payload_bits: Some(out.payload.len()),
                    recovered_matches_reference: matches,
                    grayscale_matches_reference: gray,
                    cause,
                },
                Some(out),
            )
        }
    }
}

// ==================== Corpus ====================

/// How each corpus image picks its attack goal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetMode {
    Untargeted,
    Fixed(usize),
    /// A seeded class other than the true one.
    Random,
}

impl FromStr for TargetMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "untargeted" => Ok(Self::Untargeted),
            "random" => Ok(Self::Random),
            k => k
                .parse()
                .map(Self::Fixed)
                .map_err(|_| format!("bad target '{s}': expected untargeted, random or a class index")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    /// PNG files or directories of them.
    pub inputs: Vec<PathBuf>,
    pub out_dir: PathBuf,
    pub oracle: OracleSpec,
    /// Template; goal, true class and seed are set per image, and a zero
    /// budget means the size default.
    pub attack: AttackConfig,
    pub target: TargetMode,
    pub payload: PayloadSpec,
    pub truncate: bool,
    pub jobs: usize,
    /// Arm names and whether each uses beam moves.
    pub arms: Vec<(String, bool)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ImageRecord {
    pub image: String,
    pub index: usize,
    pub arm: String,
    pub attack_success: bool,
    pub stop_reason: Option<StopReason>,
    pub attack_queries: u64,
    pub error: Option<String>,
    pub report: Option<RaeReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    pub arm: String,
    pub images: usize,
    pub attack_success_rate: f64,
    pub rae_success_rate: f64,
    pub mean_queries: f64,
    pub median_queries: f64,
    pub mean_psnr_rae_vs_source: f64,
    pub mean_psnr_rae_vs_ae: f64,
    pub mean_psnr_ae_vs_source: f64,
    pub mean_bits_per_pixel: f64,
    pub embed_failures: usize,
}

pub const AGGREGATE_HEADER: &str = "arm,images,attack_success_rate,rae_success_rate,mean_queries,median_queries,\
mean_psnr_rae_vs_source,mean_psnr_rae_vs_ae,mean_psnr_ae_vs_source,mean_bits_per_pixel,embed_failures";

impl AggregateRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{:.4},{:.4},{:.2},{:.1},{:.4},{:.4},{:.4},{:.5},{}",
            self.arm,
            self.images,
            self.attack_success_rate,
            self.rae_success_rate,
            self.mean_queries,
            self.median_queries,
            self.mean_psnr_rae_vs_source,
            self.mean_psnr_rae_vs_ae,
            self.mean_psnr_ae_vs_source,
            self.mean_bits_per_pixel,
            self.embed_failures
        )
    }
}

#[derive(Debug, Clone)]
pub struct CorpusResult {
    pub records: Vec<ImageRecord>,
    pub aggregate: Vec<AggregateRow>,
}

/// Sorted PNG files named by `inputs`.
pub fn collect_pngs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, PipelineError> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            for e in fs::read_dir(p).map_err(|e| io_err(p, e))? {
                let path = e.map_err(|e| io_err(p, e))?.path();
                if path.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")) {
                    files.push(path);
                }
            }
        } else if p.exists() {
            files.push(p.clone());
        } else {
            return Err(io_err(p, "no such file or directory"));
        }
    }
    files.sort();
    files.dedup();
    Ok(files)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        (xs[m - 1] + xs[m]) / 2.0
    }
}

/// Summary over one arm. Query statistics cover every image; PSNR means
/// cover finished RAEs with finite values.
pub fn aggregate(arm: &str, records: &[ImageRecord]) -> AggregateRow {
    let n = records.len();
    let reports: Vec<&RaeReport> = records.iter().filter_map(|r| r.report.as_ref()).collect();
    let finite = |f: fn(&RaeReport) -> Psnr| mean(reports.iter().filter_map(|r| f(r).finite()));
    AggregateRow {
        arm: arm.to_string(),
        images: n,
        attack_success_rate: records.iter().filter(|r| r.attack_success).count() as f64 / n.max(1) as f64,
        rae_success_rate: reports.iter().filter(|r| r.rae_success).count() as f64 / n.max(1) as f64,
        mean_queries: mean(records.iter().map(|r| r.attack_queries as f64)),
        median_queries: median(records.iter().map(|r| r.attack_queries as f64).collect()),
        mean_psnr_rae_vs_source: finite(|r| r.psnr_rae_vs_source),
        mean_psnr_rae_vs_ae: finite(|r| r.psnr_rae_vs_ae),
        mean_psnr_ae_vs_source: finite(|r| r.psnr_ae_vs_source),
        mean_bits_per_pixel: mean(reports.iter().map(|r| r.bits_per_pixel)),
        embed_failures: records.iter().filter(|r| r.attack_success && r.report.is_none()).count(),
    }
}

fn run_one(cfg: &RunConfig, arm: &str, beam: bool, index: usize, path: &Path, dir: &Path) -> Result<ImageRecord, PipelineError> {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| format!("image{index}"));
    let x = load_png(path)?;
    let oracle = cfg.oracle.build(x.height(), x.width());
    let true_class = label(&x, oracle.as_ref())?;
    let classes = cfg.oracle.classes().unwrap_or_else(|| oracle.class_count());
    let seed = seeded::derive(cfg.attack.seed, index as u64);
    let goal = match cfg.target {
        TargetMode::Untargeted => Goal::Untargeted,
        TargetMode::Fixed(t) => Goal::Targeted(t),
        TargetMode::Random => {
            let mut rng = seeded::rng(seeded::derive(seed, 0x7A96));
            let k = classes.max(2) as u64;
            Goal::Targeted(((true_class as u64 + 1 + seeded::below(&mut rng, k - 1)) % k) as usize)
        }
    };
    let attack = AttackConfig {
        goal,
        true_class,
        seed,
        beam_enabled: beam,
        budget: if cfg.attack.budget == 0 {
            AttackConfig::default_budget(x.height(), x.width())
        } else {
            cfg.attack.budget
        },
        ..cfg.attack.clone()
    };
    let payload = cfg.payload.load_for(index as u64)?;
    let mut record = ImageRecord {
        image: stem.clone(),
        index,
        arm: arm.to_string(),
        attack_success: false,
        stop_reason: None,
        attack_queries: 0,
        error: None,
        report: None,
    };
    let trace_path = dir.join(format!("{stem}_trace.csv"));
    let write = |p: &Path, s: &str| fs::write(p, s).map_err(|e| io_err(p, e));
    match make_rae(&x, &payload, &attack, oracle.as_ref(), cfg.truncate) {
        Ok(out) => {
            write(&trace_path, &out.outcome.trace.to_csv())?;
            save_png(&out.ae, dir.join(format!("{stem}_ae.png")))?;
            save_png(&out.rae, dir.join(format!("{stem}_rae.png")))?;
            let mut report = out.report;
            report.trace_path = Some(trace_path.file_name().expect("named").to_string_lossy().into_owned());
            record.attack_success = true;
            record.stop_reason = Some(out.outcome.stop_reason);
            record.attack_queries = report.attack_queries;
            record.report = Some(report);
        }
        Err(PipelineError::AttackFailed { reason, queries, outcome }) => {
            write(&trace_path, &outcome.trace.to_csv())?;
            record.stop_reason = Some(reason);
            record.attack_queries = queries;
            record.error = Some(format!("attack failed: {reason:?}"));
        }
        Err(PipelineError::InsufficientCapacity { needed, capacity }) => {
            // The attack itself succeeded; keep its numbers.
            record.attack_success = true;
            record.error = Some(format!("payload of {needed} bits exceeds capacity {capacity}"));
        }
        Err(e) => record.error = Some(e.to_string()),
    }
    let json = serde_json::to_string_pretty(&record).expect("record serializes");
    write(&dir.join(format!("{stem}.json")), &(json + "\n"))?;
    Ok(record)
}

/// Runs every arm over the corpus and writes per-image outputs under
/// `out_dir/<arm>/` plus `out_dir/aggregate.csv`.
pub fn run_corpus(cfg: &RunConfig) -> Result<CorpusResult, PipelineError> {
    let files = collect_pngs(&cfg.inputs)?;
    if files.is_empty() {
        return Err(PipelineError::EmptyCorpus);
    }
    if let Some(k) = cfg.oracle.classes() {
        let probe = AttackConfig {
            goal: match cfg.target {
                TargetMode::Fixed(t) => Goal::Targeted(t),
                _ => Goal::Untargeted,
            },
            true_class: match cfg.target {
                TargetMode::Fixed(t) => (t + 1) % k,
                _ => 0,
            },
            budget: cfg.attack.budget.max(2),
            ..cfg.attack.clone()
        };
        probe.validate(Some(k))?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs.max(1))
        .build()
        .map_err(|e| PipelineError::Spec(e.to_string()))?;
    let mut records = Vec::new();
    let mut aggregate_rows = Vec::new();
    for (arm, beam) in &cfg.arms {
        let dir = cfg.out_dir.join(arm);
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let arm_records: Vec<ImageRecord> = pool.install(|| {
            files
                .par_iter()
                .enumerate()
                .map(|(i, f)| {
                    run_one(cfg, arm, *beam, i, f, &dir).unwrap_or_else(|e| ImageRecord {
                        image: f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
                        index: i,
                        arm: arm.clone(),
                        attack_success: false,
                        stop_reason: None,
                        attack_queries: 0,
                        error: Some(e.to_string()),
                        report: None,
                    })
                })
                .collect()
        });
        aggregate_rows.push(aggregate(arm, &arm_records));
        records.extend(arm_records);
    }
    let mut csv = String::from(AGGREGATE_HEADER);
    csv.push('\n');
    for row in &aggregate_rows {
        csv.push_str(&row.csv_line());
        csv.push('\n');
    }
    let path = cfg.out_dir.join("aggregate.csv");
    fs::write(&path, csv).map_err(|e| io_err(&path, e))?;
    Ok(CorpusResult {
        records,
        aggregate: aggregate_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::synthetic_texture;

    #[test]
    fn oracle_specs_parse() {
        assert_eq!("builtin:mlp:7".parse(), Ok(OracleSpec::Mlp { seed: 7, classes: 10 }));
        assert_eq!("builtin:linear:3:4".parse(), Ok(OracleSpec::Linear { seed: 3, classes: 4 }));
        assert_eq!(
            "http://127.0.0.1:8000".parse(),
            Ok(OracleSpec::Remote {
                url: "http://127.0.0.1:8000".into()
            })
        );
        for bad in ["builtin:cnn:1", "builtin:mlp", "builtin:mlp:x", "builtin:mlp:1:1", "ftp://x", ""] {
            assert!(bad.parse::<OracleSpec>().is_err(), "{bad}");
        }
        let spec = OracleSpec::Mlp { seed: 9, classes: 5 };
        assert_eq!(spec.to_string().parse(), Ok(spec));
    }

    #[test]
    fn payload_specs_parse() {
        assert_eq!("random:64:3".parse(), Ok(PayloadSpec::Random { bits: 64, seed: 3 }));
        assert_eq!("msg.bin".parse(), Ok(PayloadSpec::File("msg.bin".into())));
        assert!("random:64".parse::<PayloadSpec>().is_err());
        assert!("random:x:1".parse::<PayloadSpec>().is_err());
        let p = PayloadSpec::Random { bits: 40, seed: 1 };
        assert_eq!(p.load().unwrap().len(), 40);
        assert_ne!(p.load_for(0).unwrap(), p.load_for(1).unwrap());
    }

    #[test]
    fn target_modes_parse() {
        assert_eq!("random".parse(), Ok(TargetMode::Random));
        assert_eq!("untargeted".parse(), Ok(TargetMode::Untargeted));
        assert_eq!("3".parse(), Ok(TargetMode::Fixed(3)));
        assert!("x".parse::<TargetMode>().is_err());
    }

    #[test]
    fn median_and_mean() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(vec![]).is_nan());
        assert_eq!(mean([1.0, 2.0, 6.0].into_iter()), 3.0);
    }

    #[test]
    fn make_rae_end_to_end() {
        let x = synthetic_texture(64, 64, 1000).unwrap();
        let oracle = mlp_victim(7, 10, 64, 64);
        let t = label(&x, &oracle).unwrap();
        let mut cfg = AttackConfig::targeted(t, (t + 1) % 10);
        cfg.seed = 1;
        let payload = Payload::random(64, 5);
        let out = make_rae(&x, &payload, &cfg, &oracle, false).unwrap();
        let r = &out.report;
        assert!(r.attack_success);
        assert_eq!(r.queries_used, r.attack_queries + 1);
        assert_eq!(to_grayscale(&out.rae), to_grayscale(&out.ae));
        assert!(r.psnr_rae_vs_ae.finite().unwrap() > r.psnr_rae_vs_source.finite().unwrap());
        let (v, ex) = verify(&out.rae, Some(&out.ae));
        assert!(v.pass, "{v:?}");
        assert_eq!(ex.unwrap().payload, payload);
    }

    #[test]
    fn zero_length_payload_still_verifies() {
        let x = synthetic_texture(64, 64, 1001).unwrap();
        let oracle = mlp_victim(7, 10, 64, 64);
        let t = label(&x, &oracle).unwrap();
        let cfg = AttackConfig::untargeted(t);
        let out = make_rae(&x, &Payload::default(), &cfg, &oracle, false).unwrap();
        let (v, ex) = verify(&out.rae, Some(&out.ae));
        assert!(v.pass);
        assert_eq!(ex.unwrap().payload.len(), 0);
    }

    #[test]
    fn oversized_payload_is_refused_or_cut() {
        let x = synthetic_texture(64, 64, 1002).unwrap();
        let oracle = mlp_victim(7, 10, 64, 64);
        let cfg = AttackConfig::untargeted(label(&x, &oracle).unwrap());
        let big = Payload::random(5000, 1);
        assert!(matches!(
            make_rae(&x, &big, &cfg, &oracle, false),
            Err(PipelineError::InsufficientCapacity { needed: 5000, .. })
        ));
        let out = make_rae(&x, &big, &cfg, &oracle, true).unwrap();
        assert!(out.report.payload_bits < 5000);
        assert_eq!(out.report.payload_requested_bits, 5000);
        let (v, ex) = verify(&out.rae, Some(&out.ae));
        assert!(v.pass);
        assert_eq!(ex.unwrap().payload.bits[..], big.bits[..out.report.payload_bits]);
    }

    #[test]
    fn verify_failures_are_verdicts() {
        let plain = synthetic_texture(24, 24, 3).unwrap();
        let (v, ex) = verify(&plain, None);
        assert!(!v.pass && ex.is_none());
        assert_eq!(v.cause.as_deref(), Some("BadMagic"));

        let stego = embed(&plain, &Payload::random(20, 1)).unwrap().image;
        let (v, _) = verify(&stego, Some(&plain));
        assert!(v.pass);
        let mut bad = stego.clone();
        bad.set_pixel(5, 5, [0, 0, 0]);
        let (v, _) = verify(&bad, Some(&plain));
        assert!(!v.pass);
        assert!(v.cause.is_some());
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            inputs: vec![dir.path().to_path_buf()],
            out_dir: dir.path().join("out"),
            oracle: OracleSpec::Mlp { seed: 1, classes: 10 },
            attack: AttackConfig::default(),
            target: TargetMode::Random,
            payload: PayloadSpec::Random { bits: 8, seed: 0 },
            truncate: false,
            jobs: 1,
            arms: vec![("beam".into(), true)],
        };
        assert!(matches!(run_corpus(&cfg), Err(PipelineError::EmptyCorpus)));
    }
}
