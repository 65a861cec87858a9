//! `rae`: attack, hide, recover and verify from the command line.
//!
//! Exit codes: 0 success, 1 attack or verification failure, 2 usage error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use rae_core::attack::{run_attack, AttackConfig, Goal};
use rae_core::dctspace::FrequencyFraction;
use rae_core::imagecore::{load_png, psnr, save_gray_png, save_png, to_grayscale, ColorImage, Psnr};
use rae_core::pipeline::{self, OracleSpec, PayloadSpec, PipelineError, RunConfig, TargetMode};
use rae_core::rdhgi::{capacity, embed, extract};

#[derive(Parser)]
#[command(name = "rae", version, about = "Reversible adversarial examples")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct AttackArgs {
    /// Victim: builtin:linear:SEED[:K], builtin:mlp:SEED[:K] or http://HOST:PORT
    #[arg(long, default_value = "builtin:mlp:7")]
    oracle: OracleSpec,
    /// Step size α on the [0,1] pixel scale
    #[arg(long, default_value_t = 0.2)]
    step_size: f64,
    /// Random steps between beam moves
    #[arg(long, default_value_t = 3)]
    beam_size: usize,
    /// Beam step multiplier
    #[arg(long, default_value_t = 1.0 / 3.0)]
    decay: f64,
    /// Counted query budget; defaults by image size
    #[arg(long)]
    budget: Option<u64>,
    /// Kept low-frequency fraction per axis, e.g. 1/4 or 0.25
    #[arg(long)]
    freq_fraction: Option<FrequencyFraction>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Plain random search without beam moves
    #[arg(long)]
    no_beam: bool,
}

impl AttackArgs {
    fn template(&self) -> AttackConfig {
        AttackConfig {
            step_size: self.step_size,
            beam_size: self.beam_size,
            decay: self.decay,
            budget: self.budget.unwrap_or(0),
            frequency_fraction: self.freq_fraction,
            seed: self.seed,
            beam_enabled: !self.no_beam,
            ..AttackConfig::default()
        }
    }
}

#[derive(Args, Clone)]
struct SingleArgs {
    #[arg(long)]
    input: PathBuf,
    /// Target class; untargeted when absent
    #[arg(long)]
    target_class: Option<usize>,
    /// True class; asked of the victim when absent
    #[arg(long)]
    true_class: Option<usize>,
    #[command(flatten)]
    attack: AttackArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the black-box attack on one image
    Attack(SingleArgs),
    /// Hide a payload in a cover image
    Embed {
        #[arg(long)]
        input: PathBuf,
        /// FILE or random:BITS:SEED
        #[arg(long)]
        payload: PayloadSpec,
        #[arg(long)]
        output: PathBuf,
    },
    /// Recover the payload and the original image
    Extract {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        cover_out: Option<PathBuf>,
        #[arg(long)]
        payload_out: Option<PathBuf>,
    },
    /// Attack, then hide a payload in the adversarial image
    Rae {
        #[command(flatten)]
        single: SingleArgs,
        #[arg(long)]
        payload: PayloadSpec,
        /// Cut the payload to fit instead of failing
        #[arg(long)]
        truncate: bool,
    },
    /// Check that an image carries a valid payload
    Verify {
        #[arg(long)]
        input: PathBuf,
        /// Expected recovered image
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// PSNR between two images in dB
    Psnr { a: PathBuf, b: PathBuf },
    /// Write the grayscale plane
    Gray {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Run the full pipeline over a corpus
    Corpus {
        /// PNG files or directories
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        /// untargeted, random or a class index
        #[arg(long, default_value = "random")]
        target: TargetMode,
        #[arg(long, default_value = "random:64:0")]
        payload: PayloadSpec,
        #[arg(long)]
        truncate: bool,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Also run the plain random-search arm
        #[arg(long)]
        compare_baseline: bool,
        #[command(flatten)]
        attack: AttackArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    /// Exit 1.
    Failed(String),
    /// Exit 2.
    Usage(String),
}

type Outcome = Result<(), Failure>;

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn failed(e: impl std::fmt::Display) -> Failure {
    Failure::Failed(e.to_string())
}

fn load(path: &Path) -> Result<ColorImage, Failure> {
    load_png(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn mkdir(dir: &Path) -> Outcome {
    fs::create_dir_all(dir).map_err(|e| usage(format!("{}: {e}", dir.display())))
}

fn write(path: &Path, data: impl AsRef<[u8]>) -> Outcome {
    fs::write(path, data).map_err(|e| failed(format!("{}: {e}", path.display())))
}

fn say(line: &str) {
    // A closed pipe is not an error worth reporting.
    let _ = writeln!(std::io::stdout().lock(), "{line}");
}

fn print_json(v: &impl serde::Serialize) {
    say(&serde_json::to_string_pretty(v).expect("serializable"));
}

fn fmt_psnr(p: Psnr) -> String {
    match p.finite() {
        Some(db) => format!("{db:.4}"),
        None => "inf".into(),
    }
}

/// Full attack config for one image, labeling it if needed.
fn single_config(args: &SingleArgs, x: &ColorImage, oracle: &dyn rae_core::oracle::ScoreOracle) -> Result<AttackConfig, Failure> {
    let true_class = match args.true_class {
        Some(t) => t,
        None => pipeline::label(x, oracle).map_err(failed)?,
    };
    let mut cfg = args.attack.template();
    cfg.true_class = true_class;
    cfg.goal = args.target_class.map_or(Goal::Untargeted, Goal::Targeted);
    if cfg.budget == 0 {
        cfg.budget = AttackConfig::default_budget(x.height(), x.width());
    }
    let k = oracle.class_count();
    cfg.validate((k > 0).then_some(k)).map_err(usage)?;
    Ok(cfg)
}

fn attack(args: SingleArgs) -> Outcome {
    let x = load(&args.input)?;
    let oracle = args.attack.oracle.build(x.height(), x.width());
    let cfg = single_config(&args, &x, oracle.as_ref())?;
    mkdir(&args.out)?;
    let out = run_attack(&x, &cfg, oracle.as_ref());
    write(&args.out.join("trace.csv"), out.trace.to_csv())?;
    save_png(&out.adversarial_image, args.out.join("ae.png")).map_err(failed)?;
    let report = json!({ "config": cfg, "outcome": out });
    write(&args.out.join("attack.json"), serde_json::to_string_pretty(&report).expect("json") + "\n")?;
    print_json(&report);
    if out.success {
        Ok(())
    } else {
        Err(failed(format!("attack failed: {:?}", out.stop_reason)))
    }
}

fn rae(args: SingleArgs, payload: PayloadSpec, truncate: bool) -> Outcome {
    let x = load(&args.input)?;
    let payload = payload.load().map_err(usage)?;
    let oracle = args.attack.oracle.build(x.height(), x.width());
    let cfg = single_config(&args, &x, oracle.as_ref())?;
    mkdir(&args.out)?;
    match pipeline::make_rae(&x, &payload, &cfg, oracle.as_ref(), truncate) {
        Ok(out) => {
            write(&args.out.join("trace.csv"), out.outcome.trace.to_csv())?;
            save_png(&out.ae, args.out.join("ae.png")).map_err(failed)?;
            save_png(&out.rae, args.out.join("rae.png")).map_err(failed)?;
            let mut report = out.report;
            report.trace_path = Some("trace.csv".into());
            write(&args.out.join("report.json"), serde_json::to_string_pretty(&report).expect("json") + "\n")?;
            print_json(&report);
            Ok(())
        }
        Err(PipelineError::AttackFailed { outcome, .. }) => {
            write(&args.out.join("trace.csv"), outcome.trace.to_csv())?;
            Err(failed(format!("attack failed: {:?}", outcome.stop_reason)))
        }
        Err(e @ PipelineError::Config(_)) => Err(usage(e)),
        Err(e) => Err(failed(e)),
    }
}

fn run(cmd: Cmd) -> Outcome {
    match cmd {
        Cmd::Attack(args) => attack(args),
        Cmd::Rae { single, payload, truncate } => rae(single, payload, truncate),
        Cmd::Embed { input, payload, output } => {
            let cover = load(&input)?;
            let payload = payload.load().map_err(usage)?;
            let stego = embed(&cover, &payload).map_err(|e| failed(format!("{e} (capacity {})", capacity(&cover))))?;
            save_png(&stego.image, &output).map_err(failed)?;
            print_json(&json!({
                "payload_bits": payload.len(),
                "psnr": fmt_psnr(psnr(&stego.image, &cover).map_err(failed)?),
                "stats": stego.stats,
            }));
            Ok(())
        }
        Cmd::Extract { input, cover_out, payload_out } => {
            let img = load(&input)?;
            let out = extract(&img).map_err(|e| failed(format!("{e:?}")))?;
            if let Some(p) = cover_out {
                save_png(&out.cover, p).map_err(failed)?;
            }
            if let Some(p) = payload_out {
                write(&p, out.payload.to_bytes())?;
            }
            print_json(&json!({ "payload_bits": out.payload.len(), "header": out.header }));
            Ok(())
        }
        Cmd::Verify { input, reference } => {
            let img = load(&input)?;
            let reference = reference.as_deref().map(load).transpose()?;
            let (verdict, _) = pipeline::verify(&img, reference.as_ref());
            print_json(&verdict);
            if verdict.pass {
                Ok(())
            } else {
                Err(failed(verdict.cause.unwrap_or_else(|| "verification failed".into())))
            }
        }
        Cmd::Psnr { a, b } => {
            let p = psnr(&load(&a)?, &load(&b)?).map_err(usage)?;
            say(&fmt_psnr(p));
            Ok(())
        }
        Cmd::Gray { input, output } => save_gray_png(&to_grayscale(&load(&input)?), output).map_err(failed),
        Cmd::Corpus {
            inputs,
            target,
            payload,
            truncate,
            jobs,
            compare_baseline,
            attack,
            out,
        } => {
            let mut arms = vec![("beam".to_string(), true)];
            if attack.no_beam {
                arms = vec![("baseline".to_string(), false)];
            } else if compare_baseline {
                arms.push(("baseline".to_string(), false));
            }
            let cfg = RunConfig {
                inputs,
                out_dir: out,
                oracle: attack.oracle.clone(),
                attack: attack.template(),
                target,
                payload,
                truncate,
                jobs,
                arms,
            };
            let result = pipeline::run_corpus(&cfg).map_err(usage)?;
            say(pipeline::AGGREGATE_HEADER);
            for row in &result.aggregate {
                say(&row.csv_line());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Failed(msg)) => {
            eprintln!("rae: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("rae: {msg}");
            ExitCode::from(2)
        }
    }
}
