//! `flowe`: synthetic-video generation, flow-equivariant self-supervised
//! training, frozen-encoder readout evaluation, built-in verification
//! suites, and flow-file tooling, all driven by one TOML run configuration.
//!
//! Exit codes: 0 success, 1 runtime error, 2 configuration error, 3
//! verification-suite violation.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use flowe_core::FloweError;

use crate::config::{load_config, Precision};

/// CLI failure, classified for the exit-status discipline.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{0}")]
    CheckFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Config(_) => 2,
            CliError::CheckFailed(_) => 3,
        }
    }
}

impl From<FloweError> for CliError {
    fn from(e: FloweError) -> Self {
        match e {
            FloweError::Config(msg) => CliError::Config(msg),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

/// Ablated training variants; each switch turns one ingredient off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AblationKind {
    /// Pooled variant: global-average features instead of per-pixel maps.
    #[value(name = "pixel_based")]
    PixelBased,
    /// Force both view affines to identity.
    #[value(name = "no_affine")]
    NoAffine,
    /// Force the frame-to-frame flow to zero.
    #[value(name = "no_flow")]
    NoFlow,
}

impl AblationKind {
    pub fn key(self) -> &'static str {
        match self {
            AblationKind::PixelBased => "pixel_based",
            AblationKind::NoAffine => "no_affine",
            AblationKind::NoFlow => "no_flow",
        }
    }
}

#[derive(Parser)]
#[command(
    name = "flowe",
    version,
    about = "Flow-equivariant dense self-supervised learning on synthetic video",
    after_help = "Config keys can be overridden directly: --trainer.base_lr=0.05 \
                  (equivalently --set trainer.base_lr=0.05; --set wins on conflict).\n\
                  FLOWE_THREADS caps the worker thread count."
)]
struct Cli {
    /// TOML run configuration file (defaults apply when omitted).
    #[arg(short, long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one config key, e.g. --set trainer.base_lr=0.05 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Output directory (overrides the config's out_dir).
    #[arg(long, global = true, value_name = "DIR")]
    out_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset: frames, labels, flow, occlusion.
    GenData,
    /// Self-supervised training over a generated (or external) dataset.
    Train {
        /// Dataset directory or manifest.jsonl (default: <out_dir>/dataset).
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
        /// Override trainer.total_steps.
        #[arg(long)]
        steps: Option<u64>,
        /// Resume from this checkpoint file.
        #[arg(long, value_name = "FILE")]
        resume: Option<PathBuf>,
        /// Train an ablated variant instead of the full model.
        #[arg(long, value_enum)]
        ablation: Option<AblationKind>,
        /// Run directory under out_dir (default: "train" or "train-<ablation>").
        #[arg(long, value_name = "NAME")]
        run_name: Option<String>,
    },
    /// Train and evaluate the frozen-encoder linear readout.
    Readout {
        /// Dataset directory or manifest.jsonl (default: <out_dir>/dataset).
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
        /// Encoder checkpoint path, or "random" for an untrained encoder.
        #[arg(long, value_name = "FILE|random")]
        checkpoint: Option<String>,
        /// Write prediction overlay PNGs for the held-out frames.
        #[arg(long)]
        overlays: bool,
        /// Run directory under out_dir (default: "readout").
        #[arg(long, value_name = "NAME")]
        run_name: Option<String>,
    },
    /// Run the warp-algebra and gradient verification suites.
    Check,
    /// Inspect or compare Middlebury .flo files.
    Flo {
        #[command(subcommand)]
        op: FloCmd,
    },
}

#[derive(Subcommand)]
enum FloCmd {
    /// Print dimensions and displacement statistics.
    Inspect { path: PathBuf },
    /// Summarize the differences between two flow files.
    Diff { a: PathBuf, b: PathBuf },
}

/// A `--section.key=value` argument is a config override; everything else
/// goes to the normal parser. Arguments after `--` are never overrides.
fn is_dotted_key(key: &str) -> bool {
    key.contains('.')
        && key
            .split('.')
            .all(|p| !p.is_empty() && p.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_'))
}

fn split_dotted_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut passthrough = false;
    for arg in args {
        if passthrough {
            rest.push(arg);
            continue;
        }
        if arg == "--" {
            passthrough = true;
            rest.push(arg);
            continue;
        }
        if let Some(body) = arg.strip_prefix("--") {
            if let Some((key, value)) = body.split_once('=') {
                if is_dotted_key(key) {
                    overrides.push((key.to_string(), value.to_string()));
                    continue;
                }
            }
        }
        rest.push(arg);
    }
    (rest, overrides)
}

fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("FLOWE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| {
            CliError::Config(format!("FLOWE_THREADS must be a positive integer, got '{raw}'"))
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Runtime(format!("cannot configure thread pool: {e}")))
}

fn run(cli: Cli, dotted: Vec<(String, String)>) -> Result<(), CliError> {
    let mut overrides = dotted;
    for s in &cli.set {
        let (k, v) = s.split_once('=').ok_or_else(|| {
            CliError::Config(format!("--set expects KEY=VALUE, got '{s}'"))
        })?;
        overrides.push((k.to_string(), v.to_string()));
    }

    match cli.command {
        Cmd::Check => commands::cmd_check(),
        Cmd::Flo { op } => match op {
            FloCmd::Inspect { path } => commands::cmd_flo_inspect(&path),
            FloCmd::Diff { a, b } => commands::cmd_flo_diff(&a, &b),
        },
        cmd => {
            let cfg = load_config(cli.config.as_deref(), &overrides, cli.out_dir.as_deref())?;
            match cmd {
                Cmd::GenData => commands::cmd_gen_data(&cfg),
                Cmd::Train { data, steps, resume, ablation, run_name } => {
                    let args = commands::TrainArgs { data, steps, resume, ablation, run_name };
                    match cfg.precision {
                        Precision::F32 => commands::cmd_train::<f32>(&cfg, &args),
                        Precision::F64 => commands::cmd_train::<f64>(&cfg, &args),
                    }
                }
                Cmd::Readout { data, checkpoint, overlays, run_name } => {
                    let args = commands::ReadoutArgs { data, checkpoint, overlays, run_name };
                    match cfg.precision {
                        Precision::F32 => commands::cmd_readout::<f32>(&cfg, &args),
                        Precision::F64 => commands::cmd_readout::<f64>(&cfg, &args),
                    }
                }
                Cmd::Check | Cmd::Flo { .. } => unreachable!("handled above"),
            }
        }
    }
}

fn main() -> ExitCode {
    let (args, dotted) = split_dotted_overrides(std::env::args().collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are not errors.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(e.exit_code());
    }
    match run(cli, dotted) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
