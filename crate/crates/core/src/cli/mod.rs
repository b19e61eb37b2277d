//! `mixq` command line.
//!
//! Exit codes: 0 on success (an infeasible exploration is a valid answer),
//! 1 on internal errors and simulation mismatches, 2 on usage or input
//! errors.

mod commands;
mod render;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use render::Format;

use crate::error::{write_file, Error};
use crate::quant::BitWidths;
use crate::workload::Variant;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "mixq",
    version,
    about = "Mixed-scheme ViT quantization and FPGA accelerator modeling"
)]
pub struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    /// Write the result here instead of stdout.
    #[arg(short = 'o', long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Emit the matmul workload of a DeiT variant.
    Workload {
        #[arg(long, value_enum)]
        variant: Variant,
    },
    /// Latency, FPS and resource estimate for one configuration.
    Estimate(EstimateArgs),
    /// Pick bit-widths, tiling and PoT ratio for a target FPS.
    Dse(DseArgs),
    /// Mixed-scheme quantization of a weight matrix.
    Quantize(QuantizeArgs),
    /// Quantization-aware training of a toy model.
    Qat(QatArgs),
    /// Run one layer through the engine simulator and check it.
    Simulate(SimulateArgs),
    /// Fixed-only vs PoT-only vs mixed comparison under a calibration.
    Report {
        #[arg(long)]
        calibration: PathBuf,
    },
}

#[derive(Debug, Clone, Args)]
pub struct BitsArgs {
    /// Fixed-point bit-width b.
    #[arg(long, default_value_t = 4)]
    pub bits: u32,
    /// PoT bit-width b'; defaults to the width aligned with b.
    #[arg(long)]
    pub b_prime: Option<u32>,
}

impl BitsArgs {
    pub fn resolve(&self) -> crate::Result<BitWidths> {
        match self.b_prime {
            Some(bp) => BitWidths::new(self.bits, bp),
            None => BitWidths::aligned(self.bits),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TilingArgs {
    /// Tiling configuration as JSON; overrides the lane flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub t_fix: Option<u64>,
    #[arg(long)]
    pub t_pot: Option<u64>,
    /// Parallel heads; derived from the workload when omitted.
    #[arg(long)]
    pub p_h: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[arg(long)]
    pub workload: PathBuf,
    #[arg(long)]
    pub calibration: PathBuf,
    #[command(flatten)]
    pub bits: BitsArgs,
    #[command(flatten)]
    pub tiling: TilingArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrimArg {
    KeepFixed,
    Regrow,
}

#[derive(Debug, Args)]
pub struct DseArgs {
    #[arg(long)]
    pub workload: PathBuf,
    #[arg(long)]
    pub calibration: PathBuf,
    #[arg(long)]
    pub target_fps: f64,
    /// Candidate fixed-point bit-widths, highest first.
    #[arg(long, value_delimiter = ',', default_values_t = crate::dse::DEFAULT_LADDER)]
    pub ladder: Vec<u32>,
    #[arg(long, value_enum, default_value_t = TrimArg::KeepFixed)]
    pub trim: TrimArg,
    #[arg(long)]
    pub t_fix_max: Option<u64>,
    #[arg(long)]
    pub t_pot_max: Option<u64>,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    /// Weights as a JSON array of rows; a seeded random matrix otherwise.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub rows: usize,
    #[arg(long, default_value_t = 4)]
    pub cols: usize,
    #[command(flatten)]
    pub bits: BitsArgs,
    #[arg(long, default_value_t = 0.5)]
    pub k_pot: f64,
    #[arg(long, default_value_t = 1)]
    pub n_heads: usize,
}

#[derive(Debug, Args)]
pub struct QatArgs {
    /// Layer shapes `MxN`, input side first.
    #[arg(long, value_delimiter = ',', default_value = "4x4")]
    pub layers: Vec<String>,
    #[arg(long, default_value_t = 32)]
    pub samples: usize,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, default_value_t = commands::DEFAULT_QAT_LR)]
    pub lr: f64,
    #[arg(long, default_value_t = 8)]
    pub bits: u32,
    #[arg(long)]
    pub b_prime: Option<u32>,
    #[arg(long, default_value_t = 0.5)]
    pub k_pot: f64,
    #[arg(long, default_value_t = 1)]
    pub n_heads: usize,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Workload to take the layer from; the reference toy layer otherwise.
    #[arg(long, requires = "layer")]
    pub workload: Option<PathBuf>,
    #[arg(long, requires = "workload")]
    pub layer: Option<String>,
    /// Platform for `--t-fix/--t-pot`; defaults apply when omitted.
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    #[command(flatten)]
    pub tiling: TilingArgs,
    /// Quantized weights; seeded random weights otherwise.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub bits: BitsArgs,
    #[arg(long, default_value_t = 0.5)]
    pub k_pot: f64,
    /// Write the phase event log here.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

impl Cli {
    /// Files the command reads; all must exist before anything runs.
    pub fn input_paths(&self) -> Vec<&Path> {
        let mut v: Vec<&Path> = Vec::new();
        match &self.command {
            Command::Workload { .. } | Command::Qat(_) => {}
            Command::Estimate(a) => {
                v.extend([a.workload.as_path(), a.calibration.as_path()]);
                v.extend(a.tiling.config.as_deref());
            }
            Command::Dse(a) => v.extend([a.workload.as_path(), a.calibration.as_path()]),
            Command::Quantize(a) => v.extend(a.weights.as_deref()),
            Command::Simulate(a) => {
                v.extend(a.workload.as_deref());
                v.extend(a.calibration.as_deref());
                v.extend(a.tiling.config.as_deref());
                v.extend(a.model.as_deref());
            }
            Command::Report { calibration } => v.push(calibration),
        }
        v
    }
}

/// Result of a command: rendered text and the exit code to return.
pub struct Outcome {
    pub text: String,
    pub code: i32,
}

impl Outcome {
    fn ok(text: String) -> Self {
        Outcome {
            text,
            code: EXIT_OK,
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Overflow(_) => EXIT_INTERNAL,
        _ => EXIT_USAGE,
    }
}

pub fn run(cli: &Cli) -> crate::Result<Outcome> {
    for p in cli.input_paths() {
        if !p.is_file() {
            return Err(Error::Io {
                path: p.to_path_buf(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
            });
        }
    }
    match &cli.command {
        Command::Workload { variant } => commands::workload(cli, *variant),
        Command::Estimate(a) => commands::estimate(cli, a),
        Command::Dse(a) => commands::dse(cli, a),
        Command::Quantize(a) => commands::quantize(cli, a),
        Command::Qat(a) => commands::qat(cli, a),
        Command::Simulate(a) => commands::simulate(cli, a),
        Command::Report { calibration } => commands::report(cli, calibration),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(outcome) => {
            let written = match &cli.out {
                Some(path) => write_file(path, &outcome.text),
                None => std::io::stdout()
                    .write_all(outcome.text.as_bytes())
                    .map_err(|source| Error::Io {
                        path: PathBuf::from("<stdout>"),
                        source,
                    }),
            };
            match written {
                Ok(()) => outcome.code,
                Err(e) => {
                    eprintln!("error: {e}");
                    EXIT_USAGE
                }
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
