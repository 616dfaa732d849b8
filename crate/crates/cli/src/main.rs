//! `razer`: quantize tensors, calibrate special values, and run sweeps,
//! KV-cache simulations and GEMV benchmarks.
//!
//! Exit status: 0 on success, 1 for usage errors, 2 for data or format errors.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "razer", version, about = "RaZeR quantization toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Quantize a .nt tensor into an .rzr container and print a JSON summary.
    Quantize(QuantizeArgs),
    /// Decode an .rzr container back to a .nt tensor.
    Dequantize(DequantizeArgs),
    /// Error of {+m, -m} special-value pairs over a range of magnitudes.
    SweepSv(SweepArgs),
    /// Search special-value sets for a directory of layers.
    Calibrate(CalibrateArgs),
    /// Stream random tokens through a buffered KV cache.
    KvSim(KvSimArgs),
    /// Time fused and reference GEMV.
    BenchGemv(BenchArgs),
    /// Write a synthetic .nt tensor.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub dtype: String,
    #[arg(long, default_value_t = 128)]
    pub group_size: usize,
    /// `auto` to calibrate on the input, or four comma-separated values.
    #[arg(long, allow_hyphen_values = true)]
    pub sv: Option<String>,
    /// A clip ratio in (0, 1], or `search` for a per-group grid search.
    #[arg(long, default_value = "1")]
    pub clip: String,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Objective evaluations for `--sv auto`.
    #[arg(long, default_value_t = 100)]
    pub budget: usize,
}

#[derive(Args, Debug)]
pub struct DequantizeArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Element type of the written tensor: f32 or f16.
    #[arg(long, default_value = "f32")]
    pub format: String,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "fp3rzr")]
    pub dtype: String,
    /// Magnitude range `a:b`.
    #[arg(long, default_value = "2:14")]
    pub range: String,
    #[arg(long, default_value_t = 1.0)]
    pub step: f32,
    #[arg(long, default_value_t = 128)]
    pub group_size: usize,
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    /// Directory of `<name>.nt` weights with optional `<name>.x.nt`
    /// activations and `<name>.kv.nt` caches.
    #[arg(long)]
    pub layers: PathBuf,
    #[arg(long, default_value = "fp4rzr")]
    pub dtype: String,
    /// Datatype for KV tensors; defaults to `--dtype`.
    #[arg(long)]
    pub kv_dtype: Option<String>,
    #[arg(long, default_value_t = 100)]
    pub budget: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 128)]
    pub group_size: usize,
    #[arg(long, default_value_t = 64)]
    pub kv_group_size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct KvSimArgs {
    #[arg(long, default_value_t = 256)]
    pub tokens: usize,
    #[arg(long, default_value_t = 128)]
    pub dim: usize,
    #[arg(long, default_value_t = 64)]
    pub buffer: usize,
    #[arg(long, default_value_t = 64)]
    pub group_size: usize,
    /// fp16, int4, int3, fp4rzr or fp3rzr.
    #[arg(long, default_value = "fp4rzr")]
    pub dtype: String,
    /// Four comma-separated special values (RaZeR dtypes).
    #[arg(long, allow_hyphen_values = true)]
    pub sv: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Comma-separated `NxK` shapes.
    #[arg(long, default_value = "4096x4096,11008x4096,13824x5120")]
    pub shapes: String,
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Verify fused == reference before timing.
    #[arg(long)]
    pub self_check: bool,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// `normal` or `outlier` (one planted outlier per group).
    #[arg(long, default_value = "normal")]
    pub kind: String,
    #[arg(long)]
    pub rows: usize,
    #[arg(long)]
    pub cols: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Outlier sign for `--kind outlier`.
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    pub direction: f32,
    #[arg(long, default_value_t = 128)]
    pub group_size: usize,
    #[arg(long)]
    pub output: PathBuf,
}

/// Bad flags or flag values; everything else is a data error.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("RAZER_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| usage(format!("RAZER_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| usage(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Quantize(a) => commands::quantize(&a),
        Command::Dequantize(a) => commands::dequantize(&a),
        Command::SweepSv(a) => commands::sweep_sv(&a),
        Command::Calibrate(a) => commands::calibrate(&a),
        Command::KvSim(a) => commands::kv_sim(&a),
        Command::BenchGemv(a) => commands::bench_gemv(&a),
        Command::Synth(a) => commands::synth(&a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
