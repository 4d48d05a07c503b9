//! `framequant`: frame generation, network quantization, MNIST evaluation,
//! (N, delta) sweeps, 1-bit mode, bound reports and storage accounting.
//!
//! Exit status: 0 success, 1 usage error, 2 data or format error, 3
//! constraint violation.

mod commands;
mod table;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use framequant::ErrorClass;

use table::Format;

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Constraint(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Constraint(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Constraint(m) => m,
        }
    }
}

impl From<framequant::Error> for Failure {
    fn from(e: framequant::Error) -> Self {
        let msg = e.to_string();
        match e.class() {
            ErrorClass::Usage => Failure::Usage(msg),
            ErrorClass::Data => Failure::Data(msg),
            ErrorClass::Constraint => Failure::Constraint(msg),
        }
    }
}

#[derive(Parser)]
#[command(name = "framequant", version, about = "Sigma-Delta frame quantization of neural networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a harmonic frame or verify an explicit one.
    Frame(FrameArgs),
    /// Quantize an FQW model into an FQQ file.
    Quantize(QuantizeArgs),
    /// Accuracy and output error on an MNIST directory.
    Eval(EvalArgs),
    /// Evaluate a grid of (N, delta) cells.
    Sweep(SweepArgs),
    /// K = 1 quantization over a list of N, with storage columns.
    Onebit(OnebitArgs),
    /// Theoretical bounds next to measured errors.
    Bounds(BoundsArgs),
    /// Code and dense storage per quantized matrix.
    Storage(StorageArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Column,
    Row,
}

/// Real number, also accepted as a fraction `a/b`.
pub fn parse_real(s: &str) -> Result<f64, String> {
    let v = match s.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|e| format!("{s}: {e}"))?;
            let b: f64 = b.trim().parse().map_err(|e| format!("{s}: {e}"))?;
            a / b
        }
        None => s.trim().parse().map_err(|e| format!("{s}: {e}"))?,
    };
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{s}: not a finite number"))
    }
}

#[derive(Args)]
struct FrameArgs {
    /// Real harmonic frame H^d_N.
    #[arg(long, conflicts_with = "explicit", required_unless_present = "explicit")]
    harmonic: bool,
    /// Text file with one frame vector per line (whitespace or comma separated).
    #[arg(long, value_name = "FILE")]
    explicit: Option<PathBuf>,
    #[arg(short = 'd', long = "frame-d", value_name = "D", required_unless_present = "explicit")]
    frame_d: Option<usize>,
    #[arg(short = 'N', long = "frame-N", value_name = "N", required_unless_present = "explicit")]
    frame_n: Option<usize>,
    /// Write the frame vectors here, in the format `--explicit` reads.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
}

/// How K and delta are chosen for every matrix.
#[derive(Args, Clone)]
pub struct PolicyArgs {
    /// Bit budget per code; K = 2^(bits-1) with the smallest admissible step.
    #[arg(long, conflicts_with_all = ["delta", "k"])]
    pub bits: Option<u32>,
    /// Step size; with `--K` both are fixed, otherwise K is the smallest admissible.
    #[arg(long, value_parser = parse_real)]
    pub delta: Option<f64>,
    #[arg(long = "K", value_name = "K", requires = "delta")]
    pub k: Option<u32>,
}

/// Frame layout shared by the quantizing commands.
#[derive(Args, Clone)]
pub struct LayoutArgs {
    /// Quantize columns or rows of affine layers. Residual blocks always use columns.
    #[arg(long, value_enum, default_value = "column")]
    pub mode: ModeArg,
    /// Quantize the rows of the final affine layer.
    #[arg(long = "last-layer-row", value_enum, default_value = "on")]
    pub last_layer_row: Switch,
    /// Require every frame to live in R^D.
    #[arg(long = "frame-d", value_name = "D")]
    pub frame_d: Option<usize>,
}

/// Optional seeded subsample of the dataset.
#[derive(Args, Clone)]
pub struct SampleArgs {
    /// Evaluate on this many images drawn without replacement.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
struct QuantizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "frame-N", value_name = "N")]
    frame_n: usize,
    #[command(flatten)]
    policy: PolicyArgs,
    #[command(flatten)]
    layout: LayoutArgs,
    /// FQQ output file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

#[derive(Args)]
struct EvalArgs {
    /// FQW float model; repeat to aggregate over several.
    #[arg(long)]
    model: Vec<PathBuf>,
    /// FQQ quantized model; repeat to aggregate. Paired in order with `--model` when both are given.
    #[arg(long)]
    quantized: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Quantize each `--model` on the fly with this frame size.
    #[arg(long = "frame-N", value_name = "N", conflicts_with = "quantized")]
    frame_n: Option<usize>,
    #[command(flatten)]
    policy: PolicyArgs,
    #[command(flatten)]
    layout: LayoutArgs,
    #[command(flatten)]
    sample: SampleArgs,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, required = true)]
    model: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long = "frame-N", value_name = "N", value_delimiter = ',', required = true)]
    frame_n: Vec<usize>,
    #[arg(long, value_delimiter = ',', value_parser = parse_real, required = true)]
    delta: Vec<f64>,
    /// Fixed K for every cell; by default the smallest admissible K per delta.
    #[arg(long = "K", value_name = "K")]
    k: Option<u32>,
    /// Independent dataset subsamples per cell; needs `--samples`.
    #[arg(long, default_value_t = 1)]
    repetitions: usize,
    #[command(flatten)]
    layout: LayoutArgs,
    #[command(flatten)]
    sample: SampleArgs,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

#[derive(Args)]
struct OnebitArgs {
    #[arg(long, required = true)]
    model: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long = "frame-N", value_name = "N", value_delimiter = ',', required = true)]
    frame_n: Vec<usize>,
    /// Uniform step for every layer; by default the smallest that admits K = 1 everywhere.
    #[arg(long, value_parser = parse_real)]
    delta: Option<f64>,
    #[command(flatten)]
    layout: LayoutArgs,
    #[command(flatten)]
    sample: SampleArgs,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

#[derive(Args)]
struct BoundsArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    quantized: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    sample: SampleArgs,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

#[derive(Args)]
struct StorageArgs {
    #[arg(long, required_unless_present = "model", conflicts_with = "model")]
    quantized: Option<PathBuf>,
    /// Quantize this model first (needs `--frame-N` and a step policy).
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long = "frame-N", value_name = "N", requires = "model")]
    frame_n: Option<usize>,
    #[command(flatten)]
    policy: PolicyArgs,
    #[command(flatten)]
    layout: LayoutArgs,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Frame(a) => commands::frame(a.harmonic, a.explicit, a.frame_d, a.frame_n, a.out, a.format),
        Command::Quantize(a) => commands::quantize(&a.model, a.frame_n, &a.policy, &a.layout, &a.out, a.format),
        Command::Eval(a) => commands::eval(commands::EvalInput {
            models: a.model,
            quantized: a.quantized,
            data: a.data,
            frame_n: a.frame_n,
            policy: a.policy,
            layout: a.layout,
            sample: a.sample,
            out: a.out,
            format: a.format,
        }),
        Command::Sweep(a) => commands::sweep(commands::SweepInput {
            models: a.model,
            data: a.data,
            ns: a.frame_n,
            deltas: a.delta,
            k: a.k,
            repetitions: a.repetitions,
            layout: a.layout,
            sample: a.sample,
            out: a.out,
            format: a.format,
        }),
        Command::Onebit(a) => commands::onebit(
            &a.model, &a.data, &a.frame_n, a.delta, &a.layout, &a.sample, a.out.as_deref(), a.format,
        ),
        Command::Bounds(a) => commands::bounds(&a.model, &a.quantized, &a.data, &a.sample, a.out.as_deref(), a.format),
        Command::Storage(a) => commands::storage(
            a.quantized.as_deref(),
            a.model.as_deref(),
            a.frame_n,
            &a.policy,
            &a.layout,
            a.out.as_deref(),
            a.format,
        ),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
