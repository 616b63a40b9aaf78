//! `ec2t`: command-line front end for the ternarization toolkit.
//!
//! Exit codes: 0 on success, 1 on runtime errors (diagnostic on stderr),
//! 2 on usage errors. Machine-readable JSON is the default output; `report`
//! offers `--table`. All randomized paths honor `--seed`, so identical
//! invocations print identical bytes. `EC2T_THREADS` caps internal
//! parallelism (default: all cores).

mod commands;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "ec2t", version, about = "Sparse ternary networks: scaling, quantization, training, storage, accounting")]
struct Cli {
    /// Seed for every randomized path.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Emit machine-readable JSON (the default output format).
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the compound-scaling constraint and scale the built-in
    /// descriptor.
    Scale(ScaleArgs),
    /// Ternarize a weight tensor and print assignment diagnostics.
    Quantize(QuantizeArgs),
    /// Train the built-in MLP on synthetic two-moons data; prints CSV.
    TrainDemo(TrainDemoArgs),
    /// Quantize a tensor file into a single-layer model file.
    Export(ExportArgs),
    /// Summarize a model file; optionally write decoded tensors.
    Import(ImportArgs),
    /// Parameter and operation report for a model file or the built-in
    /// architecture.
    Report(ReportArgs),
    /// Integrity and kernel-equivalence checks on a model file.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct ScaleArgs {
    /// Scaling exponent φ.
    #[arg(long)]
    phi: f64,
    /// Pin the resolution coefficient to 1.
    #[arg(long)]
    fix_r: bool,
    /// Grid resolution for the coefficient search.
    #[arg(long, default_value_t = 0.01)]
    grid_step: f64,
    /// Architecture to scale.
    #[arg(long, value_enum, default_value_t = ArchChoice::Micronet)]
    arch: ArchChoice,
    /// Classifier width of the descriptor.
    #[arg(long, default_value_t = 10)]
    classes: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchChoice {
    Micronet,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeChoice {
    /// Entropy-constrained assignment.
    Ec2t,
    /// Magnitude-threshold baseline.
    Ttq,
}

#[derive(Args)]
struct QuantizeArgs {
    /// Input `.ect-tensor` file.
    #[arg(long)]
    weights: std::path::PathBuf,
    /// Sparsification intensity γ.
    #[arg(long)]
    gamma: f64,
    /// Assignment procedure.
    #[arg(long, value_enum, default_value_t = ModeChoice::Ec2t)]
    mode: ModeChoice,
    /// Threshold fraction for ttq mode, in [0, 1).
    #[arg(long, default_value_t = 0.05)]
    t: f64,
}

#[derive(Args)]
struct TrainDemoArgs {
    /// Sparsification intensity γ (ignored in sweep mode).
    #[arg(long, default_value_t = 0.0)]
    gamma: f64,
    /// Ternary training epochs.
    #[arg(long, default_value_t = 60)]
    epochs: usize,
    /// Full-precision warm-up epochs before ternarization.
    #[arg(long, default_value_t = 100)]
    pretrain: usize,
    /// Comma-separated γ values; prints one summary row per value.
    #[arg(long, value_delimiter = ',')]
    sweep: Option<Vec<f64>>,
    /// Dataset size.
    #[arg(long, default_value_t = 512)]
    n: usize,
    /// Dataset noise level.
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 0.01)]
    centroid_lr: f64,
    /// Reassignment cadence in steps.
    #[arg(long, default_value_t = 1)]
    reassign_every: usize,
    /// Write the trained quantized layers as a model file.
    #[arg(long)]
    out: Option<std::path::PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    /// Input `.ect-tensor` file (rank 2 = fully connected, rank 4 = conv).
    #[arg(long)]
    weights: std::path::PathBuf,
    /// Output `.ec2t` model file.
    #[arg(long)]
    out: std::path::PathBuf,
    #[arg(long, default_value_t = 0.0)]
    gamma: f64,
    #[arg(long, value_enum, default_value_t = ModeChoice::Ec2t)]
    mode: ModeChoice,
    #[arg(long, default_value_t = 0.05)]
    t: f64,
    /// Stored layer name.
    #[arg(long, default_value = "layer0")]
    name: String,
}

#[derive(Args)]
struct ImportArgs {
    /// Input `.ec2t` model file.
    #[arg(long)]
    model: std::path::PathBuf,
    /// Write each layer's dense tensor to `<prefix><index>.ect-tensor`.
    #[arg(long)]
    out_prefix: Option<String>,
}

#[derive(Args)]
struct ReportArgs {
    /// Model file to report on.
    #[arg(long, conflicts_with = "arch")]
    model: Option<std::path::PathBuf>,
    /// Report on a built-in dense architecture instead of a file.
    #[arg(long, value_enum)]
    arch: Option<ArchChoice>,
    /// Scale the built-in architecture before reporting.
    #[arg(long, requires = "arch")]
    phi: Option<f64>,
    #[arg(long, requires = "phi")]
    fix_r: bool,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// Count accumulations with the tree-adder model.
    #[arg(long)]
    tree_adder: bool,
    /// Human-readable table instead of JSON.
    #[arg(long)]
    table: bool,
    /// Assumed spatial output for conv layers loaded from a file.
    #[arg(long, default_value_t = 32)]
    input_resolution: usize,
}

#[derive(Args)]
struct VerifyArgs {
    /// Model file to verify.
    #[arg(long)]
    model: std::path::PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(threads) = std::env::var("EC2T_THREADS") {
        if let Ok(n) = threads.trim().parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
    let result = match &cli.command {
        Command::Scale(args) => commands::scale(args),
        Command::Quantize(args) => commands::quantize(args),
        Command::TrainDemo(args) => commands::train_demo(args, cli.seed),
        Command::Export(args) => commands::export(args),
        Command::Import(args) => commands::import(args),
        Command::Report(args) => commands::report(args),
        Command::Verify(args) => commands::verify(args, cli.seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}
