//! `inn`: command-line front end for inflation, fusion, verification and
//! the training protocol.

mod commands;
mod error;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "inn",
    version,
    about = "Inflate 2D CNNs to 3D and train multi-modal volume classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a 2D backbone graph with seeded random weights.
    Zoo(ZooArgs),
    /// Print the shape table and parameter counts of a graph.
    Describe(DescribeArgs),
    /// Inflate a 2D graph and its weights to 3D.
    Inflate(InflateArgs),
    /// Rewrite a 3D network for several input modalities.
    Fuse(FuseArgs),
    /// Check an inflated or fused network against its source.
    Verify(VerifyArgs),
    /// Generate a synthetic T1/T2 phantom dataset.
    Synth(SynthArgs),
    /// Cross-validated training on a manifest.
    Train(TrainArgs),
    /// Evaluate a trained network on held-out cases.
    Eval(EvalArgs),
    /// Class probabilities for one case.
    Infer(InferArgs),
}

#[derive(Debug, Args)]
struct ZooArgs {
    #[arg(long, value_enum, default_value_t = ArchArg::Inceptinn)]
    arch: ArchArg,
    #[arg(long, value_enum, default_value_t = ScaleArg::Full)]
    scale: ScaleArg,
    /// Overrides the backbone's block counts, e.g. 2,0,0.
    #[arg(long, value_delimiter = ',')]
    blocks: Option<Vec<usize>>,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_graph: String,
    #[arg(long)]
    out_weights: String,
}

#[derive(Debug, Args)]
struct DescribeArgs {
    #[arg(long)]
    graph: String,
    /// In-plane input size.
    #[arg(long, default_value_t = 128)]
    size: usize,
    /// Input depth for 3D graphs.
    #[arg(long, default_value_t = 5)]
    depth: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PolicyArg {
    Default,
    Depth1,
}

#[derive(Debug, Args)]
struct InflateArgs {
    #[arg(long)]
    graph: String,
    #[arg(long)]
    weights: String,
    #[arg(long, value_enum, default_value_t = PolicyArg::Default)]
    policy: PolicyArg,
    #[arg(long)]
    out_graph: String,
    #[arg(long)]
    out_weights: String,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StrategyArg {
    Early,
    Intermediate,
}

#[derive(Debug, Args)]
struct FuseArgs {
    #[arg(long, value_enum)]
    strategy: StrategyArg,
    #[arg(long, value_delimiter = ',', default_value = "T1,T2")]
    modalities: Vec<String>,
    #[arg(long)]
    graph: String,
    #[arg(long)]
    weights: String,
    #[arg(long)]
    out_graph: String,
    #[arg(long)]
    out_weights: String,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Conservation,
    Depth1,
    Replicate,
    ModalityCollapse,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long, value_enum)]
    mode: ModeArg,
    /// Reference network: the 2D source, or the single-modality 3D network
    /// for modality-collapse.
    #[arg(long, alias = "ref-graph")]
    graph2d: String,
    #[arg(long, alias = "ref-weights")]
    weights2d: String,
    /// Candidate network: the inflation, or the fused network.
    #[arg(long, alias = "graph")]
    graph3d: String,
    #[arg(long, alias = "weights")]
    weights3d: String,
    /// In-plane probe size.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Probe depth (depth1, modality-collapse) or replicate depth.
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the JSON report here.
    #[arg(long)]
    report: Option<String>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: String,
    #[arg(long, default_value_t = 10)]
    per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    depth: usize,
    /// In-plane side length.
    #[arg(long, default_value_t = 64)]
    size: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ArchArg {
    Inceptinn,
    Denseinn,
}

#[derive(Debug, Clone, Copy, PartialEq, ValueEnum)]
enum ScaleArg {
    Tiny,
    Full,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum InputArg {
    Roi,
    Whole,
}

/// Slice-window and input settings shared by train, eval and infer.
#[derive(Debug, Args)]
struct WindowArgs {
    /// Slices per window (odd).
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, value_enum, default_value_t = InputArg::Roi)]
    input: InputArg,
    /// Overrides the in-plane size implied by --input.
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: String,
    #[arg(long, value_enum, default_value_t = ArchArg::Inceptinn)]
    arch: ArchArg,
    #[arg(long, value_enum, default_value_t = ScaleArg::Full)]
    scale: ScaleArg,
    /// Overrides the backbone's block counts, e.g. 2,0,0.
    #[arg(long, value_delimiter = ',')]
    blocks: Option<Vec<usize>>,
    #[command(flatten)]
    window: WindowArgs,
    #[arg(long, value_enum, default_value_t = StrategyArg::Intermediate)]
    strategy: StrategyArg,
    #[arg(long, value_delimiter = ',', default_value = "T1,T2")]
    modalities: Vec<String>,
    /// Defaults to 32 for roi and 16 for whole.
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    /// Train only this fold.
    #[arg(long)]
    fold: Option<usize>,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Pretrain the 2D backbone on single slices for this many epochs,
    /// then inflate; 0 trains the 3D network from scratch.
    #[arg(long, default_value_t = 0)]
    pretrain_2d_epochs: usize,
    /// Continue folds that already have a checkpoint.
    #[arg(long)]
    resume: bool,
    /// Write the resolved config.json and stop before loading any data.
    #[arg(long)]
    dry_run: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: String,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: String,
    #[arg(long)]
    graph: String,
    #[arg(long)]
    weights: String,
    /// Fold assignment written by `train`; without it every case is used.
    #[arg(long)]
    fold_file: Option<String>,
    #[arg(long, default_value_t = 0)]
    fold: usize,
    #[command(flatten)]
    window: WindowArgs,
    /// Also write the metrics JSON here.
    #[arg(long)]
    out: Option<String>,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    manifest: String,
    #[arg(long)]
    graph: String,
    #[arg(long)]
    weights: String,
    #[arg(long)]
    case: String,
    #[command(flatten)]
    window: WindowArgs,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let exec = inn_core::tensor::Exec::install_from_env();
    let result = match cli.command {
        Command::Zoo(a) => commands::zoo(a),
        Command::Describe(a) => commands::describe(a),
        Command::Inflate(a) => commands::inflate(a),
        Command::Fuse(a) => commands::fuse(a),
        Command::Verify(a) => commands::verify(a),
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a, exec),
        Command::Eval(a) => commands::eval(a, exec),
        Command::Infer(a) => commands::infer(a, exec),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.module());
            ExitCode::from(e.exit_code())
        }
    }
}
