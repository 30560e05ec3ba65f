//! `umbc`: train, stream-encode and check the set encoders from the command line.
//!
//! Exit status: 0 on success, 1 when a check fails or a run aborts, 2 on a
//! usage or configuration error.

mod commands;
mod input;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "umbc", version, about = "Mini-batch consistent set encoders")]
struct Cli {
    /// Experiment config (JSON). Commands other than `train` fall back to a
    /// small built-in config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed override; see each command for what it drives.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for `train`, output file for the others (default stdout).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train every configured regime; writes CSV metrics, checkpoints and a summary.
    /// `--seed` replaces the training seed.
    Train,
    /// Stream a set through a trained model chunk by chunk and print its encoding.
    /// `--seed` picks the slot draw for stochastic slots.
    Encode(EncodeArgs),
    /// Feature-wise variance of the encoding across random partitions.
    /// `--seed` drives the data and the partitions.
    Variance(VarianceArgs),
    /// Compare the expected estimator gradient with the full-set gradient by
    /// enumerating every choice of live cells. `--seed` drives the data.
    CheckUnbiased(CheckArgs),
    /// Central-difference check of the full-set loss gradient.
    /// `--seed` drives the data.
    Gradcheck(GradcheckArgs),
    /// Per-point NLL of held-out clustering tasks under each streaming scenario.
    /// `--seed` drives the tasks and the streams.
    MogBench(MogBenchArgs),
}

#[derive(Args, Debug)]
struct EncodeArgs {
    /// Parameter checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Points, one per line, comma or whitespace separated; `-` reads stdin.
    #[arg(long, default_value = "-")]
    data: String,
    /// Lines buffered per chunk.
    #[arg(long, default_value_t = 64)]
    chunk_size: usize,
    #[arg(long, value_enum, default_value_t = EncodeOutput::Encoding)]
    output: EncodeOutput,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum EncodeOutput {
    /// Set representation after the attention blocks.
    Encoding,
    /// Head output, one row per mixture component.
    Head,
    /// Decoded mixture weights, means and variances.
    Mixture,
}

#[derive(Args, Debug)]
struct VarianceArgs {
    /// Parameters to load into the config's model (default: fresh initialization).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Measure the built-in non-consistent chunk-attention encoder instead.
    #[arg(long)]
    witness: bool,
    #[arg(long, default_value_t = 1024)]
    set_size: usize,
    #[arg(long, default_value_t = 100)]
    partitions: usize,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1, 2, 4, 8, 16, 32])]
    chunks: Vec<usize>,
    /// Largest mean variance accepted for a consistent encoder.
    #[arg(long, default_value_t = 1e-16)]
    tolerance: f64,
}

#[derive(Args, Debug)]
struct CheckArgs {
    /// Set size; the config's chunk size and live-cell count are used.
    #[arg(long, default_value_t = 8)]
    set_size: usize,
    #[arg(long, default_value_t = 1e-9)]
    tolerance: f64,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 16)]
    set_size: usize,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    /// Largest relative error accepted.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args, Debug)]
struct MogBenchArgs {
    /// Parameters to load into the config's model (default: fresh initialization).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    tasks: usize,
    /// Largest NLL change from streaming accepted.
    #[arg(long, default_value_t = 1e-9)]
    tolerance: f64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            ExitCode::from(e.code)
        }
    }
}
