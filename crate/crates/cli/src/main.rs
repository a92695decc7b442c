use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser)]
#[command(name = "vismem", version, about = "Moving-object segmentation with a two-stream ConvGRU memory")]
struct Cli {
    /// Run configuration (`key = value` lines); defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic moving-shapes dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 300)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pretrain the appearance and motion encoders frame by frame.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: TrainArgs,
    },
    /// Train memory, fuse and head with the encoders from --init held fixed.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: TrainArgs,
    },
    /// Segment a sequence (or every sequence of a dataset) with a checkpoint.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        seq: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 130)]
        window: usize,
        #[arg(long, default_value_t = 50)]
        step: usize,
        /// Also store gate activations in gates.bin.
        #[arg(long)]
        record_gates: bool,
        /// Skip the overlay images.
        #[arg(long)]
        no_overlay: bool,
    },
    /// Score predicted masks against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Boundary tolerance as a fraction of the image diagonal.
        #[arg(long, default_value_t = vismem::metrics::DEFAULT_TOLERANCE)]
        tolerance: f64,
    },
    /// Render recorded gate activations as heatmaps.
    VisGates {
        /// gates.bin, or a directory containing it.
        #[arg(long)]
        records: PathBuf,
        /// Comma-separated state channels.
        #[arg(long, default_value = "0")]
        channels: String,
        /// Comma-separated signals: r, inv_z, h.
        #[arg(long, default_value = "r,inv_z")]
        signals: String,
        #[arg(long, default_value_t = 8)]
        scale: usize,
        /// Direction to render: fwd or bwd.
        #[arg(long, default_value = "fwd")]
        direction: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an ablated model from the encoders in --init.
    ///
    /// Exactly one element of the pipeline is swapped. The no-memory variant
    /// replaces the ConvGRU with a stack of plain convolutions whose hidden
    /// width is chosen so that its parameter count is the closest achievable
    /// to the ConvGRU's. The audit run at startup fails unless the two counts
    /// differ by at most 5% of the ConvGRU's count.
    Ablate {
        /// no-app, rgb, no-motion, no-memory, unidir, convrnn (also full, motion-only).
        #[arg(long)]
        variant: vismem::model::Variant,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Held-out dataset scored after training.
        #[arg(long)]
        val: Option<PathBuf>,
        /// Print the parameter audit and stop.
        #[arg(long)]
        audit_only: bool,
        #[command(flatten)]
        common: TrainArgs,
    },
}

#[derive(Args, Clone, Default)]
struct TrainArgs {
    /// Overrides rng_seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the iteration count of the stage being run.
    #[arg(long)]
    iterations: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            // clap renders several lines; keep the first, minus its prefix.
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: usage: {first}");
            return ExitCode::from(2);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
