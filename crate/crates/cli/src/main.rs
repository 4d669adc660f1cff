mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "trimodal", version, about = "Tri-modal sketch/text/photo embedding: data, training, retrieval, captioning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic triplet dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `data.records`.
        #[arg(long)]
        records: Option<usize>,
        /// Overrides `data.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the joint objective and write a checkpoint plus a metrics log.
    Train(TrainArgs),
    /// Train the photo-conditioned caption path only.
    PretrainCaption(TrainArgs),
    /// Rank a photo gallery for one query and report Acc@{1,10} over the dataset.
    Retrieve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// Record whose sketch/text is the shown query.
        #[arg(long, default_value_t = 0)]
        query: usize,
        /// Ranked gallery entries printed for the shown query.
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Sample captions for one record and score them against its text.
    Caption {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, value_enum, default_value_t = SourceArg::Photo)]
        source: SourceArg,
        #[arg(long, default_value_t = 100)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Retrieval accuracy and caption BLEU report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Report path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every parameter gradient of a small model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-6)]
        h: f64,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
        /// Absolute difference below which a tensor passes regardless of `tol`.
        #[arg(long, default_value_t = 1e-8)]
        atol: f64,
    },
    /// Print a checkpoint's header and parameter table.
    InspectCkpt {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Metrics log path; defaults to `<out>.metrics.tsv`.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Resume from a checkpoint instead of a fresh initialization.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    S,
    T,
    St,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SourceArg {
    Sketch,
    Photo,
}

fn threads() -> Result<usize, CliError> {
    match std::env::var("TRIMODAL_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("TRIMODAL_THREADS must be a non-negative integer, got {v:?}"))),
        Err(_) => Ok(0),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    // every command is single-threaded, so any cap is already met
    threads()?;
    match cli.command {
        Command::GenData {
            config,
            out,
            records,
            seed,
        } => commands::gen_data(config.as_deref(), &out, records, seed),
        Command::Train(a) => commands::train(&a.into(), false),
        Command::PretrainCaption(a) => commands::train(&a.into(), true),
        Command::Retrieve {
            ckpt,
            data,
            mode,
            query,
            top,
        } => {
            let mode = match mode {
                ModeArg::S => trimodal_core::model::QuerySet::Sketch,
                ModeArg::T => trimodal_core::model::QuerySet::Text,
                ModeArg::St => trimodal_core::model::QuerySet::Both,
            };
            commands::retrieve(&ckpt, &data, mode, query, top)
        }
        Command::Caption {
            ckpt,
            data,
            index,
            source,
            k,
            seed,
        } => commands::caption(&ckpt, &data, index, matches!(source, SourceArg::Photo), k, seed),
        Command::Eval {
            ckpt,
            data,
            config,
            out,
        } => commands::eval(&ckpt, &data, config.as_deref(), out.as_deref()),
        Command::Gradcheck { seed, h, tol, atol } => commands::gradcheck(seed, h, tol, atol),
        Command::InspectCkpt { ckpt } => commands::inspect(&ckpt),
    }
}

impl From<TrainArgs> for commands::TrainOptions {
    fn from(a: TrainArgs) -> Self {
        Self {
            data: a.data,
            config: a.config,
            out: a.out,
            metrics: a.metrics,
            steps: a.steps,
            seed: a.seed,
            lr: a.lr,
            batch_size: a.batch_size,
            resume: a.resume,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
