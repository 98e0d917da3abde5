mod config;
mod data;
mod eval;
mod manifest;
mod summary;
mod sweep;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};

use crate::config::TrainArgs;
use crate::data::BlobArgs;

#[derive(Debug, Parser)]
#[command(name = "maccal", version, about = "Mask-based classifier calibration lab")]
struct Cli {
    /// Output root; defaults to $MACCAL_OUT, then ./maccal-out.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic blob dataset as train/val/test CSV files.
    GenData {
        #[command(flatten)]
        blobs: BlobArgs,
        /// Output subdirectory.
        #[arg(long, default_value = "data")]
        name: String,
    },
    /// Train a model and write its report, statistics and checkpoint.
    Train {
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        source: SourceArgs,
        /// Output subdirectory; defaults to `<method>-seed<seed>`.
        #[arg(long)]
        name: Option<String>,
        #[arg(long, value_enum, default_value_t)]
        precision: Precision,
    },
    /// Evaluate a trained run, optionally with temperature scaling, OOD
    /// sets, corruption and masked-inference probes.
    Eval(eval::EvalArgs),
    /// Train over a grid of configuration values and seeds.
    Sweep(sweep::SweepArgs),
    /// Summarize report files into one CSV table.
    Report(summary::ReportArgs),
}

#[derive(Debug, Clone, clap::Args)]
pub struct SourceArgs {
    /// Directory holding train.csv, val.csv and test.csv; blobs are
    /// generated from the flags below when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub blobs: BlobArgs,
}

impl SourceArgs {
    pub fn source(&self) -> data::DataSource {
        match &self.data {
            Some(path) => data::DataSource::Directory { path: path.clone() },
            None => data::DataSource::Blobs(self.blobs.clone()),
        }
    }
}

fn out_root(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("MACCAL_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("maccal-out"))
}

fn run(cli: Cli) -> Result<()> {
    let root = out_root(cli.out);
    match cli.command {
        Command::GenData { blobs, name } => train::gen_data(&blobs, &root.join(name)),
        Command::Train {
            train,
            source,
            name,
            precision,
        } => {
            let cfg = train.resolve()?;
            let name = name.unwrap_or_else(|| format!("{}-seed{}", cfg.method.name(), cfg.seed));
            train::train(&cfg, &source.source(), &root.join(name), precision)
        }
        Command::Eval(args) => eval::eval(&args),
        Command::Sweep(args) => sweep::sweep(&args, &root),
        Command::Report(args) => summary::report(&args, &root),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
