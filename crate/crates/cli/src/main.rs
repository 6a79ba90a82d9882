//! `crossmodal`: generate synthetic multi-modal data, train encoders with the
//! cross-modal center loss, export embeddings and score retrieval.
//!
//! Settings resolve as command-line flag, then config file, then built-in
//! default. Every command writes `resolved_config.toml` into `--out-dir`.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{Precision, Split};

#[derive(Parser)]
#[command(name = "crossmodal", version, about = "Cross-modal center loss toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// TOML config file with [data], [model], [train] and [eval] sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory for every file the command writes.
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,
}

#[derive(Args, Clone)]
pub struct Source {
    /// Dataset manifest; without it the [data] section is generated in memory.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

#[derive(Args, Clone)]
pub struct Scoring {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum)]
    pub split: Option<Split>,
    /// Keep embeddings unnormalized.
    #[arg(long)]
    pub raw: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (manifest.toml plus one CSV per modality and split).
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train encoders, head and centers; writes checkpoint.json, centers.txt and loss_history.csv.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
        /// Loss terms to keep: l1 (cross-entropy), l2 (center), l3 (pair), e.g. `l1+l2`.
        #[arg(long)]
        loss: Option<String>,
        #[arg(long, conflicts_with = "epochs")]
        iterations: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Export embeddings.csv for one split.
    Embed {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
        #[command(flatten)]
        scoring: Scoring,
    },
    /// Source x target mAP matrix; writes report.json, map_matrix.csv and per_query_ap.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
        #[command(flatten)]
        scoring: Scoring,
        /// Score only the top R ranks.
        #[arg(long)]
        r: Option<usize>,
    },
    /// Nearest target-modality instances for one query.
    Retrieve {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
        #[command(flatten)]
        scoring: Scoring,
        #[arg(long)]
        query_id: usize,
        #[arg(long = "source")]
        source_modality: String,
        #[arg(long = "target")]
        target_modality: String,
        #[arg(long, default_value_t = 10)]
        top_n: usize,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData { common, seed } => commands::gen_data(&common, seed),
        Command::Train {
            common,
            source,
            loss,
            iterations,
            epochs,
            batch_size,
            seed,
        } => commands::train(
            &common,
            &source,
            commands::TrainOverrides {
                loss,
                iterations,
                epochs,
                batch_size,
                seed,
            },
        ),
        Command::Embed {
            common,
            source,
            scoring,
        } => commands::embed(&common, &source, &scoring),
        Command::Eval {
            common,
            source,
            scoring,
            r,
        } => commands::eval(&common, &source, &scoring, r),
        Command::Retrieve {
            common,
            source,
            scoring,
            query_id,
            source_modality,
            target_modality,
            top_n,
        } => commands::retrieve(
            &common,
            &source,
            &scoring,
            commands::Query {
                id: query_id,
                source: source_modality,
                target: target_modality,
                top_n,
            },
        ),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let cause = cause.to_string();
                if !msg.contains(&cause) {
                    msg = format!("{msg}: {cause}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
