//! `tzsh`: synthesize zero-shot benchmarks, train the two-stream hashing
//! model, encode feature files to binary codes, and evaluate retrieval.
//!
//! Exit codes: 0 success, 1 usage, 2 data or configuration error,
//! 3 numeric failure during training.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use tzsh_core::params::ParamStore;
use tzsh_core::pipeline::{self, TrainConfig};
use tzsh_core::retrieval::{self, CodeIndex};
use tzsh_core::synth::{self, SynthSpec};
use tzsh_core::{Error, Result};

#[derive(Parser)]
#[command(name = "tzsh", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic zero-shot benchmark into a data directory.
    Synth {
        /// Benchmark spec, a key=value file.
        #[arg(long)]
        spec: PathBuf,
        /// Output data directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a data directory and write metrics plus a checkpoint.
    Train {
        /// Training config, a key=value file.
        #[arg(long)]
        config: PathBuf,
        /// Data directory (as produced by `synth`).
        #[arg(long)]
        data: PathBuf,
        /// Output directory for metrics.jsonl and checkpoint.tzsh.
        #[arg(long)]
        out: PathBuf,
        /// Continue a finished run in the same output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Encode a feature file to binary codes with a trained checkpoint.
    Encode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
        /// Output codes file, one `<label> <bitstring>` per line.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate retrieval of query codes against database codes.
    Eval {
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        db: PathBuf,
        /// Hamming radius for the precision metric.
        #[arg(long, default_value_t = 2)]
        radius: usize,
        /// Output metrics file, JSON lines.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Serialize)]
struct MetricLine {
    metric: String,
    bits: usize,
    value: f64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints its own message; keep exit code 1 for usage
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { spec, out } => {
            let spec = SynthSpec::from_file(&spec)?;
            let dataset = synth::generate(&spec)?;
            synth::write_dataset(&dataset, &out)?;
            println!(
                "wrote {} source, {} unlabeled, {} query, {} database rows and {} classes to {}",
                dataset.source.len(),
                dataset.unlabeled.len(),
                dataset.queries.len(),
                dataset.db.len(),
                dataset.vocab.len(),
                out.display()
            );
            Ok(())
        }
        Command::Train {
            config,
            data,
            out,
            resume,
        } => {
            let cfg = TrainConfig::from_file(&config)?;
            let summary = pipeline::run(&cfg, &data, &out, resume)?;
            println!(
                "trained {} epochs; final map {:.4}, precision@2 {:.4}; checkpoint {}",
                summary.epochs_completed,
                summary.final_map,
                summary.final_precision_at_2,
                summary.checkpoint_path.display()
            );
            Ok(())
        }
        Command::Encode {
            checkpoint,
            features,
            out,
        } => {
            let params = ParamStore::load(&checkpoint)?;
            let bb = pipeline::infer_backbone_config(&params)?;
            let batch = synth::load_features(&features)?;
            let codes = pipeline::encode_features(&params, &bb, &batch)?;
            codes.save(&out)?;
            println!(
                "encoded {} rows to {}-bit codes in {}",
                codes.len(),
                codes.bits(),
                out.display()
            );
            Ok(())
        }
        Command::Eval {
            queries,
            db,
            radius,
            out,
        } => {
            let queries = CodeIndex::load(&queries)?;
            let db = CodeIndex::load(&db)?;
            let map = retrieval::mean_average_precision(&queries, &db)?;
            let precision = retrieval::precision_at_radius(&queries, &db, radius)?;
            let lines = [
                MetricLine {
                    metric: "map".into(),
                    bits: queries.bits(),
                    value: map.value,
                },
                MetricLine {
                    metric: format!("precision_at_{radius}"),
                    bits: queries.bits(),
                    value: precision,
                },
            ];
            let mut file = std::fs::File::create(&out).map_err(Error::Io)?;
            for line in &lines {
                let json = serde_json::to_string(line)
                    .map_err(|e| Error::Data(format!("metrics serialization: {e}")))?;
                use std::io::Write;
                writeln!(file, "{json}")?;
                println!("{json}");
            }
            Ok(())
        }
    }
}
