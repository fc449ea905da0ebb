//! `cam`: reproducible pipelines from corpus synthesis to evaluation.

mod config;
mod data;
mod evaluate;
mod generate;
mod log;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

#[derive(Debug, Parser)]
#[command(name = "cam", version, about = "Causally-aware, metric-guided text generation pipelines")]
struct Cli {
    /// JSON file with one section per subcommand; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    Synth(data::SynthArgs),
    Ingest(data::IngestArgs),
    Features(data::FeaturesArgs),
    Ate(data::AteArgs),
    TrainClf(train::TrainClfArgs),
    TrainGen(train::TrainGenArgs),
    TrainCvae(train::TrainCvaeArgs),
    Generate(generate::GenerateArgs),
    GenerateCvae(generate::GenerateCvaeArgs),
    Evaluate(evaluate::EvaluateArgs),
}

fn main() -> ExitCode {
    log::init();
    let cli = Cli::parse();
    let config = cli.config.as_deref();
    let result = match cli.command {
        Command::Synth(a) => a.run(config),
        Command::Ingest(a) => a.run(config),
        Command::Features(a) => a.run(config),
        Command::Ate(a) => a.run(config),
        Command::TrainClf(a) => a.run(config),
        Command::TrainGen(a) => a.run(config),
        Command::TrainCvae(a) => a.run(config),
        Command::Generate(a) => a.run(config),
        Command::GenerateCvae(a) => a.run(config),
        Command::Evaluate(a) => a.run(config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(ToString::to_string).collect();
            log::emit("error", "failed", json!({ "error": chain.join(": ") }));
            ExitCode::FAILURE
        }
    }
}
