use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use melgraph::pipeline::{run_pipeline, ExperimentConfig, Overrides, Stage};
use melgraph::Error;

/// Siamese embeddings + graph network genre classifier.
#[derive(Parser)]
#[command(name = "melgraph", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or load audio, render spectrograms, write splits.
    Prepare(Common),
    /// Train the siamese network for each labeled fraction.
    TrainSiamese(Common),
    /// Embed every clip with the trained backbone.
    Embed(Common),
    /// Train the graph network and the dense baseline.
    TrainGnn(Common),
    /// Score the test nodes and write metrics.
    Evaluate(Common),
    /// Write Grad-CAM heatmaps for selected test clips.
    Explain(Common),
    /// Run every stage in order.
    All(Common),
}

/// Flags override values from the config file, which override defaults.
#[derive(Args)]
struct Common {
    /// TOML experiment config.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory shared by all stages.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Labeled fraction of the training pool; repeat for several.
    #[arg(long = "labeled-fraction", value_name = "F")]
    labeled_fraction: Vec<f64>,
}

fn is_usage_error(e: &Error) -> bool {
    matches!(e, Error::Config(_))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let (stage, common) = match cli.command {
        Command::Prepare(c) => (Stage::Prepare, c),
        Command::TrainSiamese(c) => (Stage::TrainSiamese, c),
        Command::Embed(c) => (Stage::Embed, c),
        Command::TrainGnn(c) => (Stage::TrainGnn, c),
        Command::Evaluate(c) => (Stage::Evaluate, c),
        Command::Explain(c) => (Stage::Explain, c),
        Command::All(c) => (Stage::All, c),
    };
    let overrides = Overrides {
        seed: common.seed,
        output_dir: common.out,
        labeled_fractions: common.labeled_fraction,
    };
    let result = ExperimentConfig::load(common.config.as_deref(), &overrides).and_then(|cfg| {
        cfg.validate().map_err(|e| match e {
            Error::MissingFile(p) => Error::Config(format!("path does not exist: {}", p.display())),
            other => other,
        })?;
        run_pipeline(&cfg, stage)
    });
    match result {
        Ok(Some(report)) => {
            print!("{}", report.to_table());
            ExitCode::SUCCESS
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if is_usage_error(&e) { 1 } else { 2 })
        }
    }
}
