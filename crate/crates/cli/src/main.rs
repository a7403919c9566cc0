//! `xfrn` — batch pipeline for transfer-neuron experiments.
//!
//! Subcommands run the pipeline stages end to end against one experiment
//! config: `extract` captures activations into run files, `detect` ranks
//! transfer-neuron candidates, `intervene` re-measures similarity under
//! deactivation masks, `stats` computes latent-space and neuron statistics,
//! `evaluate` runs the QA protocol, and `report` renders figures.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 model
//! error.

mod config;
mod pipeline;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use xfrn_core::detector::NeuronType;
use xfrn_core::ErrorCategory;

use pipeline::Ctx;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TypeArg {
    Type1,
    Type2,
}

impl From<TypeArg> for NeuronType {
    fn from(t: TypeArg) -> NeuronType {
        match t {
            TypeArg::Type1 => NeuronType::Type1,
            TypeArg::Type2 => NeuronType::Type2,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "xfrn",
    version,
    about = "Detect and intervene on transfer neurons in gated-MLP decoders"
)]
struct Cli {
    /// Experiment configuration (JSON)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config's master seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the config's output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Capture activations over the train/test splits and write run files
    Extract,
    /// Rank transfer-neuron candidates for one language
    Detect {
        #[arg(long = "type", value_enum)]
        neuron_type: TypeArg,
        #[arg(long)]
        lang: String,
        #[arg(long)]
        top_n: Option<usize>,
    },
    /// Re-measure similarity under detected and baseline masks
    Intervene {
        #[arg(long = "type", value_enum)]
        neuron_type: TypeArg,
        #[arg(long)]
        lang: String,
    },
    /// Latent-space diagnostics and neuron statistics over the test split
    Stats,
    /// Zero-shot QA under the three-condition intervention protocol
    Evaluate {
        #[arg(long)]
        lang: Option<String>,
    },
    /// Render figures (with sibling CSV data) from pipeline outputs
    Report,
}

fn run(cli: Cli) -> xfrn_core::Result<()> {
    let config_path = cli.config.ok_or_else(|| {
        xfrn_core::Error::Config("--config is required (see README for the format)".into())
    })?;
    let ctx = Ctx::load(&config_path, cli.seed, cli.out)?;
    match cli.command {
        Command::Extract => pipeline::cmd_extract(&ctx),
        Command::Detect {
            neuron_type,
            lang,
            top_n,
        } => pipeline::cmd_detect(&ctx, neuron_type.into(), &lang, top_n),
        Command::Intervene { neuron_type, lang } => {
            pipeline::cmd_intervene(&ctx, neuron_type.into(), &lang)
        }
        Command::Stats => pipeline::cmd_stats(&ctx),
        Command::Evaluate { lang } => pipeline::cmd_evaluate(&ctx, lang.as_deref()),
        Command::Report => pipeline::cmd_report(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e.category() {
                ErrorCategory::Config => 2,
                ErrorCategory::Data => 3,
                ErrorCategory::Model => 4,
            };
            ExitCode::from(code)
        }
    }
}
