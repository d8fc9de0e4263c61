//! `priorseg` command-line front end.

mod commands;
mod config;
mod dataset;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{EvalInputs, Method, PretrainOptions};
use error::CliResult;

#[derive(Parser)]
#[command(name = "priorseg", version, about = "Few-shot segmentation with contrastive prior maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct EvalArgs {
    /// Dataset directory (images/, masks/, classes.txt).
    #[arg(long)]
    data: PathBuf,
    /// Prior extractor checkpoint.
    #[arg(long)]
    prior: PathBuf,
    /// Directory holding the trained extractor and decoder.
    #[arg(long)]
    model: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic shapes dataset.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Superpixel label maps for PNG images (files or directories).
    Patches {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = Method::Slic)]
        method: Method,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Contrastive pretraining of the prior extractor.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Continue from the state saved in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many completed epochs.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Episodic training of the feature extractor and decoder.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        prior: PathBuf,
    },
    /// Dump region maps and predictions for a few test episodes.
    Maps {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: EvalArgs,
    },
    /// Evaluate on test-fold episodes.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: EvalArgs,
        /// Also write the recall-vs-threshold sweep.
        #[arg(long)]
        alpha_sweep: bool,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth { common } => commands::synth(&config::load(common.config.as_deref())?, common.seed, &common.out),
        Command::Patches { common, method, inputs } => {
            commands::patches(&config::load(common.config.as_deref())?, method, &inputs, common.seed, &common.out)
        }
        Command::Pretrain { common, data, resume, stop_after } => commands::pretrain(
            &config::load(common.config.as_deref())?,
            &data,
            common.seed,
            &common.out,
            &PretrainOptions { resume, stop_after },
        ),
        Command::Train { common, data, prior } => {
            commands::train(&config::load(common.config.as_deref())?, &data, &prior, common.seed, &common.out)
        }
        Command::Maps { common, inputs } => {
            let inputs = EvalInputs { data: &inputs.data, prior: &inputs.prior, model: &inputs.model };
            commands::maps(&config::load(common.config.as_deref())?, &inputs, common.seed, &common.out)
        }
        Command::Eval { common, inputs, alpha_sweep } => {
            let inputs = EvalInputs { data: &inputs.data, prior: &inputs.prior, model: &inputs.model };
            commands::eval(&config::load(common.config.as_deref())?, &inputs, common.seed, alpha_sweep, &common.out)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
