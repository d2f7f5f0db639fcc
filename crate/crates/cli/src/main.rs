//! `kgforge` command-line driver.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{Overrides, RunConfig};
use kgforge::Error;

#[derive(Parser)]
#[command(name = "kgforge", version, about = "Multimodal knowledge-graph link prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Partition triples into train/valid/test.
    Split(Common),
    /// Contrastive pretraining per node type; writes z tables.
    Pretrain(Common),
    /// Train the link predictor.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from `<out>/last.ckpt`.
        #[arg(long)]
        resume: bool,
        /// End this invocation once this many epochs are done.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Score a split part at each configured negative ratio.
    Eval(Common),
    /// Write encoder embeddings of selected nodes.
    Export(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    neg_ratio: Option<usize>,
    #[arg(long, value_parser = ["none", "attention", "redaf"])]
    fusion: Option<String>,
    #[arg(long, value_parser = ["none", "dgi", "ggd-paper", "grace"])]
    gcl: Option<String>,
    #[arg(long)]
    freeze_features: bool,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> kgforge::Result<RunConfig> {
        RunConfig::load(
            &self.config,
            &Overrides {
                seed: self.seed,
                neg_ratio: self.neg_ratio,
                fusion: self.fusion.clone(),
                gcl: self.gcl.clone(),
                freeze_features: self.freeze_features,
                dim: self.dim,
                out: self.out.clone(),
            },
        )
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Load { .. } | Error::Data(_) | Error::Io { .. } => 3,
        Error::Numeric { .. } => 4,
        Error::Contract(_) | Error::SamplingExhausted(_) | Error::UndefinedMetric(_) => 1,
    }
}

fn run(cli: Cli) -> kgforge::Result<PathBuf> {
    match cli.command {
        Command::Split(c) => commands::cmd_split(&c.load()?),
        Command::Pretrain(c) => commands::cmd_pretrain(&c.load()?),
        Command::Train {
            common,
            resume,
            stop_after,
        } => commands::cmd_train(&common.load()?, resume, stop_after),
        Command::Eval(c) => commands::cmd_eval(&c.load()?),
        Command::Export(c) => commands::cmd_export(&c.load()?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // clap exits with status 2 on usage errors.
    let cli = Cli::parse();
    match run(cli) {
        Ok(manifest) => {
            log::info!("wrote {}", manifest.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
