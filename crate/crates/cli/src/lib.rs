//! Command-line driver: training, evaluation, inference, attention export,
//! gradient checking and parameter census.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::Parser;

pub use commands::{execute, Command, RunSpec};

#[derive(Debug, Parser)]
#[command(name = "attnseg", version, about = "Comprehensive-attention segmentation")]
pub struct Cli {
    #[arg(value_enum)]
    pub command: Command,
    /// JSON file with `model`, `train` and `data` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory, created if absent.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Dotted-key override such as `train.lr0=1e-3`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl Cli {
    pub fn spec(self) -> RunSpec {
        RunSpec {
            command: self.command,
            config: self.config,
            out: self.out,
            seed: self.seed,
            overrides: self.overrides,
        }
    }
}
