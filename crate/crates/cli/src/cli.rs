use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use ynet_core::gradcheck::Corruption;

use crate::commands;
use crate::config::{ConfigBuilder, RunConfig};
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "ynet", version, about = "Train, evaluate and inspect the dual-branch aerial scene classifier")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,

    #[command(subcommand)]
    pub command: Command,
}

/// Settings shared by every subcommand. Precedence: built-in defaults,
/// then `--config`, then `--set`, then the dedicated flags.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// key = value configuration file
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Dataset root with one directory per class
    #[arg(long, global = true, value_name = "PATH")]
    pub data_root: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_name = "N")]
    pub epochs: Option<usize>,
    #[arg(long, global = true, value_name = "N")]
    pub batch_size: Option<usize>,
    /// Initial (maximum) learning rate
    #[arg(long, global = true, value_name = "F")]
    pub lr: Option<f64>,
    /// Checkpoint to read (eval, predict, inspect) or final checkpoint to write (train)
    #[arg(long, global = true, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, global = true, value_name = "PATH")]
    pub out_dir: Option<PathBuf>,
    /// Scaled-down channel plan and 32x32 inputs
    #[arg(long, global = true)]
    pub tiny: bool,
    /// Replace the attention map with ones
    #[arg(long, global = true)]
    pub fusam_bypass: bool,
    /// Train N independent runs with seeds seed, seed+1, ...
    #[arg(long, global = true, value_name = "N")]
    pub repeat: Option<usize>,
    /// Override any config key
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train, evaluating on the test split after every epoch
    Train {
        /// Continue from a resume file written by an earlier run
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint and export report, confusion, scores and embeddings
    Eval {
        #[arg(long, value_name = "train|test")]
        split: Option<String>,
    },
    /// Classify images with a checkpoint
    Predict {
        #[arg(required = true, value_name = "IMAGE")]
        images: Vec<PathBuf>,
        /// Also write the full probability distribution per image
        #[arg(long, value_name = "PATH")]
        probs_csv: Option<PathBuf>,
    },
    /// Compare every analytic gradient with finite differences
    Gradcheck {
        /// Test hook: perturb the convolution backward pass
        #[arg(long, hide = true)]
        corrupt_conv_backward: bool,
    },
    /// Print the shape trace and parameter counts
    Inspect,
}

impl CommonArgs {
    pub fn resolve(&self, extra: &[(&str, String)]) -> Result<RunConfig, CliError> {
        let mut b = ConfigBuilder::new();
        if let Some(path) = &self.config {
            b.apply_file(path)?;
        }
        for o in &self.overrides {
            b.apply_assignment(o)?;
        }
        let path = |p: &PathBuf| p.display().to_string();
        let flags = [
            ("data_root", self.data_root.as_ref().map(path)),
            ("seed", self.seed.map(|v| v.to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| v.to_string())),
            ("checkpoint", self.checkpoint.as_ref().map(path)),
            ("out_dir", self.out_dir.as_ref().map(path)),
            ("tiny", self.tiny.then(|| "true".to_string())),
            ("fusam_bypass", self.fusam_bypass.then(|| "true".to_string())),
            ("repeat", self.repeat.map(|v| v.to_string())),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                b.set(key, &v)?;
            }
        }
        for (key, value) in extra {
            b.set(key, value)?;
        }
        b.build()
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { resume } => {
            let cfg = cli.common.resolve(&[])?;
            commands::train(&cfg, resume.as_deref())?;
        }
        Command::Eval { split } => {
            let extra: Vec<(&str, String)> = split.into_iter().map(|s| ("split", s)).collect();
            let cfg = cli.common.resolve(&extra)?;
            commands::eval(&cfg)?;
        }
        Command::Predict { images, probs_csv } => {
            let cfg = cli.common.resolve(&[])?;
            commands::predict(&cfg, &images, probs_csv.as_deref())?;
        }
        Command::Gradcheck { corrupt_conv_backward } => {
            let cfg = cli.common.resolve(&[])?;
            let corruption = if corrupt_conv_backward {
                Corruption::ConvBackward
            } else {
                Corruption::None
            };
            commands::gradcheck(cfg.seed, corruption)?;
        }
        Command::Inspect => {
            let cfg = cli.common.resolve(&[])?;
            commands::inspect(&cfg)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_config_and_set() {
        let cli = Cli::parse_from([
            "ynet", "train", "--set", "epochs=5", "--epochs", "7", "--tiny", "--set", "lr=0.01", "--seed", "9",
        ]);
        let cfg = cli.common.resolve(&[]).unwrap();
        assert_eq!((cfg.epochs, cfg.lr, cfg.seed, cfg.tiny, cfg.input_size), (7, 0.01, 9, true, 32));
    }

    #[test]
    fn global_flags_work_before_and_after_the_subcommand() {
        let a = Cli::parse_from(["ynet", "--batch-size", "4", "inspect"]);
        let b = Cli::parse_from(["ynet", "inspect", "--batch-size", "4"]);
        assert_eq!(a.common.resolve(&[]).unwrap(), b.common.resolve(&[]).unwrap());
    }
}
