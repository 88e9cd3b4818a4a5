use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;
mod run;

#[derive(Parser)]
#[command(
    name = "samb",
    version,
    about = "Train and evaluate group-token broadcasting transformers on synthetic domain shift"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Named overrides applied on top of the config file.
#[derive(clap::Args, Clone, Debug, Default)]
pub struct Overrides {
    #[arg(long)]
    pub scheme: Option<String>,
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long = "iterations-1")]
    pub iterations_1: Option<usize>,
    #[arg(long = "iterations-2")]
    pub iterations_2: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Any other config key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    Tokens,
    Scheme,
    Mode,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    SourceTrain,
    SourceEval,
    TargetTrain,
    TargetEval,
}

#[derive(Subcommand)]
enum Command {
    /// Write the four SDSH splits of a synthetic two-domain task.
    GenData {
        /// Spec file (key = value); defaults apply to missing keys.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train under the configured scheme and message-passing mode.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory from gen-data; overrides `data_dir`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Accuracy of a checkpoint on the evaluation splits.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train once per value along one axis and collect a combined CSV.
    Sweep {
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated values, e.g. `1,2,4,8`.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Dump the target pseudo-label table of a checkpoint.
    PseudoLabel {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export per-image group-assignment grids of a dynamic-mode checkpoint.
    ExportAttn {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "target-eval")]
        split: SplitArg,
        /// Export only the first this many images.
        #[arg(long)]
        limit: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { spec, out } => commands::gen_data(spec.as_deref(), &out),
        Command::Train {
            config,
            data,
            out,
            overrides,
        } => commands::train(config.as_deref(), data.as_deref(), &out, &overrides),
        Command::Eval {
            config,
            checkpoint,
            data,
        } => commands::eval(&config, &checkpoint, data.as_deref()),
        Command::Sweep {
            axis,
            values,
            config,
            data,
            out,
            overrides,
        } => commands::sweep(axis, &values, config.as_deref(), data.as_deref(), &out, &overrides),
        Command::PseudoLabel {
            config,
            checkpoint,
            data,
            out,
        } => commands::pseudo_label(&config, &checkpoint, data.as_deref(), &out),
        Command::ExportAttn {
            config,
            checkpoint,
            data,
            out,
            split,
            limit,
        } => commands::export_attn(&config, &checkpoint, data.as_deref(), &out, split, limit),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("samb: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
