//! Command-line front end for the composer laboratory: configuration,
//! checkpoints, metrics and the subcommand pipelines.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod metrics;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands::{Context, GenerateArgs};
use crate::config::RunConfig;
pub use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "composer-lab", version, about = "Instance-specific low-rank composition for a toy diffusion transformer")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Overrides the `seed` config key.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML config file, or `default` for the built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Artifact directory; prerequisites are read from here too.
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,
    /// `section.key=value` override, applied after the file; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the backbone and freeze it.
    Pretrain,
    /// Train a composer against the frozen backbone.
    TrainComposer,
    /// Sample images for one class and export them as PGM.
    Generate {
        #[arg(long)]
        class: usize,
        /// Sampling steps; defaults to `bench.steps`.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 4)]
        count: usize,
        /// Use the frozen backbone without composer updates.
        #[arg(long = "static")]
        use_static: bool,
    },
    /// Validation loss and toy-Fréchet of the backbone (and composer, if trained).
    Evaluate,
    /// Static vs test-time training vs composer comparison.
    Bench {
        /// Number of seeds; overrides `bench.seeds`.
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Sweep one axis, training one composer per grid value.
    Ablate {
        #[arg(long)]
        axis: String,
        /// Comma-separated values; defaults to the axis's standard grid.
        #[arg(long)]
        grid: Option<String>,
    },
    /// Quantize the backbone and train a quantization-aware composer.
    QuantTrain,
    /// Run the test-time-training baseline for one class.
    Ttt {
        #[arg(long)]
        class: usize,
    },
    /// Write the synthetic dataset as PGM files with a label index.
    ExportData {
        /// Export at most this many images per split.
        #[arg(long)]
        limit: Option<usize>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Pretrain => "pretrain",
            Command::TrainComposer => "train-composer",
            Command::Generate { .. } => "generate",
            Command::Evaluate => "evaluate",
            Command::Bench { .. } => "bench",
            Command::Ablate { .. } => "ablate",
            Command::QuantTrain => "quant-train",
            Command::Ttt { .. } => "ttt",
            Command::ExportData { .. } => "export-data",
        }
    }
}

/// Resolves the config: file, then `--set` overrides, then the dedicated
/// flags (`--seed`, `--seeds`), which win.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut overrides = cli.common.overrides.clone();
    if let Some(seed) = cli.common.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Command::Bench { seeds: Some(n) } = &cli.command {
        overrides.push(format!("bench.seeds={n}"));
    }
    Ok(RunConfig::load(cli.common.config.as_deref(), &overrides)?)
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve_config(&cli)?;
    let mut ctx = Context::new(cfg, cli.common.out.clone(), cli.command.name())?;
    match &cli.command {
        Command::Pretrain => commands::pretrain(&mut ctx),
        Command::TrainComposer => commands::train_composer_cmd(&mut ctx),
        Command::Generate {
            class,
            steps,
            count,
            use_static,
        } => commands::generate(
            &mut ctx,
            &GenerateArgs {
                class: *class,
                steps: *steps,
                count: *count,
                use_static: *use_static,
            },
        ),
        Command::Evaluate => commands::evaluate(&mut ctx),
        Command::Bench { .. } => commands::bench(&mut ctx),
        Command::Ablate { axis, grid } => commands::ablate(&mut ctx, axis, grid.as_deref()),
        Command::QuantTrain => commands::quant_train(&mut ctx),
        Command::Ttt { class } => commands::ttt(&mut ctx, *class),
        Command::ExportData { limit } => commands::export_data(&mut ctx, *limit),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
/// Failures are printed to stderr as one JSON object.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let err = CliError::Usage(e.to_string().trim().to_string());
            eprintln!("{}", serde_json::to_string(&err.report()).expect("error serializes"));
            return err.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("{}", serde_json::to_string(&err.report()).expect("error serializes"));
            err.exit_code()
        }
    }
}
