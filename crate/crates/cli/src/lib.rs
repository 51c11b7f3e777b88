//! Command-line front end: every experiment step as a resumable subcommand.

pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;

use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use mfil::inversion::Variant;
use mfil::model_zoo::Stage;

pub use config::RunConfig;
pub use error::CliError;
use pipeline::Pipeline;

#[derive(Parser, Debug)]
#[command(name = "mfil", about = "Modular feature inversion experiments", arg_required_else_help = true)]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the master seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory of the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic train/val/test splits.
    GenData,
    /// Train the forward model.
    TrainForward,
    /// Train inverse components (every stage unless --stage).
    TrainInverse {
        #[arg(long)]
        stage: Option<Stage>,
        #[arg(long)]
        variant: Option<Variant>,
        /// Train the direct stage-to-image inverse instead.
        #[arg(long)]
        full_path: bool,
    },
    /// Joint fine-tuning with the reconstruction trade-off.
    Finetune {
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Reconstruction grids for the first test images.
    Reconstruct {
        #[arg(long)]
        stage: Option<Stage>,
    },
    /// Color-filter divergence of inputs and reconstructions.
    PerturbColor {
        #[arg(long)]
        stage: Option<Stage>,
    },
    /// Token-manipulation locality scores.
    PerturbTokens {
        #[arg(long)]
        stage: Option<Stage>,
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Reconstruct from every encoder (and decoder) layer.
    InvertIntermediate,
    /// Parameter budget of full-path versus modular inverses.
    Budget {
        #[arg(long)]
        n: u64,
        #[arg(long)]
        p: u64,
    },
    /// Stage MSE profile against the mean-image baseline.
    Profile,
    /// Run every analysis and write a combined report.
    Report,
}

fn init_threads() {
    if let Some(n) = std::env::var("MFIL_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let path = cli.config.as_ref().ok_or_else(|| CliError::Usage("--config is required".into()))?;
    let mut c = RunConfig::load(path)?;
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    if let Some(o) = &cli.out {
        c.out = Some(o.clone());
    }
    Ok(c)
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    if let Command::Budget { n, p } = cli.command {
        return commands::budget(n, p);
    }
    let mut p = Pipeline::open(load_config(&cli)?)?;
    match cli.command {
        Command::GenData => commands::gen_data(&mut p),
        Command::TrainForward => commands::train_forward(&mut p),
        Command::TrainInverse { stage, variant, full_path } => {
            commands::train_inverse(&mut p, stage, variant, full_path).map(drop)
        }
        Command::Finetune { lambda } => commands::finetune(&mut p, lambda).map(drop),
        Command::Reconstruct { stage } => commands::reconstruct_cmd(&mut p, stage),
        Command::PerturbColor { stage } => commands::perturb_color(&mut p, stage).map(drop),
        Command::PerturbTokens { stage, variant } => commands::perturb_tokens(&mut p, stage, variant).map(drop),
        Command::InvertIntermediate => commands::invert_intermediate(&mut p).map(drop),
        Command::Profile => commands::profile(&mut p).map(drop),
        Command::Report => commands::report(&mut p),
        Command::Budget { .. } => unreachable!("handled above"),
    }
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code. Failures print one `error[<category>]: ...` line.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    init_threads();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    eprint!("{e}");
                    let first = e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
                    eprintln!("{}", CliError::Usage(first));
                    2
                }
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
