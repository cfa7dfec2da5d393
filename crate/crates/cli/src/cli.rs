//! Argument parsing and dispatch.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::{CliError, EXIT_INVALID, EXIT_OK};
use crate::pipeline::{self, Context};

#[derive(Debug, Parser)]
#[command(name = "rgr", version, about = "Registration-based low-rank moving grids")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Worker threads; 0 picks one per core.
    #[arg(long, global = true, env = "RGR_THREADS", default_value_t = 0)]
    pub threads: usize,

    /// Suppress progress messages on stderr.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the snapshot matrix.
    Generate(StageArgs),
    /// Train the moving grid on generated snapshots.
    Train(StageArgs),
    /// Rerun the pipeline on the trained grid and write metrics.
    Evaluate(StageArgs),
    /// Train on the leading steps and forecast the rest.
    Forecast(StageArgs),
    /// Generate, train, evaluate and (if configured) forecast.
    Run(StageArgs),
    /// Print a matrix file as CSV.
    ExportCsv {
        /// A file in the RGR1 matrix format.
        matrix: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct StageArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: PathBuf,

    /// Output directory, overriding the config.
    #[arg(long)]
    pub out: Option<PathBuf>,

    /// Seed, overriding the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code.
pub fn main_with<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        // Already configured, as happens when tests call in repeatedly.
        if !cli.quiet {
            eprintln!("note: keeping the existing thread pool ({e})");
        }
    }
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    let context = |a: &StageArgs| Context::new(&a.config, a.out.clone(), a.seed, cli.quiet);
    match &cli.command {
        Command::Generate(a) => pipeline::generate(&context(a)?).map(drop),
        Command::Train(a) => pipeline::train(&context(a)?).map(drop),
        Command::Evaluate(a) => pipeline::evaluate(&context(a)?).map(drop),
        Command::Forecast(a) => pipeline::forecast(&context(a)?).map(drop),
        Command::Run(a) => pipeline::run(&context(a)?).map(drop),
        Command::ExportCsv { matrix } => {
            let text = pipeline::export_csv(matrix)?;
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes()).and_then(|()| out.flush()).map_err(|e| CliError::Core(e.into()))
        }
    }
}
