mod commands;

use clap::{Args, Parser, Subcommand};
use neurodyn::{Error, ErrorClass};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "neurodyn", version, about = "Personalised brain network pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON configuration; defaults are used for missing keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the primary seed of the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; created if missing.
    #[arg(long, global = true, default_value = "neurodyn-out")]
    pub out: PathBuf,
    /// Worker threads for parallel stages.
    #[arg(long, global = true, env = "NEURODYN_THREADS")]
    pub threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Laplace-Beltrami eigenmodes of a surface mesh.
    Eigenmodes(#[command(flatten)] Common),
    /// Constrained wave-model fit of a BOLD matrix.
    FitDynamics(#[command(flatten)] Common),
    /// Pre-train the representation model and extract the pattern.
    TrainRepr(#[command(flatten)] Common),
    /// Spatially regularised parcellation of per-vertex features.
    Parcellate(#[command(flatten)] Common),
    /// Region time series and a functional network.
    Connectome(#[command(flatten)] Common),
    /// Graph metrics of a thresholded network.
    Metrics {
        #[command(flatten)]
        common: Common,
        /// Threshold range `start:end:step`, inclusive of both ends.
        #[arg(long)]
        tau_sweep: Option<String>,
    },
    /// Virtual-doctor modulation experiment on a synthetic cohort.
    Modulate(#[command(flatten)] Common),
    /// Within- versus between-subject network consistency.
    Consistency(#[command(flatten)] Common),
    /// Group-difference circuit and its strongest edges.
    Abnormal(#[command(flatten)] Common),
    /// Generate a synthetic cohort.
    Synth(#[command(flatten)] Common),
    /// Full pipeline on a synthetic cohort.
    E2e(#[command(flatten)] Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Eigenmodes(c)
            | Command::FitDynamics(c)
            | Command::TrainRepr(c)
            | Command::Parcellate(c)
            | Command::Connectome(c)
            | Command::Modulate(c)
            | Command::Consistency(c)
            | Command::Abnormal(c)
            | Command::Synth(c)
            | Command::E2e(c) => c,
            Command::Metrics { common, .. } => common,
        }
    }

    fn execute(&self, staging: &Path) -> neurodyn::Result<()> {
        match self {
            Command::Eigenmodes(c) => commands::eigenmodes(c, staging),
            Command::FitDynamics(c) => commands::fit_dynamics(c, staging),
            Command::TrainRepr(c) => commands::train_repr(c, staging),
            Command::Parcellate(c) => commands::parcellate(c, staging),
            Command::Connectome(c) => commands::connectome(c, staging),
            Command::Metrics { common, tau_sweep } => commands::metrics(common, tau_sweep.as_deref(), staging),
            Command::Modulate(c) => commands::modulate(c, staging),
            Command::Consistency(c) => commands::consistency(c, staging),
            Command::Abnormal(c) => commands::abnormal(c, staging),
            Command::Synth(c) => commands::synth(c, staging),
            Command::E2e(c) => commands::e2e(c, staging),
        }
    }
}

/// Runs the command into a staging directory beside `out` and moves the
/// artifacts over only on success, so a failed run leaves nothing behind.
fn run(command: &Command) -> neurodyn::Result<()> {
    let common = command.common();
    let out = &common.out;
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent)?;
    let staging = tempfile::Builder::new().prefix(".neurodyn-staging").tempdir_in(&parent)?;
    neurodyn::pipeline::with_threads(common.threads, || command.execute(staging.path()))??;
    fs::create_dir_all(out)?;
    for entry in fs::read_dir(staging.path())? {
        let entry = entry?;
        fs::rename(entry.path(), out.join(entry.file_name()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { ErrorClass::Config.exit_code() } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    e.class().exit_code()
}
