use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{error, info};

use dlra_core::harness::{run_experiment, ExperimentFile};
use dlra_core::models::{ModelConfig, MODEL_NAMES};

#[derive(Parser)]
#[command(name = "dlra", version, about = "Dynamical low-rank SDE experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every experiment in a TOML file.
    Run {
        spec: PathBuf,
        /// Root directory for experiment outputs.
        #[arg(long, default_value = "results")]
        out: PathBuf,
        /// Run only the named experiment.
        #[arg(long)]
        only: Option<String>,
    },
    /// List the built-in models with their default sizes.
    ListModels,
    /// Parse and validate a TOML file without running it.
    Validate { spec: PathBuf },
}

const EXIT_VALIDATION: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

fn configure_threads() {
    let Ok(v) = std::env::var("DLRA_THREADS") else { return };
    match v.parse::<usize>() {
        Ok(n) if n > 0 => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                error!("cannot configure {n} threads: {e}");
            }
        }
        _ => error!("ignoring DLRA_THREADS={v}: expected a positive integer"),
    }
}

fn load(spec: &Path) -> Result<ExperimentFile, ExitCode> {
    let file = ExperimentFile::load(spec).map_err(|e| {
        error!("{e}");
        ExitCode::from(if e.is_validation() { EXIT_VALIDATION } else { EXIT_RUNTIME })
    })?;
    file.validate().map_err(|e| {
        error!("{e}");
        ExitCode::from(EXIT_VALIDATION)
    })?;
    Ok(file)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    configure_threads();
    let cli = Cli::parse();
    match cli.command {
        Command::ListModels => {
            println!("{:<16} {:>4} {:>4} {:>5} {:>6}  initial law", "name", "d", "m", "rank", "T");
            for name in MODEL_NAMES {
                match ModelConfig::named(name).build() {
                    Ok(p) => println!(
                        "{:<16} {:>4} {:>4} {:>5} {:>6}  {}",
                        name,
                        p.model.dim(),
                        p.model.noise_dim(),
                        p.default_rank,
                        p.t_final,
                        p.initial.description()
                    ),
                    Err(e) => {
                        error!("{name}: {e}");
                        return ExitCode::from(EXIT_RUNTIME);
                    }
                }
            }
            ExitCode::SUCCESS
        }
        Command::Validate { spec } => match load(&spec) {
            Ok(f) => {
                println!("{}: {} experiment(s) ok", spec.display(), f.experiment.len());
                ExitCode::SUCCESS
            }
            Err(code) => code,
        },
        Command::Run { spec, out, only } => {
            let file = match load(&spec) {
                Ok(f) => f,
                Err(code) => return code,
            };
            let selected: Vec<_> = file
                .experiment
                .iter()
                .filter(|e| only.as_ref().is_none_or(|n| &e.name == n))
                .collect();
            if selected.is_empty() {
                error!("no experiment named {}", only.unwrap_or_default());
                return ExitCode::from(EXIT_VALIDATION);
            }
            for e in selected {
                info!("running {}", e.name);
                match run_experiment(e, &out) {
                    Ok(o) => info!("{} done in {:.1}s -> {}", e.name, o.manifest.wall_time_seconds, o.dir.display()),
                    Err(err) => {
                        error!("{}: {err}", e.name);
                        return ExitCode::from(if err.is_validation() { EXIT_VALIDATION } else { EXIT_RUNTIME });
                    }
                }
            }
            ExitCode::SUCCESS
        }
    }
}
