//! `inloop` command-line front end.

mod commands;
mod output;

use clap::{Args, Parser, Subcommand};
use inloop::config::{Config, ConfigError};
use output::{sha256_hex, OutputDir, RunManifest};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

#[derive(Parser, Debug)]
#[command(name = "inloop", version, about = "Feedback-cooled optomechanical cavity: linear response, spectra and a time-domain oracle")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Override a configuration value, e.g. `filter.gain=0.9` or `modes[1].n_th=1e4`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Maximum number of worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Random seed for the oracle.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug, Clone)]
enum Command {
    /// Cavity susceptibilities, loop transfer and transmission on the frequency grid.
    Response,
    /// Self-consistent mean-field operating point.
    SteadyState,
    /// Bright/dark basis and hybridization diagnostics.
    Modes,
    /// Symmetrized displacement spectra of both modes.
    Spectrum {
        /// Constant added to a display copy of each spectrum.
        #[arg(long)]
        shot_floor: Option<f64>,
    },
    /// Phonon occupancy of both modes.
    Occupancy,
    /// Occupancy and stability along a detuning or gain axis.
    Sweep {
        #[arg(long, value_parser = ["detuning", "gain"])]
        axis: Option<String>,
        #[arg(long)]
        start: Option<f64>,
        #[arg(long)]
        stop: Option<f64>,
        #[arg(long)]
        points: Option<usize>,
    },
    /// Loop margin and exact closed-loop pole count.
    Stability,
    /// Fit delay and polynomial filter shape to a measured open-loop response.
    FitFilter,
    /// Stochastic time-domain simulation and its periodogram.
    Oracle,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Response => "response",
            Command::SteadyState => "steady-state",
            Command::Modes => "modes",
            Command::Spectrum { .. } => "spectrum",
            Command::Occupancy => "occupancy",
            Command::Sweep { .. } => "sweep",
            Command::Stability => "stability",
            Command::FitFilter => "fit-filter",
            Command::Oracle => "oracle",
        }
    }

    /// Subcommand flags that are shorthands for configuration overrides.
    fn implied_overrides(&self) -> Vec<String> {
        let mut v = Vec::new();
        if let Command::Sweep { axis, start, stop, points } = self {
            if let Some(a) = axis {
                v.push(format!("sweep.axis=\"{a}\""));
            }
            if let Some(x) = start {
                v.push(format!("sweep.start={x:e}"));
            }
            if let Some(x) = stop {
                v.push(format!("sweep.stop={x:e}"));
            }
            if let Some(n) = points {
                v.push(format!("sweep.points={n}"));
            }
        }
        v
    }
}

/// Failure classes mapped onto exit codes.
#[derive(Debug)]
pub enum Failure {
    /// Bad input: exit 1.
    Validation(String),
    /// Numerical or runtime failure: exit 2.
    Numerical(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Numerical(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Validation(m) | Failure::Numerical(m) => m,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Numerical(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Numerical(format!("i/o error: {e}"))
    }
}

pub struct Context<'a> {
    pub config: &'a Config,
    pub config_dir: &'a Path,
    pub seed: Option<u64>,
}

fn run(cli: Cli) -> Result<PathBuf, Failure> {
    let start = Instant::now();
    let path = cli.common.config.as_ref().ok_or_else(|| Failure::Validation("--config is required".into()))?;
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Validation(format!("cannot read config {}: {e}", path.display())))?;
    let mut overrides = cli.common.set.clone();
    overrides.extend(cli.command.implied_overrides());
    let config = Config::from_toml(&text, &overrides)
        .map_err(|e| with_path(Failure::from(e), path))?;
    let canonical = toml::to_string(&config).map_err(|e| Failure::Numerical(e.to_string()))?;
    let hash = sha256_hex(&canonical);

    if let Some(n) = cli.common.threads {
        if n == 0 {
            return Err(Failure::Validation("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Numerical(e.to_string()))?;
    }

    let name = cli.command.name();
    let mut out = OutputDir::new(&cli.common.out, name, &hash)?;
    let config_dir = path.parent().unwrap_or(Path::new("."));
    let ctx = Context { config: &config, config_dir, seed: cli.common.seed };
    match &cli.command {
        Command::Response => commands::response(&ctx, &mut out)?,
        Command::SteadyState => commands::steady_state(&ctx, &mut out)?,
        Command::Modes => commands::modes(&ctx, &mut out)?,
        Command::Spectrum { shot_floor } => commands::spectrum(&ctx, &mut out, *shot_floor)?,
        Command::Occupancy => commands::occupancy(&ctx, &mut out)?,
        Command::Sweep { .. } => commands::sweep(&ctx, &mut out)?,
        Command::Stability => commands::stability(&ctx, &mut out)?,
        Command::FitFilter => commands::fit_filter(&ctx, &mut out)?,
        Command::Oracle => commands::oracle(&ctx, &mut out)?,
    }
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION"),
        subcommand: name.to_string(),
        config_path: path.display().to_string(),
        config_sha256: hash,
        overrides,
        seed: cli.common.seed,
        outputs: Vec::new(),
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    Ok(out.finish(manifest)?)
}

fn with_path(f: Failure, path: &Path) -> Failure {
    match f {
        Failure::Validation(m) => Failure::Validation(format!("{}: {m}", path.display())),
        other => other,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // Usage errors are input errors; help and version are not errors.
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(manifest) => {
            log::info!("wrote {}", manifest.display());
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
