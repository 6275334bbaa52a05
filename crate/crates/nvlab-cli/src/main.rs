//! `nvlab` — drive the fiber magnetometer simulator from the shell.
//!
//! Every subcommand takes the same flags: a TOML run configuration plus
//! optional output-directory, seed, and dotted-path value overrides. The
//! subcommand must agree with the `experiment` key declared in the config;
//! the redundancy catches the common mistake of pointing a command at the
//! wrong file.
//!
//! Exit codes: 0 on success, 1 on runtime failures (I/O, fits, malformed
//! data files), 2 on configuration and usage errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nvlab_core::config::{load_config, split_override, ExperimentKind};
use nvlab_core::experiments::run_experiment;
use nvlab_core::Error;

#[derive(Parser)]
#[command(name = "nvlab", version, about = "Simulated NV fiber magnetometer bench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sweep the microwave carrier across a resonance and fit the line
    OdmrSweep(RunArgs),
    /// Repeat sweeps while stepping one drive parameter
    ParamSweep(RunArgs),
    /// Record the demodulated response to a square test field
    TestfieldTrace(RunArgs),
    /// Compute Allan deviation of a field trace
    Allan(RunArgs),
    /// Run the closed-loop carrier tracker through a field scenario
    Track(RunArgs),
    /// Compare measured sensitivity against the photon shot-noise floor
    Limits(RunArgs),
}

impl Command {
    fn kind(&self) -> ExperimentKind {
        match self {
            Command::OdmrSweep(_) => ExperimentKind::OdmrSweep,
            Command::ParamSweep(_) => ExperimentKind::ParamSweep,
            Command::TestfieldTrace(_) => ExperimentKind::TestfieldTrace,
            Command::Allan(_) => ExperimentKind::Allan,
            Command::Track(_) => ExperimentKind::Track,
            Command::Limits(_) => ExperimentKind::Limits,
        }
    }

    fn args(&self) -> &RunArgs {
        match self {
            Command::OdmrSweep(a)
            | Command::ParamSweep(a)
            | Command::TestfieldTrace(a)
            | Command::Allan(a)
            | Command::Track(a)
            | Command::Limits(a) => a,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Path to a TOML run configuration
    #[arg(long, value_name = "PATH")]
    config: PathBuf,

    /// Write artifacts here instead of the configured out_dir
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Override the RNG seed
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,

    /// Override a config value by dotted path, e.g. --set drive.f_depth=20e3
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn init_thread_pool() -> Result<(), Error> {
    let Ok(raw) = std::env::var("NVLAB_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| {
            Error::config(format!("NVLAB_THREADS must be a positive integer, got {raw:?}"))
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::config(format!("failed to size the thread pool: {e}")))
}

fn run(cmd: &Command) -> Result<(), Error> {
    init_thread_pool()?;
    let args = cmd.args();

    let mut overrides = Vec::with_capacity(args.set.len());
    for raw in &args.set {
        overrides.push(split_override(raw)?);
    }

    let mut cfg = load_config(&args.config, &overrides)?;
    let kind = cmd.kind();
    if cfg.experiment != kind {
        return Err(Error::config(format!(
            "config {} declares experiment \"{}\" but the {} subcommand was invoked",
            args.config.display(),
            cfg.experiment,
            kind
        )));
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.display().to_string();
    }
    cfg.resolve_seed(args.seed);

    let report = run_experiment(&cfg)?;
    print!("{}", report.summary_text());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::InvalidInput(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
