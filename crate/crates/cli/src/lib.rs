//! `gmlab`: runs laboratory experiments from a JSON config and writes CSV and
//! JSON artifacts into a run directory.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

pub use config::ExperimentConfig;
pub use error::{Error, Result};

use commands::Context;
use output::{RunDir, RunInfo, CONFIG_ECHO, RUN_INFO};

#[derive(Debug, Parser)]
#[command(name = "gmlab", version, about = "Generator-matching laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tabulate a noise schedule next to its diffusion form.
    Convert(RunArgs),
    /// Draw samples with a reverse-time sampler.
    Sample(RunArgs),
    /// Train a network with conditional generator matching.
    Train(RunArgs),
    /// Check the forward equation for a generator on the oracle path.
    VerifyKfe(RunArgs),
    /// Measure how terminal samples react to a perturbed denoiser.
    Sensitivity(RunArgs),
    /// Combine generators and check and sample the mixture.
    Superpose(RunArgs),
    /// Simulate a discrete mixture path against its master equation.
    Discrete(RunArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Convert(_) => "convert",
            Command::Sample(_) => "sample",
            Command::Train(_) => "train",
            Command::VerifyKfe(_) => "verify-kfe",
            Command::Sensitivity(_) => "sensitivity",
            Command::Superpose(_) => "superpose",
            Command::Discrete(_) => "discrete",
        }
    }

    pub fn args(&self) -> &RunArgs {
        match self {
            Command::Convert(a)
            | Command::Sample(a)
            | Command::Train(a)
            | Command::VerifyKfe(a)
            | Command::Sensitivity(a)
            | Command::Superpose(a)
            | Command::Discrete(a) => a,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Run directory; overrides the config's `output`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed; overrides the config's `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; outputs do not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Root under which `<subcommand>/` is created when no directory is given.
    #[arg(long, env = "GMLAB_OUT", default_value = "gmlab-out")]
    pub out_root: PathBuf,
}

/// One-line JSON error record for stderr.
pub fn error_json(kind: &str, message: &str, exit_code: i32) -> String {
    json!({ "error": message, "kind": kind, "exit_code": exit_code }).to_string()
}

/// One-line JSON warning record for stderr.
pub fn warning_json(message: &str) -> String {
    json!({ "warning": message }).to_string()
}

fn dispatch(command: &Command, ctx: Context<'_>) -> Result<()> {
    match command {
        Command::Convert(_) => commands::cmd_convert(ctx),
        Command::Sample(_) => commands::cmd_sample(ctx),
        Command::Train(_) => commands::cmd_train(ctx),
        Command::VerifyKfe(_) => commands::cmd_verify_kfe(ctx),
        Command::Sensitivity(_) => commands::cmd_sensitivity(ctx),
        Command::Superpose(_) => commands::cmd_superpose(ctx),
        Command::Discrete(_) => commands::cmd_discrete(ctx, &mut |w| eprintln!("{}", warning_json(w))),
    }
}

/// Runs one subcommand; returns the run directory on success.
pub fn run(cli: &Cli) -> Result<PathBuf> {
    let start = Instant::now();
    let args = cli.command.args();
    let name = cli.command.name();
    if let Some(k) = args.threads {
        if k == 0 {
            return Err(Error::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
            .map_err(|e| Error::Usage(format!("cannot configure {k} threads: {e}")))?;
    }
    let mut config = ExperimentConfig::load(&args.config)?;
    let seed = args.seed.or(config.seed).unwrap_or(0);
    config.seed = Some(seed);
    let dir = match (&args.out, &config.output) {
        (Some(d), _) => d.clone(),
        (None, Some(d)) => d.clone(),
        (None, None) => args.out_root.join(name),
    };
    let mut out = RunDir::create(&dir)?;
    out.write_json(CONFIG_ECHO, &config)?;

    let result = dispatch(
        &cli.command,
        Context {
            config: &config,
            seed,
            out: &mut out,
        },
    );
    let (status, message) = match &result {
        Ok(()) => ("ok", None),
        Err(Error::Violated(m)) => ("violated", Some(m.clone())),
        Err(e) => ("error", Some(e.to_string())),
    };
    let written = out.written().to_vec();
    let info = RunInfo {
        tool: "gmlab",
        version: gmlab_core::VERSION,
        subcommand: name,
        seed,
        threads: rayon::current_num_threads(),
        status,
        message,
        outputs: &written,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    out.write_json(RUN_INFO, &info)?;
    result.map(|()| dir)
}
