use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use spdfield::{CliError, Outcome, RunConfig, Runner, Stage};

/// Identification and stochastic Galerkin solves for SPD matrix-valued
/// random fields.
#[derive(Debug, Parser)]
#[command(
    version,
    after_help = "Stages: synth, fit-apm, build-kl, build-map, identify-ml, identify-bayes, solve, report.\n\
Worker threads: SPDFIELD_THREADS (default: available cores).\n\
Exit codes: 0 ok, 1 i/o, 2 configuration, 3 missing upstream artifact, 4 invariant violation."
)]
struct Args {
    /// Stage to run.
    command: Option<String>,
    /// Comma-separated stages to run in order, as an alternative to COMMAND.
    #[arg(long, value_delimiter = ',')]
    stage: Vec<String>,
    /// Configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Master seed, overriding `seed` in the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

fn run(args: Args) -> Result<(), CliError> {
    let names: Vec<String> = match (args.command, args.stage.is_empty()) {
        (Some(c), true) => vec![c],
        (None, false) => args.stage,
        (Some(_), false) => return Err(CliError::Config("give either a command or --stage, not both".into())),
        (None, true) => return Err(CliError::Config("no command given".into())),
    };
    let stages = names.iter().map(|n| n.parse::<Stage>()).collect::<Result<Vec<_>, _>>()?;
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let runner = Runner::new(cfg, args.out);
    for stage in stages {
        match runner.run(stage)? {
            Outcome::Ran => eprintln!("{stage}: done"),
            Outcome::Skipped => eprintln!("{stage}: up to date, skipped"),
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
