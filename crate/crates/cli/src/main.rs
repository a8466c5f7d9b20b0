use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use twofluid_cli::config::{Mode, RunConfig};
use twofluid_cli::run::{self, RunError};

#[derive(Parser)]
#[command(name = "twofluid", version, about = "Two-fluid compressible flow laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Configuration file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` and $TWOFLUID_OUT.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate the pressure closure at one (R, Q) pair.
    Closure {
        #[command(subcommand)]
        action: ClosureAction,
    },
    /// Local-in-time solve by Picard iteration around the initial state.
    Simulate(Common),
    /// Global continuation around a constant state, with decay diagnostics.
    Decay(Common),
    /// Resolvent norm sweep over a sector.
    Resolvent(Common),
    /// Eigenvalues of the linearized generator around a constant state.
    DecaySpectrum(Common),
    /// Manufactured-solution convergence study of the linear core.
    Mms(Common),
}

#[derive(Subcommand)]
enum ClosureAction {
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        r: Option<f64>,
        #[arg(long)]
        q: Option<f64>,
        #[arg(long)]
        gamma_plus: Option<f64>,
        #[arg(long)]
        gamma_minus: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(path: Option<&PathBuf>) -> Result<RunConfig, RunError> {
    Ok(match path {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::parse("")?,
    })
}

fn execute(cli: Cli) -> Result<(), RunError> {
    let (mode, common) = match cli.command {
        Command::Closure { action: ClosureAction::Eval { config, r, q, gamma_plus, gamma_minus, out } } => {
            let mut cfg = load(config.as_ref())?;
            let set = |cfg: &mut RunConfig, k: &str, v: Option<f64>| -> Result<(), RunError> {
                if let Some(v) = v {
                    cfg.set(k, &v.to_string()).map_err(|m| twofluid_cli::config::ConfigError { line: None, key: Some(k.into()), message: m })?;
                }
                Ok(())
            };
            set(&mut cfg, "closure_r", r)?;
            set(&mut cfg, "closure_q", q)?;
            set(&mut cfg, "gamma_plus", gamma_plus)?;
            set(&mut cfg, "gamma_minus", gamma_minus)?;
            cfg.finish().map_err(|(key, message)| twofluid_cli::config::ConfigError { line: None, key: Some(key), message })?;
            if out.is_none() && cfg.output_dir.is_none() {
                // Direct evaluation prints only.
                let rep = run::closure_eval(cfg.closure_r, cfg.closure_q, &cfg.params())?;
                println!("{}", serde_json::to_string_pretty(&rep).expect("plain data"));
                return Ok(());
            }
            let dir = run::output_dir(&cfg, Mode::Closure, out.as_deref());
            run::run(&cfg, Mode::Closure, &dir)?;
            return Ok(());
        }
        Command::Simulate(c) => (Mode::Local, c),
        Command::Decay(c) => (Mode::Global, c),
        Command::Resolvent(c) => (Mode::Resolvent, c),
        Command::DecaySpectrum(c) => (Mode::DecaySpectrum, c),
        Command::Mms(c) => (Mode::Mms, c),
    };
    let cfg = load(common.config.as_ref())?;
    let dir = run::output_dir(&cfg, mode, common.out.as_deref());
    let dir = run::run(&cfg, mode, &dir)?;
    eprintln!("outputs written to {}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
