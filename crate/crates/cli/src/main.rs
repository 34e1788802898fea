use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nsldp::config::{parse_config, RunConfig};
use nsldp::experiments::{run_and_write, Experiment, MalliavinTask};
use nsldp::{par, Error};

#[derive(Parser)]
#[command(name = "nsldp", version, about = "Stochastic 2D Navier-Stokes experiments")]
struct Cli {
    /// Run configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the configured worker count (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decide condition (H) for the configured forcing set.
    CheckForcing,
    /// Ensemble simulation with moment curves and a final snapshot.
    Simulate,
    /// Finite-difference and duality checks of the tangent flow.
    TangentCheck,
    /// Malliavin-matrix, control and integration-by-parts experiments.
    Malliavin {
        /// matrix, control, residual-decay, duality-check or gradient-check
        task: String,
    },
    /// Principal eigenvalue, eigenfunction and growth ratios.
    FkSpectrum,
    /// Uniform Feller modulus.
    FellerCheck,
    /// Scaled cumulant generating function and rate function.
    Ldp,
    /// Adjoint-gradient steering to a target state.
    Steer,
}

fn load(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            parse_config(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.display().to_string();
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    Ok(cfg)
}

fn experiment(cmd: &Command) -> Result<Experiment, Error> {
    Ok(match cmd {
        Command::CheckForcing => Experiment::CheckForcing,
        Command::Simulate => Experiment::Simulate,
        Command::TangentCheck => Experiment::TangentCheck,
        Command::Malliavin { task } => Experiment::Malliavin(task.parse::<MalliavinTask>()?),
        Command::FkSpectrum => Experiment::FkSpectrum,
        Command::FellerCheck => Experiment::FellerCheck,
        Command::Ldp => Experiment::Ldp,
        Command::Steer => Experiment::Steer,
    })
}

fn run(cli: &Cli) -> Result<u8, Error> {
    let cfg = load(cli)?;
    let exp = experiment(&cli.command)?;
    let threads = if cfg.threads == 0 {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    } else {
        cfg.threads
    };
    par::init_threads(threads);
    let (art, out) = run_and_write(&cfg, exp, &PathBuf::from(&cfg.out))?;
    if exp == Experiment::CheckForcing {
        println!("{}", serde_json::to_string(&out.payload).map_err(|e| Error::Format(e.to_string()))?);
    } else {
        println!("{}", art.envelope.display());
    }
    for f in &out.flags {
        eprintln!("flag: {f}");
    }
    Ok(out.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            match &e {
                Error::Config(issues) => {
                    for i in issues {
                        eprintln!("{i}");
                    }
                }
                other => eprintln!("error: {other}"),
            }
            ExitCode::from(1)
        }
    }
}
