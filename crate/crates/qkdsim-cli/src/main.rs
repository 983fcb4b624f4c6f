//! Command-line front end: run sessions, validate configs, re-analyze
//! stored traces.
//!
//! Exit codes: 0 on success, 2 on a configuration error, 3 on a transport
//! error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use qkdsim::config::{validate, RunConfig};
use qkdsim::error::RunError;
use qkdsim::metrics::analyze_dir;
use qkdsim::sim::run_and_export;
use qkdsim::transport::TransportSpec;

#[derive(Parser)]
#[command(name = "qkdsim", about = "Fibre QKD system simulator", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a session and write summary, figure CSVs and traces.
    Run {
        /// Run configuration (JSON). Omit to use the built-in defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for the exports.
        #[arg(long)]
        out: PathBuf,
        /// Override the config's RNG seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's duration, seconds.
        #[arg(long)]
        duration: Option<f64>,
        /// Override the config's transport ("inproc" or "tcp:host:port").
        #[arg(long)]
        transport: Option<String>,
    },
    /// Check a configuration against every invariant.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Recompute metrics from the traces stored in an output directory.
    Analyze {
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a preset configuration as JSON.
    Preset {
        /// One of: paper-250khz, paper-1mhz, noise-free, accelerated-drift.
        name: String,
    },
}

const EXIT_CONFIG: u8 = 2;
const EXIT_TRANSPORT: u8 = 3;

fn exit_for(err: &RunError) -> u8 {
    match err {
        RunError::Transport(_) => EXIT_TRANSPORT,
        _ => EXIT_CONFIG,
    }
}

fn load_config(path: Option<&PathBuf>) -> Result<RunConfig, RunError> {
    match path {
        Some(p) => RunConfig::from_file(p),
        None => Ok(RunConfig::default()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            out,
            seed,
            duration,
            transport,
        } => {
            let mut cfg = match load_config(config.as_ref()) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(EXIT_CONFIG);
                }
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(d) = duration {
                cfg.duration_s = d;
            }
            if let Some(t) = transport {
                match TransportSpec::parse(&t) {
                    Ok(spec) => cfg.transport = spec,
                    Err(e) => {
                        eprintln!("error: {e}");
                        return ExitCode::from(EXIT_CONFIG);
                    }
                }
            }
            match run_and_export(&cfg, &out) {
                Ok(output) => {
                    let s = &output.summary;
                    println!(
                        "sifted {} bits in {:.1} s ({:.1} bit/s), QBER {:.3}%, \
                         duty cycle {:.2}%, {} stretcher reset(s)",
                        s.sifted_bits,
                        s.duration_s,
                        s.sifted_rate_bps,
                        100.0 * s.mean_qber,
                        100.0 * s.duty_cycle,
                        s.reset_count
                    );
                    println!("exports written to {}", out.display());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(exit_for(&e))
                }
            }
        }
        Command::Validate { config } => match RunConfig::from_file(&config) {
            Ok(cfg) => {
                let violations = validate(&cfg);
                if violations.is_empty() {
                    println!("ok");
                    ExitCode::SUCCESS
                } else {
                    for v in violations {
                        eprintln!("violation: {v}");
                    }
                    ExitCode::from(EXIT_CONFIG)
                }
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(EXIT_CONFIG)
            }
        },
        Command::Analyze { out } => match analyze_dir(&out) {
            Ok(summary) => {
                println!(
                    "recomputed: {} sifted bits, QBER {:.3}%, duty cycle {:.2}%",
                    summary.sifted_bits,
                    100.0 * summary.mean_qber,
                    100.0 * summary.duty_cycle
                );
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(exit_for(&e))
            }
        },
        Command::Preset { name } => {
            let cfg = match name.as_str() {
                "paper-250khz" => RunConfig::paper_250khz(),
                "paper-1mhz" => RunConfig::paper_1mhz(),
                "noise-free" => RunConfig::noise_free(),
                "accelerated-drift" => RunConfig::accelerated_drift(),
                other => {
                    eprintln!("error: unknown preset '{other}'");
                    return ExitCode::from(EXIT_CONFIG);
                }
            };
            println!("{}", cfg.to_json_pretty());
            ExitCode::SUCCESS
        }
    }
}
