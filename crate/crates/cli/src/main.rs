use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use polchinski_cli::{exit, exit_code, init_threads, oracle, run_experiment, ExperimentConfig, Format, Status};

#[derive(Parser)]
#[command(name = "polchinski", version, about = "Polchinski flow experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the checks of a configuration and write the report files.
    Run {
        config: PathBuf,
        /// Output directory (defaults to the config's `output`, then `./out`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "csv", value_parser = ["csv", "json-lines"])]
        format: String,
    },
    /// Parse and validate a configuration without computing anything.
    Validate { config: PathBuf },
    /// Write the brute-force reference values.
    Oracle {
        #[arg(long, default_value = "oracle.csv")]
        out: PathBuf,
    },
}

fn code(c: i32) -> ExitCode {
    ExitCode::from(c as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("{e}");
        return code(exit::CONFIG);
    }
    match cli.command {
        Command::Validate { config } => match ExperimentConfig::load(&config) {
            Ok(cfg) => {
                let checks: Vec<String> = cfg.check_kinds().unwrap_or_default().iter().map(|c| c.to_string()).collect();
                println!("{}: ok ({} checks: {})", config.display(), checks.len(), checks.join(", "));
                code(exit::PASS)
            }
            Err(e) => {
                eprintln!("{e}");
                code(exit::CONFIG)
            }
        },
        Command::Oracle { out } => match std::fs::write(&out, oracle::reference_csv()) {
            Ok(()) => {
                println!("wrote {}", out.display());
                code(exit::PASS)
            }
            Err(e) => {
                eprintln!("cannot write {}: {e}", out.display());
                code(exit::FAIL)
            }
        },
        Command::Run {
            config,
            out,
            seed,
            format,
        } => {
            let mut cfg = match ExperimentConfig::load(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("{e}");
                    return code(exit::CONFIG);
                }
            };
            if seed.is_some() {
                cfg.seed = seed;
            }
            let dir = out.or_else(|| cfg.output.clone()).unwrap_or_else(|| PathBuf::from("out"));
            let format: Format = format.parse().expect("clap restricts the format");
            let start = Instant::now();
            let report = match run_experiment(&cfg) {
                Ok(r) => r,
                Err(e) => {
                    eprintln!("{e}");
                    return code(exit::CONFIG);
                }
            };
            if let Err(e) = report.write(&dir, format) {
                eprintln!("{e}");
                return code(exit::FAIL);
            }
            let status = report.status();
            eprintln!(
                "{}: {} rows ({} pass, {} fail, {} unconverged) in {:.2?} -> {}",
                status.name(),
                report.rows.len(),
                report.count(Status::Pass),
                report.count(Status::Fail),
                report.count(Status::Unconverged),
                start.elapsed(),
                dir.display()
            );
            code(exit_code(status))
        }
    }
}
