//! Config-driven runner for the Polchinski flow checks.
//!
//! A run reads an [`config::ExperimentConfig`], executes the requested checks in
//! dependency order and writes `report.csv` (plus `schedule.csv` and
//! `spectrum.csv` when those tables were computed). Equal configs and seeds
//! give byte-identical files.

use std::path::PathBuf;

use thiserror::Error;

pub mod config;
pub mod experiment;
pub mod oracle;
pub mod report;

pub use config::{CheckKind, ExperimentConfig};
pub use experiment::run_experiment;
pub use report::{Format, Row, RunReport, Status};

/// Caps the worker pool size.
pub const THREADS_ENV: &str = "POLCHINSKI_THREADS";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot parse configuration: {0}")]
    Parse(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot read {path}: {message}")]
    Io { path: PathBuf, message: String },
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot write {path}: {message}")]
    Write { path: PathBuf, message: String },
}

pub mod exit {
    pub const PASS: i32 = 0;
    pub const FAIL: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const UNCONVERGED: i32 = 3;
}

/// Process exit code for a finished run: failures win over non-convergence.
pub fn exit_code(status: Status) -> i32 {
    match status {
        Status::Pass => exit::PASS,
        Status::Fail => exit::FAIL,
        Status::Unconverged => exit::UNCONVERGED,
    }
}

/// Sizes the global worker pool from [`THREADS_ENV`] when it is set.
pub fn init_threads() -> Result<(), ConfigError> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| ConfigError::Invalid(format!("{THREADS_ENV} must be a positive integer, got '{v}'")))?;
    // A second initialisation in the same process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}
