//! Command-line surface and HTTP service for planeval.

pub mod commands;
pub mod config;
pub mod files;
pub mod report;
pub mod server;
pub mod service;

use planeval::gp::Aborted;
use planeval::tuner::TraceEntry;

pub use commands::{run, Cli};

/// Exit status when `check` finds violations.
pub const EXIT_VIOLATIONS: u8 = 3;
/// Exit status when `explain` finds any disagreement.
pub const EXIT_DISAGREEMENT: u8 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Usage(_) => "usage",
        }
    }
}

/// The machine-parseable category of the first categorized error in the
/// chain; `internal` if none is.
pub fn error_category(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<planeval::Error>() {
            return e.category();
        }
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return e.category();
        }
        if let Some(e) = cause.downcast_ref::<Aborted<Vec<TraceEntry>>>() {
            return e.error.category();
        }
    }
    "internal"
}
