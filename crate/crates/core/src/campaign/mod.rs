//! Batch campaigns: suite generation, method execution, traces and reports.

use std::path::PathBuf;

use thiserror::Error;

pub mod config;
pub mod report;
pub mod run;

pub use config::{CampaignConfig, JudgeKind, Method, MethodKind, MethodSpec, SweepSpec};
pub use report::{build_report, cmd_report, Report};
pub use run::{cmd_gen, cmd_run, cmd_sweep, read_results, ResultLine, ResultsFile};

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("results schema {found} is not supported (expected {expected}); migrate the file first")]
    Migration { found: String, expected: String },
    #[error("{0}")]
    Runtime(String),
}

impl CampaignError {
    /// Process exit code: 2 for configuration problems, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CampaignError::Config(_) => 2,
            _ => 3,
        }
    }
}
