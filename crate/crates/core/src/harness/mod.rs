//! Run store, resumable corpus runs, reports and curation.
//!
//! A run directory holds:
//!
//! - `manifest.json`: run id, config hash and per-pair status
//! - `outcomes.jsonl`: one [`A2ROutcome`](crate::pipeline::A2ROutcome) per completed (query, run)
//! - `failures.jsonl`: pairs that failed, with any explorer paths that were salvaged

mod curate;
mod report;
mod run;
mod store;

use std::path::PathBuf;

use thiserror::Error;

use crate::cost::CostError;
use crate::gateway::GatewayError;
use crate::grpo::GrpoError;
use crate::metrics::MetricsError;
use crate::pipeline::{DatasetError, PipelineError};

pub use curate::{cmd_curate, CurateOptions, CurateSummary, CURATE_PLAN_SUFFIX};
pub use report::{
    build_report, cmd_report, load_run, CostRow, MetricRow, QueryRow, Report, ReportOptions, RunData,
};
pub use run::{cmd_run, execute_run, FailureRecord, RunOptions, RunSpec, RunSummary};
pub use store::{
    config_hash, file_sha256, hashed_config, PairStatus, RunManifest, FAILURES_FILE, MANIFEST_FILE,
    OUTCOMES_FILE,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Grpo(#[from] GrpoError),
    #[error("unknown strategy '{0}'")]
    UnknownStrategy(String),
    #[error("config hash {found} in {dir} does not match {expected}; use a fresh output directory")]
    ConfigMismatch {
        dir: PathBuf,
        expected: String,
        found: String,
    },
    #[error("run directory {0} has no outcomes")]
    EmptyRun(PathBuf),
    #[error("run directory {dir} is incomplete ({pending} pairs pending); pass --allow-partial")]
    PartialRun { dir: PathBuf, pending: usize },
    #[error("cost table requested without a pricing sheet")]
    MissingPricing,
    #[error("{path}: line {line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid option: {0}")]
    InvalidOption(String),
}

impl HarnessError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
