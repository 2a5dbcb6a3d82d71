//! End-to-end runs: config, stage execution with content-addressed
//! skipping, manifests and reports.

pub mod config;
pub mod manifest;
pub mod report;
pub mod run;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use config::{BackendKind, RunConfig};
pub use manifest::{FileDigest, RunManifest, StageRecord};
pub use report::{format_report, report};
pub use run::{build_gateway, run, RunOptions, RunOutcome, STAGES};

use crate::analysis::AnalysisError;
use crate::applications::AppError;
use crate::calibration::MetricError;
use crate::corpus::CorpusError;
use crate::decompose::DecomposeError;
use crate::elicit::ElicitError;
use crate::fusion::FusionError;
use crate::gateway::GatewayError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_STAGE: i32 = 3;
pub const EXIT_CASSETTE_MISS: i32 = 4;

#[derive(Debug, Error)]
pub enum StageError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Decompose(#[from] DecomposeError),
    #[error(transparent)]
    Elicit(#[from] ElicitError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    App(#[from] AppError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

impl StageError {
    pub fn is_cassette_miss(&self) -> bool {
        match self {
            StageError::Gateway(e) => e.is_cassette_miss(),
            StageError::Decompose(e) => e.is_cassette_miss(),
            StageError::Elicit(e) => e.is_cassette_miss(),
            StageError::App(e) => e.is_cassette_miss(),
            _ => false,
        }
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        StageError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("config error: {0}")]
    Config(String),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: StageError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt run directory: {0}")]
    Corrupt(String),
    #[error("{0}")]
    Missing(String),
}

impl OrchestratorError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        OrchestratorError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Process exit code: 2 for config errors, 4 for cassette misses, 3 for
    /// any other failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            OrchestratorError::Config(_) => EXIT_CONFIG,
            OrchestratorError::Stage { source, .. } if source.is_cassette_miss() => EXIT_CASSETTE_MISS,
            _ => EXIT_STAGE,
        }
    }
}
