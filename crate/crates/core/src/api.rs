//! Wire types of the HTTP service, shared by the server and its client.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::event_model::AnnotatedSentence;
use crate::orchestrator::report::ReportRow;
use crate::orchestrator::{Phase, PhaseOutcome, RetrainOptions, RunConfig};
use crate::quality_metrics::DiversityReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefaultEntry {
    pub key: String,
    pub value: String,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefaultsResponse {
    pub config: RunConfig,
    pub published: Vec<DefaultEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateRequest {
    pub pred: Vec<AnnotatedSentence>,
    pub gold: Vec<AnnotatedSentence>,
}

fn default_orders() -> Vec<usize> {
    vec![2, 3]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityRequest {
    pub generated: Vec<String>,
    pub original: Vec<String>,
    #[serde(default = "default_orders")]
    pub orders: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityResponse {
    pub reports: Vec<DiversityReport>,
}

/// Which closed-form model scores a PLL request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PllModel {
    Uniform { vocab_size: usize },
    /// Add-one unigram fitted to `fit`.
    Unigram { fit: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PllRequest {
    pub sentences: Vec<String>,
    pub model: PllModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainRequest {
    pub config: RunConfig,
    /// All phases in order when absent.
    #[serde(default)]
    pub phase: Option<Phase>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainResponse {
    pub phases: Vec<PhaseOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainRequest {
    pub config: RunConfig,
    #[serde(default)]
    pub options: RetrainOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportResponse {
    pub run_id: String,
    pub rows: Vec<ReportRow>,
    pub csv: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chart {
    pub name: String,
    pub svg: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotResponse {
    /// Where the server wrote the charts.
    pub written: Vec<PathBuf>,
    pub charts: Vec<Chart>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    InvalidInput,
    Config,
    Data,
    MissingState,
    ConfigMismatch,
    CoverageNotReached,
    SingleClass,
    /// Another request holds the same run.
    Busy,
    Backend,
    Io,
    Internal,
}

impl ErrorKind {
    pub fn of(error: &Error) -> Self {
        match error {
            Error::Data(_) => ErrorKind::Data,
            Error::Backend(_) => ErrorKind::Backend,
            Error::InvalidInput(_) => ErrorKind::InvalidInput,
            Error::Config(_) => ErrorKind::Config,
            Error::CoverageNotReached { .. } => ErrorKind::CoverageNotReached,
            Error::SingleClass { .. } => ErrorKind::SingleClass,
            Error::MissingState(_) => ErrorKind::MissingState,
            Error::ConfigMismatch(_) => ErrorKind::ConfigMismatch,
            Error::Io { .. } | Error::Json { .. } => ErrorKind::Io,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub kind: ErrorKind,
    pub message: String,
}

impl From<&Error> for ErrorBody {
    fn from(e: &Error) -> Self {
        ErrorBody {
            kind: ErrorKind::of(e),
            message: e.to_string(),
        }
    }
}
