//! Run configuration and the command implementations behind the CLI.

mod commands;
mod config;
mod extract;

use thiserror::Error;

pub use commands::{
    load_dictionary, load_predictions, run_ablate, run_detect, run_evaluate, span_matches, AblationGrid, DetectReport,
    DetectedSpan, Predictions, SpanLabel, REPORT_JSON, REPORT_TXT,
};
pub use config::{BackendConfig, Overrides, RunConfig};
pub use extract::{
    list_documents, run_extract, safe_file_name, DocState, DocStatus, FailureKind, Manifest, Resources, MANIFEST_FILE,
    RECORDS_DIR, TRACES_DIR,
};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("ingestion error: {0}")]
    Ingestion(String),
    #[error("backend error: {0}")]
    Backend(String),
}

impl RunError {
    pub fn exit_code(&self) -> u8 {
        match self {
            RunError::Config(_) => 2,
            RunError::Ingestion(_) => 3,
            RunError::Backend(_) => 4,
        }
    }
}
