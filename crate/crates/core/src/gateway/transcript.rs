use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Backend, BackendCall, BackendError, BackendReply};
use crate::chunker::count_tokens;

/// One JSON Lines record: the responses for successive attempts of the request
/// with this fingerprint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub fingerprint: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub request_id: Option<String>,
    pub responses: Vec<String>,
}

#[derive(Debug, Error)]
pub enum TranscriptError {
    #[error("failed to read transcript {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("transcript {path} line {line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
}

pub fn load_transcript(path: &Path) -> Result<Vec<TranscriptRecord>, TranscriptError> {
    let raw =
        std::fs::read_to_string(path).map_err(|source| TranscriptError::Io { path: path.to_path_buf(), source })?;
    raw.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| TranscriptError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

// Linear latency model so offline replays still yield comparable timings.
const MS_PER_50_INPUT_TOKENS: u64 = 1;
const MS_PER_OUTPUT_TOKEN: u64 = 2;
const MS_PER_CALL: u64 = 40;

/// Replays recorded responses keyed by request fingerprint. Attempt `k` of a
/// request receives the `k`-th recorded response, so replay does not depend on
/// call order.
#[derive(Debug, Default)]
pub struct TranscriptBackend {
    responses: HashMap<String, Vec<String>>,
}

impl TranscriptBackend {
    pub fn new(records: impl IntoIterator<Item = TranscriptRecord>) -> Self {
        let mut responses = HashMap::new();
        for record in records {
            responses.entry(record.fingerprint).or_insert(record.responses);
        }
        TranscriptBackend { responses }
    }

    pub fn from_path(path: &Path) -> Result<Self, TranscriptError> {
        load_transcript(path).map(Self::new)
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

impl Backend for TranscriptBackend {
    fn name(&self) -> &str {
        "mock"
    }

    fn send(&self, call: &BackendCall<'_>) -> Result<BackendReply, BackendError> {
        let text = self
            .responses
            .get(call.fingerprint)
            .and_then(|r| r.get(call.attempt as usize - 1))
            .ok_or(BackendError::TranscriptMiss)?;
        let input = (count_tokens(&call.request.system_text) + count_tokens(&call.request.user_text)) as u64;
        let output = count_tokens(text) as u64;
        Ok(BackendReply {
            text: text.clone(),
            input_tokens: Some(input),
            output_tokens: Some(output),
            latency_ms: Some(MS_PER_CALL + input / 50 * MS_PER_50_INPUT_TOKENS + output * MS_PER_OUTPUT_TOKEN),
        })
    }

    fn reports_latency(&self) -> bool {
        true
    }
}
