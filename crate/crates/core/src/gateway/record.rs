use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex};

use super::{Backend, BackendCall, BackendError, BackendReply, TranscriptRecord};

/// Request id and per-attempt replies seen for one fingerprint.
type Recorded = (String, Vec<Option<String>>);

/// Forwards calls to an inner backend and keeps every successful reply so the
/// run can be replayed offline.
pub struct RecordingBackend {
    inner: Arc<dyn Backend>,
    log: Mutex<BTreeMap<String, Recorded>>,
}

impl RecordingBackend {
    pub fn new(inner: Arc<dyn Backend>) -> Self {
        RecordingBackend { inner, log: Mutex::new(BTreeMap::new()) }
    }

    /// Recorded entries ordered by request id, then fingerprint. Attempts that
    /// never produced a reply end the response list.
    pub fn records(&self) -> Vec<TranscriptRecord> {
        let log = self.log.lock().expect("record lock");
        let mut records: Vec<TranscriptRecord> = log
            .iter()
            .map(|(fingerprint, (request_id, responses))| TranscriptRecord {
                fingerprint: fingerprint.clone(),
                request_id: Some(request_id.clone()),
                responses: responses.iter().map_while(|r| r.clone()).collect(),
            })
            .filter(|r| !r.responses.is_empty())
            .collect();
        records.sort_by(|a, b| (&a.request_id, &a.fingerprint).cmp(&(&b.request_id, &b.fingerprint)));
        records
    }

    pub fn write_transcript(&self, path: &Path) -> std::io::Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for record in self.records() {
            serde_json::to_writer(&mut out, &record)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }
}

impl Backend for RecordingBackend {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn send(&self, call: &BackendCall<'_>) -> Result<BackendReply, BackendError> {
        let reply = self.inner.send(call)?;
        let mut log = self.log.lock().expect("record lock");
        let entry =
            log.entry(call.fingerprint.to_string()).or_insert_with(|| (call.request.request_id.clone(), Vec::new()));
        let slot = call.attempt as usize - 1;
        if entry.1.len() <= slot {
            entry.1.resize(slot + 1, None);
        }
        if entry.1[slot].is_none() {
            entry.1[slot] = Some(reply.text.clone());
        }
        Ok(reply)
    }

    fn reports_latency(&self) -> bool {
        self.inner.reports_latency()
    }
}
