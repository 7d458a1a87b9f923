use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{BackendConfig, RunConfig};
use super::RunError;
use crate::chain::{run_chain, ChainContext, ChainError, InputMode, InstrumentMention, RequestTrace, TemplateSet};
use crate::doc_model::{load_document, DocError};
use crate::gateway::{Backend, Gateway, GatewayError, LiveBackend, RecordingBackend, TranscriptBackend, UsageStats};
use crate::normalizer::{normalize, CanonicalInstrument, InstrumentDictionary};
use crate::relation::{extract_relations, RecordFile, RelationTrace};
use crate::section::SectionSpan;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RECORDS_DIR: &str = "records";
pub const TRACES_DIR: &str = "traces";

/// Loaded resources that several runs can share.
pub struct Resources {
    pub dictionary: InstrumentDictionary,
    pub backend: Arc<dyn Backend>,
    pub recorder: Option<(Arc<RecordingBackend>, PathBuf)>,
}

impl Resources {
    pub fn load(cfg: &RunConfig) -> Result<Self, RunError> {
        let dictionary = InstrumentDictionary::load(&cfg.dictionary)
            .map_err(|e| RunError::Config(format!("dictionary {}: {e}", cfg.dictionary.display())))?;
        let live = |l| LiveBackend::new(l).map_err(|e| RunError::Config(e.to_string()));
        let (backend, recorder): (Arc<dyn Backend>, _) = match &cfg.backend {
            BackendConfig::Mock { transcript } => {
                let b = TranscriptBackend::from_path(transcript)
                    .map_err(|e| RunError::Config(format!("transcript {}: {e}", transcript.display())))?;
                (Arc::new(b), None)
            }
            BackendConfig::Live(l) => (Arc::new(live(l)?), None),
            BackendConfig::Record { live: l, transcript } => {
                let rec = Arc::new(RecordingBackend::new(Arc::new(live(l)?)));
                (rec.clone(), Some((rec, transcript.clone())))
            }
        };
        Ok(Resources { dictionary, backend, recorder })
    }
}

// ============================================================================
// Trace events and manifest
// ============================================================================

#[derive(Debug, Serialize)]
pub struct NormalizedEntry<'a> {
    #[serde(flatten)]
    pub instrument: &'a CanonicalInstrument,
    pub first_chunk_index: Option<usize>,
}

#[derive(Debug, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent<'a> {
    Detect { span: &'a SectionSpan, input_mode: InputMode, chunk_tokens: &'a [usize] },
    Request(&'a RequestTrace),
    Mentions { chunk_index: usize, mentions: &'a [InstrumentMention] },
    Summary { chunk_index: usize, text: &'a str },
    Final { mentions: &'a [InstrumentMention], decision_degraded: bool },
    Normalized { instruments: Vec<NormalizedEntry<'a>> },
    Relation(&'a RelationTrace),
    Warning { message: &'a str },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocState {
    Ok,
    Failed,
    Skipped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    Ingestion,
    Backend,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocStatus {
    pub doc_id: String,
    pub source: String,
    pub status: DocState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<FailureKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub instruments: usize,
    pub decision_degraded: bool,
    pub degraded_relations: usize,
    pub usage: UsageStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub config: RunConfig,
    pub config_digest: String,
    pub dictionary_version: String,
    pub template_set: String,
    pub chain: String,
    pub backend: String,
    pub usage: UsageStats,
    pub documents: Vec<DocStatus>,
    pub succeeded: usize,
    pub failed: usize,
}

impl Manifest {
    /// The most severe failure, if any document failed.
    pub fn failure(&self) -> Option<RunError> {
        let failed: Vec<&DocStatus> = self.documents.iter().filter(|d| d.status == DocState::Failed).collect();
        let worst = failed.iter().filter_map(|d| d.failure).max()?;
        let detail = failed
            .iter()
            .filter(|d| d.failure == Some(worst))
            .map(|d| format!("{}: {}", d.doc_id, d.error.as_deref().unwrap_or("failed")))
            .collect::<Vec<_>>()
            .join("; ");
        Some(match worst {
            FailureKind::Ingestion => RunError::Ingestion(detail),
            FailureKind::Backend => RunError::Backend(detail),
        })
    }
}

// ============================================================================
// Per-document pipeline
// ============================================================================

struct DocArtifacts {
    record: RecordFile,
    trace_lines: Vec<String>,
    status: DocStatus,
}

fn doc_failure(doc_id: &str, source: &str, kind: FailureKind, error: String) -> DocStatus {
    DocStatus {
        doc_id: doc_id.to_string(),
        source: source.to_string(),
        status: DocState::Failed,
        failure: Some(kind),
        error: Some(error),
        instruments: 0,
        decision_degraded: false,
        degraded_relations: 0,
        usage: UsageStats::default(),
    }
}

fn classify(err: &ChainError) -> FailureKind {
    match err {
        ChainError::Document(_) => FailureKind::Ingestion,
        _ => FailureKind::Backend,
    }
}

fn line<T: Serialize>(event: &T) -> String {
    serde_json::to_string(event).expect("trace event serializes")
}

fn first_chunk_index(inst: &CanonicalInstrument, mentions: &[InstrumentMention]) -> Option<usize> {
    mentions
        .iter()
        .filter(|m| {
            let s = m.surface_name.split_whitespace().collect::<Vec<_>>().join(" ");
            inst.surface_names.contains(&s)
        })
        .map(|m| m.chunk_index)
        .min()
}

fn process_doc(
    path: &Path,
    cfg: &RunConfig,
    res: &Resources,
    ctx: &ChainContext<'_>,
) -> Result<DocArtifacts, Box<DocStatus>> {
    let source = path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
    let stem = path.file_stem().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
    let doc = load_document(path)
        .map_err(|e: DocError| Box::new(doc_failure(&stem, &source, FailureKind::Ingestion, e.to_string())))?;
    let id = doc.doc_id.clone();

    let out = run_chain(&doc, &cfg.chain, &cfg.chunker, ctx)
        .map_err(|e| Box::new(doc_failure(&id, &source, classify(&e), e.to_string())))?;
    let trace = &out.trace;

    let mut lines = vec![line(&TraceEvent::Detect {
        span: &trace.span,
        input_mode: cfg.chain.input_mode,
        chunk_tokens: &trace.chunk_tokens,
    })];
    for step in &trace.steps {
        lines.extend(step.requests.iter().map(|r| line(&TraceEvent::Request(r))));
    }
    for (i, m) in trace.chunk_mentions.iter().enumerate() {
        lines.push(line(&TraceEvent::Mentions { chunk_index: i, mentions: m }));
    }
    for (i, s) in trace.summaries.iter().enumerate() {
        lines.push(line(&TraceEvent::Summary { chunk_index: i, text: s }));
    }
    lines.push(line(&TraceEvent::Final { mentions: &out.mentions, decision_degraded: trace.decision_degraded }));

    let anchors = normalize(out.mentions.iter().map(|m| m.surface_name.as_str()), &res.dictionary, &cfg.normalizer);
    lines.push(line(&TraceEvent::Normalized {
        instruments: anchors
            .iter()
            .map(|a| NormalizedEntry { instrument: a, first_chunk_index: first_chunk_index(a, &out.mentions) })
            .collect(),
    }));

    let rel = extract_relations(&id, &anchors, &out.chunks, ctx)
        .map_err(|e: GatewayError| Box::new(doc_failure(&id, &source, FailureKind::Backend, e.to_string())))?;
    lines.extend(rel.traces.iter().map(|t| line(&TraceEvent::Relation(t))));
    for w in &trace.warnings {
        lines.push(line(&TraceEvent::Warning { message: w }));
    }

    let mut usage = out.usage.clone();
    usage.add(&rel.usage);
    Ok(DocArtifacts {
        record: RecordFile::from_records(&id, &rel.records),
        trace_lines: lines,
        status: DocStatus {
            doc_id: id,
            source,
            status: DocState::Ok,
            failure: None,
            error: None,
            instruments: rel.records.len(),
            decision_degraded: trace.decision_degraded,
            degraded_relations: rel.traces.iter().filter(|t| t.degraded).count(),
            usage,
        },
    })
}

pub fn list_documents(dir: &Path) -> Result<Vec<PathBuf>, RunError> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| RunError::Ingestion(format!("cannot read input directory {}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    Ok(paths)
}

pub fn safe_file_name(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' }).collect()
}

fn io_err(path: &Path, e: std::io::Error) -> RunError {
    RunError::Config(format!("cannot write {}: {e}", path.display()))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    let mut text = serde_json::to_string_pretty(value).expect("output serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn fresh_dir(path: &Path) -> Result<(), RunError> {
    if path.exists() {
        std::fs::remove_dir_all(path).map_err(|e| io_err(path, e))?;
    }
    std::fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

/// Runs the full pipeline over every document in the input directory and
/// writes records, traces and the manifest. Per-document failures are
/// reported in the manifest; callers turn them into an exit status with
/// [`Manifest::failure`].
pub fn run_extract(cfg: &RunConfig, res: &Resources) -> Result<Manifest, RunError> {
    cfg.validate()?;
    let templates = TemplateSet::resolve(cfg.template_dir.as_deref(), &cfg.chain.template_set)
        .map_err(|e| RunError::Config(format!("templates: {e}")))?;
    let docs = list_documents(&cfg.input_dir)?;

    let gateway = Gateway::new(res.backend.clone(), cfg.gateway.clone(), cfg.seed);
    let ctx = ChainContext { gateway: &gateway, templates: &templates, detector: &cfg.detector };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.concurrency)
        .build()
        .map_err(|e| RunError::Config(format!("thread pool: {e}")))?;

    let abort = AtomicBool::new(false);
    let results: Vec<Option<Result<DocArtifacts, Box<DocStatus>>>> = pool.install(|| {
        docs.par_iter()
            .map(|path| {
                if abort.load(Ordering::SeqCst) {
                    return None;
                }
                let r = process_doc(path, cfg, res, &ctx);
                if r.is_err() && cfg.fail_fast {
                    abort.store(true, Ordering::SeqCst);
                }
                Some(r)
            })
            .collect()
    });

    let records_dir = cfg.output_dir.join(RECORDS_DIR);
    let traces_dir = cfg.output_dir.join(TRACES_DIR);
    fresh_dir(&records_dir)?;
    fresh_dir(&traces_dir)?;

    let mut statuses = Vec::with_capacity(docs.len());
    let mut usage = UsageStats::for_backend(gateway.backend_name());
    let mut seen_ids: BTreeMap<String, String> = BTreeMap::new();
    for (path, result) in docs.iter().zip(results) {
        let artifacts = match result {
            None => {
                let source = path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
                statuses.push(DocStatus {
                    status: DocState::Skipped,
                    failure: None,
                    error: Some("skipped after an earlier failure".into()),
                    ..doc_failure("", &source, FailureKind::Ingestion, String::new())
                });
                continue;
            }
            Some(Err(status)) => {
                tracing::error!(doc = %status.doc_id, error = ?status.error, "document failed");
                statuses.push(*status);
                continue;
            }
            Some(Ok(a)) => a,
        };
        let name = safe_file_name(&artifacts.status.doc_id);
        if let Some(prev) = seen_ids.insert(name.clone(), artifacts.status.source.clone()) {
            statuses.push(doc_failure(
                &artifacts.status.doc_id,
                &artifacts.status.source,
                FailureKind::Ingestion,
                format!("doc_id collides with {prev}"),
            ));
            continue;
        }
        write_json(&records_dir.join(format!("{name}.json")), &artifacts.record)?;
        let trace_path = traces_dir.join(format!("{name}.trace.jsonl"));
        let mut f = std::fs::File::create(&trace_path).map_err(|e| io_err(&trace_path, e))?;
        for l in &artifacts.trace_lines {
            writeln!(f, "{l}").map_err(|e| io_err(&trace_path, e))?;
        }
        usage.add(&artifacts.status.usage);
        statuses.push(artifacts.status);
    }

    if let Some((rec, path)) = &res.recorder {
        rec.write_transcript(path).map_err(|e| io_err(path, e))?;
    }

    let manifest = Manifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        config_digest: cfg.digest(),
        dictionary_version: res.dictionary.version().to_string(),
        template_set: templates.id.clone(),
        chain: cfg.chain.label(),
        backend: gateway.backend_name().to_string(),
        usage,
        succeeded: statuses.iter().filter(|s| s.status == DocState::Ok).count(),
        failed: statuses.iter().filter(|s| s.status == DocState::Failed).count(),
        documents: statuses,
    };
    write_json(&cfg.output_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}
