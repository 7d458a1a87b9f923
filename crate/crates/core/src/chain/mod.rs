//! The instrument-name prompt chain: extraction, summarization, decision.
//!
//! Extraction and summarization run once per chunk (fanned out in parallel);
//! only the decision step sees output from more than one chunk. Steps run in
//! the fixed order extraction, summarization, decision.

pub mod templates;

use std::collections::HashSet;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::chunker::{chunk_text, ChunkerConfig, ChunkerError, TextChunk};
use crate::doc_model::{flatten_text, DocError, ParsedDocument};
use crate::gateway::{fingerprint, CompletionResult, Gateway, GatewayError, PromptRequest, UsageStats};
use crate::normalizer::{fold, normalize_key};
use crate::section::{detect_method_span, DetectorConfig, SectionSpan};

pub use templates::{Template, TemplateError, TemplateSet, DEFAULT_TEMPLATE_SET};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    Extraction,
    Summarization,
    Decision,
}

impl Step {
    pub const ALL: [Step; 3] = [Step::Extraction, Step::Summarization, Step::Decision];

    pub fn short(self) -> &'static str {
        match self {
            Step::Extraction => "Ex",
            Step::Summarization => "Sum",
            Step::Decision => "Dec",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Step::Extraction => "extraction",
            Step::Summarization => "summarization",
            Step::Decision => "decision",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    MethodExcerpt,
    FullText,
}

impl InputMode {
    pub fn short(self) -> &'static str {
        match self {
            InputMode::MethodExcerpt => "excerpt",
            InputMode::FullText => "full",
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ChainConfigError {
    #[error("chain config enables no steps")]
    NoSteps,
    #[error("decision step requires extraction or summarization")]
    DecisionWithoutInputs,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainConfig {
    pub steps: Vec<Step>,
    pub input_mode: InputMode,
    pub template_set: String,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            steps: Step::ALL.to_vec(),
            input_mode: InputMode::MethodExcerpt,
            template_set: DEFAULT_TEMPLATE_SET.to_string(),
        }
    }
}

impl ChainConfig {
    pub fn new(steps: &[Step], input_mode: InputMode) -> Result<Self, ChainConfigError> {
        let cfg = ChainConfig { steps: steps.to_vec(), input_mode, ..Default::default() };
        cfg.validate()?;
        Ok(cfg.canonical())
    }

    pub fn validate(&self) -> Result<(), ChainConfigError> {
        if self.steps.is_empty() {
            return Err(ChainConfigError::NoSteps);
        }
        if self.has(Step::Decision) && !self.has(Step::Extraction) && !self.has(Step::Summarization) {
            return Err(ChainConfigError::DecisionWithoutInputs);
        }
        Ok(())
    }

    /// Steps deduplicated and in execution order.
    pub fn canonical(mut self) -> Self {
        self.steps.sort();
        self.steps.dedup();
        self
    }

    pub fn has(&self, step: Step) -> bool {
        self.steps.contains(&step)
    }

    /// Short label such as `Ex+Sum+Dec/excerpt`.
    pub fn label(&self) -> String {
        let mut steps = self.steps.clone();
        steps.sort();
        steps.dedup();
        let names: Vec<&str> = steps.iter().map(|s| s.short()).collect();
        format!("{}/{}", names.join("+"), self.input_mode.short())
    }
}

impl fmt::Display for ChainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstrumentMention {
    pub surface_name: String,
    pub chunk_index: usize,
    #[serde(default)]
    pub evidence: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence_note: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestStatus {
    Ok,
    SchemaViolation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestTrace {
    pub step: String,
    pub request_id: String,
    pub fingerprint: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub chunk_index: Option<usize>,
    pub status: RequestStatus,
    pub attempts: u32,
    pub usage: UsageStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: Step,
    pub requests: Vec<RequestTrace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainTrace {
    pub doc_id: String,
    pub config: String,
    pub span: SectionSpan,
    pub chunk_tokens: Vec<usize>,
    pub steps: Vec<StepTrace>,
    pub chunk_mentions: Vec<Vec<InstrumentMention>>,
    pub summaries: Vec<String>,
    pub final_mentions: Vec<InstrumentMention>,
    pub decision_degraded: bool,
    pub warnings: Vec<String>,
}

#[derive(Debug, Error)]
pub enum ChainError {
    #[error(transparent)]
    Config(#[from] ChainConfigError),
    #[error(transparent)]
    Chunker(#[from] ChunkerError),
    #[error(transparent)]
    Document(#[from] DocError),
    #[error(transparent)]
    Gateway(Box<GatewayError>),
}

impl From<GatewayError> for ChainError {
    fn from(e: GatewayError) -> Self {
        ChainError::Gateway(Box::new(e))
    }
}

#[derive(Debug, Clone)]
pub struct ChainOutput {
    pub mentions: Vec<InstrumentMention>,
    pub trace: ChainTrace,
    pub usage: UsageStats,
    pub chunks: Vec<TextChunk>,
}

pub fn mention_schema() -> Value {
    json!({
        "type": "object",
        "required": ["instruments"],
        "properties": {
            "instruments": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["name"],
                    "properties": {
                        "name": {"type": "string"},
                        "evidence": {"type": "string"},
                        "note": {"type": "string"}
                    }
                }
            }
        }
    })
}

/// Everything a chain run needs besides the document.
pub struct ChainContext<'a> {
    pub gateway: &'a Gateway,
    pub templates: &'a TemplateSet,
    pub detector: &'a DetectorConfig,
}

/// Accumulates traces, warnings and usage for one step.
struct StepLog {
    step: Step,
    requests: Vec<RequestTrace>,
    usage: UsageStats,
    warnings: Vec<String>,
}

impl StepLog {
    fn new(step: Step, backend: &str) -> Self {
        StepLog { step, requests: Vec::new(), usage: UsageStats::for_backend(backend), warnings: Vec::new() }
    }

    /// Records one request outcome. Schema violations are absorbed and
    /// returned as `Ok(None)`; anything else fatal is returned as an error.
    fn absorb(
        &mut self,
        req: &PromptRequest,
        chunk_index: Option<usize>,
        result: Result<CompletionResult, GatewayError>,
    ) -> Result<Option<CompletionResult>, GatewayError> {
        let fp = fingerprint(req);
        match result {
            Ok(r) => {
                self.usage.add(&r.usage);
                self.requests.push(RequestTrace {
                    step: self.step.as_str().to_string(),
                    request_id: req.request_id.clone(),
                    fingerprint: fp,
                    chunk_index,
                    status: RequestStatus::Ok,
                    attempts: r.attempts,
                    usage: r.usage.clone(),
                });
                Ok(Some(r))
            }
            Err(GatewayError::SchemaViolation { usage, attempts, message, .. }) => {
                self.usage.add(&usage);
                tracing::warn!(request_id = %req.request_id, %message, "structured output unusable");
                self.warnings.push(format!("{}: {message}", req.request_id));
                self.requests.push(RequestTrace {
                    step: self.step.as_str().to_string(),
                    request_id: req.request_id.clone(),
                    fingerprint: fp,
                    chunk_index,
                    status: RequestStatus::SchemaViolation,
                    attempts,
                    usage,
                });
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }
}

fn parse_mentions(parsed: &Value, chunk_index: usize) -> Vec<InstrumentMention> {
    parsed
        .get("instruments")
        .and_then(Value::as_array)
        .into_iter()
        .flatten()
        .filter_map(|item| {
            let name = item.get("name")?.as_str()?.trim();
            if name.is_empty() {
                return None;
            }
            Some(InstrumentMention {
                surface_name: name.to_string(),
                chunk_index,
                evidence: item.get("evidence").and_then(Value::as_str).unwrap_or_default().trim().to_string(),
                confidence_note: item
                    .get("note")
                    .and_then(Value::as_str)
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::to_string),
            })
        })
        .collect()
}

fn chunk_request(
    doc_id: &str,
    step: Step,
    template: &Template,
    chunk: &TextChunk,
    schema: Option<Value>,
    gateway: &Gateway,
) -> PromptRequest {
    let schema_text =
        schema.as_ref().map(|s| serde_json::to_string_pretty(s).expect("schema serializes")).unwrap_or_default();
    let (system, user) = template.render(&[("chunk_text", &chunk.text), ("schema", &schema_text)]);
    let mut req = PromptRequest::new(format!("{doc_id}/{}/{}", step.as_str(), chunk.chunk_index), system, user);
    req.response_schema = schema;
    req.max_output_tokens = gateway.config().max_output_tokens;
    req
}

/// One structured request per chunk. Chunks whose output cannot be validated
/// contribute no mentions.
/// Per-chunk mentions, the step trace, usage and any warnings.
pub type ExtractionStep = (Vec<Vec<InstrumentMention>>, StepTrace, UsageStats, Vec<String>);

pub fn run_extraction_step(
    doc_id: &str,
    chunks: &[TextChunk],
    ctx: &ChainContext<'_>,
) -> Result<ExtractionStep, GatewayError> {
    let requests: Vec<PromptRequest> = chunks
        .iter()
        .map(|c| {
            chunk_request(doc_id, Step::Extraction, &ctx.templates.extraction, c, Some(mention_schema()), ctx.gateway)
        })
        .collect();
    let results: Vec<_> = requests.par_iter().map(|r| ctx.gateway.complete(r)).collect();

    let mut log = StepLog::new(Step::Extraction, ctx.gateway.backend_name());
    let mut per_chunk = Vec::with_capacity(chunks.len());
    for ((req, chunk), result) in requests.iter().zip(chunks).zip(results) {
        let mentions = log
            .absorb(req, Some(chunk.chunk_index), result)?
            .and_then(|r| r.parsed)
            .map(|p| parse_mentions(&p, chunk.chunk_index))
            .unwrap_or_default();
        per_chunk.push(mentions);
    }
    Ok((per_chunk, StepTrace { step: log.step, requests: log.requests }, log.usage, log.warnings))
}

/// One free-text request per chunk; replies are kept verbatim.
pub fn run_summarization_step(
    doc_id: &str,
    chunks: &[TextChunk],
    ctx: &ChainContext<'_>,
) -> Result<(Vec<String>, StepTrace, UsageStats), GatewayError> {
    let requests: Vec<PromptRequest> = chunks
        .iter()
        .map(|c| chunk_request(doc_id, Step::Summarization, &ctx.templates.summarization, c, None, ctx.gateway))
        .collect();
    let results: Vec<_> = requests.par_iter().map(|r| ctx.gateway.complete(r)).collect();

    let mut log = StepLog::new(Step::Summarization, ctx.gateway.backend_name());
    let mut summaries = Vec::with_capacity(chunks.len());
    for ((req, chunk), result) in requests.iter().zip(chunks).zip(results) {
        let text = log.absorb(req, Some(chunk.chunk_index), result)?.map(|r| r.text).unwrap_or_default();
        summaries.push(text);
    }
    Ok((summaries, StepTrace { step: log.step, requests: log.requests }, log.usage))
}

/// Union of mentions deduplicated on the case-insensitive surface form, first
/// occurrence kept.
pub fn dedup_union(per_chunk: &[Vec<InstrumentMention>]) -> Vec<InstrumentMention> {
    let mut seen = HashSet::new();
    per_chunk.iter().flatten().filter(|m| seen.insert(fold(&m.surface_name))).cloned().collect()
}

/// Chunk a decided name most plausibly came from: the first chunk with a
/// matching extraction mention, else the first chunk containing the name.
fn locate_chunk(name: &str, per_chunk: &[Vec<InstrumentMention>], chunks: &[TextChunk]) -> usize {
    let folded = fold(name);
    if let Some(i) = per_chunk.iter().position(|ms| ms.iter().any(|m| fold(&m.surface_name) == folded)) {
        return chunks.get(i).map_or(i, |c| c.chunk_index);
    }
    let key = normalize_key(name).key;
    if !key.is_empty() {
        if let Some(c) =
            chunks.iter().find(|c| format!(" {} ", normalize_key(&c.text).key).contains(&format!(" {key} ")))
        {
            return c.chunk_index;
        }
    }
    0
}

pub struct DecisionOutcome {
    pub mentions: Vec<InstrumentMention>,
    pub degraded: bool,
    pub trace: StepTrace,
    pub usage: UsageStats,
    pub warnings: Vec<String>,
}

/// Consolidates the per-chunk mentions and summaries in a single structured
/// request. If the reply never validates, falls back to [`dedup_union`] and
/// marks the outcome degraded.
pub fn run_decision_step(
    doc_id: &str,
    per_chunk: &[Vec<InstrumentMention>],
    summaries: &[String],
    chunks: &[TextChunk],
    ctx: &ChainContext<'_>,
) -> Result<DecisionOutcome, GatewayError> {
    let mentions_json = if per_chunk.is_empty() {
        "[]".to_string()
    } else {
        let listing: Vec<Value> = per_chunk
            .iter()
            .enumerate()
            .map(|(i, ms)| {
                json!({
                    "excerpt": i,
                    "instruments": ms.iter().map(|m| json!({"name": m.surface_name, "evidence": m.evidence})).collect::<Vec<_>>(),
                })
            })
            .collect();
        serde_json::to_string_pretty(&listing).expect("mentions serialize")
    };
    let summaries_text = if summaries.is_empty() {
        "(none)".to_string()
    } else {
        summaries.iter().enumerate().map(|(i, s)| format!("[excerpt {i}] {}", s.trim())).collect::<Vec<_>>().join("\n")
    };
    let schema = mention_schema();
    let schema_text = serde_json::to_string_pretty(&schema).expect("schema serializes");
    let (system, user) = ctx.templates.decision.render(&[
        ("mentions_json", &mentions_json),
        ("summaries", &summaries_text),
        ("schema", &schema_text),
    ]);
    let mut req = PromptRequest::new(format!("{doc_id}/decision"), system, user).with_schema(schema);
    req.max_output_tokens = ctx.gateway.config().max_output_tokens;

    let mut log = StepLog::new(Step::Decision, ctx.gateway.backend_name());
    let result = ctx.gateway.complete(&req);
    let (mentions, degraded) = match log.absorb(&req, None, result)? {
        Some(r) => {
            let parsed = r.parsed.unwrap_or(Value::Null);
            let mut decided = parse_mentions(&parsed, 0);
            let mut seen = HashSet::new();
            decided.retain(|m| seen.insert(fold(&m.surface_name)));
            for m in &mut decided {
                m.chunk_index = locate_chunk(&m.surface_name, per_chunk, chunks);
            }
            (decided, false)
        }
        None => {
            log.warnings.push(format!("{doc_id}: decision step degraded to extraction union"));
            (dedup_union(per_chunk), true)
        }
    };
    Ok(DecisionOutcome {
        mentions,
        degraded,
        trace: StepTrace { step: log.step, requests: log.requests },
        usage: log.usage,
        warnings: log.warnings,
    })
}

/// Section detection, chunking, and the enabled steps for one document.
pub fn run_chain(
    doc: &ParsedDocument,
    cfg: &ChainConfig,
    chunk_cfg: &ChunkerConfig,
    ctx: &ChainContext<'_>,
) -> Result<ChainOutput, ChainError> {
    cfg.validate()?;
    let cfg = cfg.clone().canonical();
    let span = detect_method_span(doc, ctx.detector);
    let flat = match cfg.input_mode {
        InputMode::MethodExcerpt => flatten_text(doc, Some(span.pages()))?,
        InputMode::FullText => flatten_text(doc, None)?,
    };
    let chunks = chunk_text(&flat.text, &flat.provenance, chunk_cfg)?;

    let mut trace = ChainTrace {
        doc_id: doc.doc_id.clone(),
        config: cfg.label(),
        span,
        chunk_tokens: chunks.iter().map(|c| c.token_count).collect(),
        steps: Vec::new(),
        chunk_mentions: Vec::new(),
        summaries: Vec::new(),
        final_mentions: Vec::new(),
        decision_degraded: false,
        warnings: Vec::new(),
    };
    let mut usage = UsageStats::for_backend(ctx.gateway.backend_name());

    if chunks.is_empty() {
        trace.warnings.push(format!("{}: no text in selected span", doc.doc_id));
        return Ok(ChainOutput { mentions: Vec::new(), trace, usage, chunks });
    }

    if cfg.has(Step::Extraction) {
        let (per_chunk, step, step_usage, warnings) = run_extraction_step(&doc.doc_id, &chunks, ctx)?;
        trace.chunk_mentions = per_chunk;
        trace.steps.push(step);
        trace.warnings.extend(warnings);
        usage.add(&step_usage);
    }
    if cfg.has(Step::Summarization) {
        let (summaries, step, step_usage) = run_summarization_step(&doc.doc_id, &chunks, ctx)?;
        trace.summaries = summaries;
        trace.steps.push(step);
        usage.add(&step_usage);
    }
    let mentions = if cfg.has(Step::Decision) {
        let outcome = run_decision_step(&doc.doc_id, &trace.chunk_mentions, &trace.summaries, &chunks, ctx)?;
        trace.steps.push(outcome.trace);
        trace.warnings.extend(outcome.warnings);
        trace.decision_degraded = outcome.degraded;
        usage.add(&outcome.usage);
        outcome.mentions
    } else {
        dedup_union(&trace.chunk_mentions)
    };
    trace.final_mentions = mentions.clone();
    Ok(ChainOutput { mentions, trace, usage, chunks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert_eq!(ChainConfig::new(&[], InputMode::FullText), Err(ChainConfigError::NoSteps));
        assert_eq!(
            ChainConfig::new(&[Step::Decision], InputMode::FullText),
            Err(ChainConfigError::DecisionWithoutInputs)
        );
        let cfg =
            ChainConfig::new(&[Step::Decision, Step::Extraction, Step::Extraction], InputMode::MethodExcerpt).unwrap();
        assert_eq!(cfg.steps, vec![Step::Extraction, Step::Decision]);
        assert_eq!(cfg.label(), "Ex+Dec/excerpt");
        assert!(ChainConfig::new(&[Step::Summarization, Step::Decision], InputMode::FullText).is_ok());
    }

    #[test]
    fn config_serializes_with_snake_case() {
        let cfg = ChainConfig::default();
        let v = serde_json::to_value(&cfg).unwrap();
        assert_eq!(v["steps"], json!(["extraction", "summarization", "decision"]));
        assert_eq!(v["input_mode"], json!("method_excerpt"));
    }

    fn mention(name: &str, chunk: usize) -> InstrumentMention {
        InstrumentMention {
            surface_name: name.into(),
            chunk_index: chunk,
            evidence: String::new(),
            confidence_note: None,
        }
    }

    #[test]
    fn union_dedups_case_insensitively() {
        let per_chunk =
            vec![vec![mention("CLASS", 0), mention("ECERS", 0)], vec![mention("class", 1), mention("PPVT", 1)]];
        let names: Vec<_> = dedup_union(&per_chunk).into_iter().map(|m| (m.surface_name, m.chunk_index)).collect();
        assert_eq!(names, vec![("CLASS".into(), 0), ("ECERS".into(), 0), ("PPVT".into(), 1)]);
    }

    #[test]
    fn mentions_skip_blank_names() {
        let parsed = json!({"instruments": [{"name": "  "}, {"name": "CLASS", "evidence": " q ", "note": ""}]});
        let ms = parse_mentions(&parsed, 3);
        assert_eq!(ms.len(), 1);
        assert_eq!(ms[0].evidence, "q");
        assert_eq!(ms[0].confidence_note, None);
        assert_eq!(ms[0].chunk_index, 3);
    }
}
