//! Anchor-driven relation extraction: instrument type, respondents,
//! constructs and outcomes for each canonical instrument.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::chain::{ChainContext, RequestStatus, RequestTrace};
use crate::chunker::TextChunk;
use crate::gateway::{fingerprint, GatewayError, PromptRequest, UsageStats};
use crate::normalizer::{fold, normalize_key, CanonicalInstrument};

pub const RELATION_FIELDS: [&str; 3] = ["respondents", "constructs", "outcomes"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstrumentType {
    SurveyQuestionnaire,
    InterviewProtocol,
    ObservationProtocol,
    TestAssessment,
    OtherTool,
}

impl InstrumentType {
    pub const ALL: [InstrumentType; 5] = [
        InstrumentType::SurveyQuestionnaire,
        InstrumentType::InterviewProtocol,
        InstrumentType::ObservationProtocol,
        InstrumentType::TestAssessment,
        InstrumentType::OtherTool,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            InstrumentType::SurveyQuestionnaire => "survey_questionnaire",
            InstrumentType::InterviewProtocol => "interview_protocol",
            InstrumentType::ObservationProtocol => "observation_protocol",
            InstrumentType::TestAssessment => "test_assessment",
            InstrumentType::OtherTool => "other_tool",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            InstrumentType::SurveyQuestionnaire => "Survey/Questionnaire",
            InstrumentType::InterviewProtocol => "Interview Protocol",
            InstrumentType::ObservationProtocol => "Observation Protocol",
            InstrumentType::TestAssessment => "Test/Assessment",
            InstrumentType::OtherTool => "Other Tool",
        }
    }
}

impl fmt::Display for InstrumentType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

// Checked in order; the first family with a whole-word hit wins.
const TYPE_KEYWORDS: &[(InstrumentType, &[&str])] = &[
    (InstrumentType::InterviewProtocol, &["interview", "interviews", "focus group", "focus groups"]),
    (InstrumentType::ObservationProtocol, &["observation", "observations", "observational"]),
    (
        InstrumentType::SurveyQuestionnaire,
        &["survey", "surveys", "questionnaire", "questionnaires", "likert", "rating scale", "self report", "inventory"],
    ),
    (
        InstrumentType::TestAssessment,
        &[
            "test",
            "tests",
            "assessment",
            "assessments",
            "exam",
            "exams",
            "examination",
            "battery",
            "subtest",
            "achievement measure",
        ],
    ),
    (
        InstrumentType::OtherTool,
        &[
            "checklist",
            "checklists",
            "rubric",
            "rubrics",
            "diary",
            "diaries",
            "log",
            "logs",
            "other",
            "other tool",
            "tool",
        ],
    ),
];

fn label_key(raw: &str) -> String {
    raw.chars()
        .map(|c| if c.is_alphanumeric() { c.to_lowercase().next().unwrap_or(c) } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Maps free-text type labels ("Survey", "Observation Protocol",
/// "tests/assessments", ...) onto the five instrument families.
pub fn type_alias_map(raw: &str) -> Option<InstrumentType> {
    let key = label_key(raw);
    if key.is_empty() {
        return None;
    }
    if let Some(t) = InstrumentType::ALL.iter().find(|t| label_key(t.as_str()) == key) {
        return Some(*t);
    }
    let padded = format!(" {key} ");
    TYPE_KEYWORDS.iter().find(|(_, words)| words.iter().any(|w| padded.contains(&format!(" {w} ")))).map(|(t, _)| *t)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstrumentRecord {
    pub canonical_name: String,
    pub instrument_type: InstrumentType,
    pub respondents: Vec<String>,
    pub constructs: Vec<String>,
    pub outcomes: Vec<String>,
    pub evidence: BTreeMap<String, Vec<String>>,
    pub doc_id: String,
}

/// One document's output in the published record format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordFile {
    pub doc_id: String,
    pub instruments: Vec<RecordEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordEntry {
    pub name: String,
    #[serde(rename = "type")]
    pub instrument_type: String,
    pub respondents: Vec<String>,
    pub constructs: Vec<String>,
    pub outcomes: Vec<String>,
    #[serde(default)]
    pub evidence: BTreeMap<String, Vec<String>>,
}

impl RecordFile {
    pub fn from_records(doc_id: &str, records: &[InstrumentRecord]) -> Self {
        RecordFile {
            doc_id: doc_id.to_string(),
            instruments: records
                .iter()
                .map(|r| RecordEntry {
                    name: r.canonical_name.clone(),
                    instrument_type: r.instrument_type.as_str().to_string(),
                    respondents: r.respondents.clone(),
                    constructs: r.constructs.clone(),
                    outcomes: r.outcomes.clone(),
                    evidence: r.evidence.clone(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationTrace {
    pub anchor: String,
    pub selected_chunks: Vec<usize>,
    pub request: RequestTrace,
    pub degraded: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub coerced_type: Option<String>,
    pub dropped_evidence: usize,
}

pub fn relation_schema() -> Value {
    let strings = json!({"type": "array", "items": {"type": "string"}});
    json!({
        "type": "object",
        "required": ["type", "respondents", "constructs", "outcomes"],
        "properties": {
            "type": {"type": "string"},
            "respondents": strings,
            "constructs": strings,
            "outcomes": strings,
            "evidence": {"type": "object", "additionalProperties": strings}
        }
    })
}

fn padded_key(text: &str) -> String {
    let k = normalize_key(text);
    match k.expansion {
        Some(e) => format!(" {} {} ", k.key, e),
        None => format!(" {} ", k.key),
    }
}

/// Chunks mentioning the anchor in normalized-key space; all chunks when none do.
pub fn select_chunks<'c>(anchor: &CanonicalInstrument, chunks: &'c [TextChunk]) -> Vec<&'c TextChunk> {
    let mut needles: Vec<String> = Vec::new();
    for name in std::iter::once(&anchor.canonical_name).chain(&anchor.surface_names) {
        let k = normalize_key(name);
        for part in std::iter::once(k.key).chain(k.expansion) {
            if !part.is_empty() && !needles.contains(&part) {
                needles.push(part);
            }
        }
    }
    let hits: Vec<&TextChunk> = chunks
        .iter()
        .filter(|c| {
            let hay = padded_key(&c.text);
            needles.iter().any(|n| hay.contains(&format!(" {n} ")))
        })
        .collect();
    if hits.is_empty() {
        chunks.iter().collect()
    } else {
        hits
    }
}

fn dedup_strings(values: Option<&Value>) -> Vec<String> {
    let mut seen = HashSet::new();
    values
        .and_then(Value::as_array)
        .into_iter()
        .flatten()
        .filter_map(Value::as_str)
        .map(|s| s.split_whitespace().collect::<Vec<_>>().join(" "))
        .filter(|s| !s.is_empty() && seen.insert(fold(s)))
        .collect()
}

fn squash(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub struct RelationOutput {
    pub records: Vec<InstrumentRecord>,
    pub traces: Vec<RelationTrace>,
    pub usage: UsageStats,
}

/// One structured request per anchor over the chunks that mention it.
/// Evidence quotes not found in those chunks are dropped.
pub fn extract_relations(
    doc_id: &str,
    anchors: &[CanonicalInstrument],
    chunks: &[TextChunk],
    ctx: &ChainContext<'_>,
) -> Result<RelationOutput, GatewayError> {
    let schema = relation_schema();
    let schema_text = serde_json::to_string_pretty(&schema).expect("schema serializes");

    let prepared: Vec<(PromptRequest, Vec<&TextChunk>)> = anchors
        .iter()
        .enumerate()
        .map(|(i, anchor)| {
            let selected = select_chunks(anchor, chunks);
            let excerpts = selected
                .iter()
                .map(|c| format!("[excerpt {}]\n{}", c.chunk_index, c.text))
                .collect::<Vec<_>>()
                .join("\n\n");
            let surface_forms = anchor.surface_names.join("; ");
            let (system, user) = ctx.templates.relation.render(&[
                ("anchor_name", &anchor.canonical_name),
                ("surface_forms", &surface_forms),
                ("chunks", &excerpts),
                ("schema", &schema_text),
            ]);
            let mut req =
                PromptRequest::new(format!("{doc_id}/relation/{i}"), system, user).with_schema(schema.clone());
            req.max_output_tokens = ctx.gateway.config().max_output_tokens;
            (req, selected)
        })
        .collect();

    let results: Vec<_> = prepared.par_iter().map(|(req, _)| ctx.gateway.complete(req)).collect();

    let mut records = Vec::with_capacity(anchors.len());
    let mut traces = Vec::with_capacity(anchors.len());
    let mut usage = UsageStats::for_backend(ctx.gateway.backend_name());

    for ((anchor, (req, selected)), result) in anchors.iter().zip(&prepared).zip(results) {
        let (parsed, status, attempts, call_usage) = match result {
            Ok(r) => (r.parsed, RequestStatus::Ok, r.attempts, r.usage),
            Err(GatewayError::SchemaViolation { attempts, usage, message, .. }) => {
                tracing::warn!(request_id = %req.request_id, %message, "relation output unusable");
                (None, RequestStatus::SchemaViolation, attempts, usage)
            }
            Err(e) => return Err(e),
        };
        usage.add(&call_usage);

        let fallback_type =
            anchor.default_type.as_deref().and_then(type_alias_map).unwrap_or(InstrumentType::OtherTool);
        let mut record = InstrumentRecord {
            canonical_name: anchor.canonical_name.clone(),
            instrument_type: fallback_type,
            respondents: Vec::new(),
            constructs: Vec::new(),
            outcomes: Vec::new(),
            evidence: BTreeMap::new(),
            doc_id: doc_id.to_string(),
        };
        let mut coerced_type = None;
        let mut dropped_evidence = 0;
        let degraded = parsed.is_none();

        if let Some(parsed) = parsed {
            let raw_type = parsed.get("type").and_then(Value::as_str).unwrap_or_default();
            record.instrument_type = match type_alias_map(raw_type) {
                Some(t) => t,
                None => {
                    tracing::info!(anchor = %anchor.canonical_name, raw_type, "coercing unknown type to other_tool");
                    coerced_type = Some(raw_type.to_string());
                    InstrumentType::OtherTool
                }
            };
            record.respondents = dedup_strings(parsed.get("respondents"));
            record.constructs = dedup_strings(parsed.get("constructs"));
            record.outcomes = dedup_strings(parsed.get("outcomes"));

            let haystacks: Vec<String> = selected.iter().map(|c| squash(&c.text)).collect();
            if let Some(evidence) = parsed.get("evidence").and_then(Value::as_object) {
                for (field, quotes) in evidence {
                    let kept: Vec<String> = dedup_strings(Some(quotes))
                        .into_iter()
                        .filter(|q| {
                            let found = haystacks.iter().any(|h| h.contains(q.as_str()));
                            dropped_evidence += usize::from(!found);
                            found
                        })
                        .collect();
                    if !kept.is_empty() {
                        record.evidence.insert(field.clone(), kept);
                    }
                }
            }
        }

        traces.push(RelationTrace {
            anchor: anchor.canonical_name.clone(),
            selected_chunks: selected.iter().map(|c| c.chunk_index).collect(),
            request: RequestTrace {
                step: "relation".into(),
                request_id: req.request_id.clone(),
                fingerprint: fingerprint(req),
                chunk_index: None,
                status,
                attempts,
                usage: call_usage,
            },
            degraded,
            coerced_type,
            dropped_evidence,
        });
        records.push(record);
    }

    Ok(RelationOutput { records, traces, usage })
}
