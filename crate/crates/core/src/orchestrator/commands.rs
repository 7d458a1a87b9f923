use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::config::RunConfig;
use super::extract::{
    list_documents, run_extract, write_json, Manifest, Resources, MANIFEST_FILE, RECORDS_DIR, TRACES_DIR,
};
use super::RunError;
use crate::chain::{ChainConfig, InputMode, Step};
use crate::doc_model::load_document;
use crate::evaluator::{
    compare_configs, evaluate, load_gold, Comparison, EvalReport, PredictedDoc, PredictedInstrument,
};
use crate::gateway::UsageStats;
use crate::normalizer::{fold, InstrumentDictionary, NormalizerConfig};
use crate::relation::RecordFile;
use crate::section::{detect_method_span, DetectionMode, DetectorConfig, SectionSpan};

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";

fn malformed(path: &Path, e: impl std::fmt::Display) -> RunError {
    RunError::Config(format!("{}: {e}", path.display()))
}

// ============================================================================
// evaluate
// ============================================================================

/// Predictions from an extract output directory: record files plus the
/// first-mention chunk positions and usage totals when traces and a
/// manifest are present.
pub struct Predictions {
    pub docs: Vec<PredictedDoc>,
    pub usage: UsageStats,
    pub label: String,
}

fn first_positions(trace: &Path) -> Result<BTreeMap<String, usize>, RunError> {
    let mut out = BTreeMap::new();
    let Ok(raw) = std::fs::read_to_string(trace) else { return Ok(out) };
    for l in raw.lines().filter(|l| !l.trim().is_empty()) {
        let v: Value = serde_json::from_str(l).map_err(|e| malformed(trace, e))?;
        if v.get("event").and_then(Value::as_str) != Some("normalized") {
            continue;
        }
        for inst in v.get("instruments").and_then(Value::as_array).into_iter().flatten() {
            if let (Some(name), Some(pos)) = (
                inst.get("canonical_name").and_then(Value::as_str),
                inst.get("first_chunk_index").and_then(Value::as_u64),
            ) {
                out.insert(fold(name), pos as usize);
            }
        }
    }
    Ok(out)
}

pub fn load_predictions(dir: &Path) -> Result<Predictions, RunError> {
    if !dir.is_dir() {
        return Err(RunError::Config(format!("predictions directory {} does not exist", dir.display())));
    }
    let records = if dir.join(RECORDS_DIR).is_dir() { dir.join(RECORDS_DIR) } else { dir.to_path_buf() };
    let mut files: Vec<PathBuf> = std::fs::read_dir(&records)
        .map_err(|e| malformed(&records, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json") && p.file_name().is_some_and(|n| n != MANIFEST_FILE))
        .collect();
    files.sort();

    let mut docs = Vec::with_capacity(files.len());
    for file in files {
        let raw = std::fs::read_to_string(&file).map_err(|e| malformed(&file, e))?;
        let rec: RecordFile = serde_json::from_str(&raw).map_err(|e| malformed(&file, e))?;
        let stem = file.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let positions = first_positions(&dir.join(TRACES_DIR).join(format!("{stem}.trace.jsonl")))?;
        docs.push(PredictedDoc {
            doc_id: rec.doc_id,
            instruments: rec
                .instruments
                .into_iter()
                .map(|i| PredictedInstrument {
                    first_chunk_index: positions.get(&fold(&i.name)).copied(),
                    name: i.name,
                    instrument_type: Some(i.instrument_type),
                    respondents: i.respondents,
                    constructs: i.constructs,
                    outcomes: i.outcomes,
                })
                .collect(),
        });
    }

    let manifest: Option<Manifest> = std::fs::read_to_string(dir.join(MANIFEST_FILE))
        .ok()
        .map(|raw| serde_json::from_str(&raw).map_err(|e| malformed(&dir.join(MANIFEST_FILE), e)))
        .transpose()?;
    let (usage, label) = match manifest {
        Some(m) => (m.usage, m.chain),
        None => (UsageStats::default(), dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()),
    };
    Ok(Predictions { docs, usage, label })
}

pub fn load_dictionary(path: &Path) -> Result<InstrumentDictionary, RunError> {
    InstrumentDictionary::load(path).map_err(|e| RunError::Config(format!("dictionary {}: {e}", path.display())))
}

/// Scores an extract output directory and writes `report.json` and
/// `report.txt` into `out_dir`.
pub fn run_evaluate(
    predictions: &Path,
    gold: &Path,
    dict: &InstrumentDictionary,
    cfg: &NormalizerConfig,
    out_dir: &Path,
) -> Result<EvalReport, RunError> {
    let preds = load_predictions(predictions)?;
    let gold = load_gold(gold).map_err(|e| RunError::Config(e.to_string()))?;
    let report = evaluate(&preds.label, &preds.docs, &gold, dict, cfg, preds.usage);
    std::fs::create_dir_all(out_dir).map_err(|e| malformed(out_dir, e))?;
    write_json(&out_dir.join(REPORT_JSON), &report)?;
    std::fs::write(out_dir.join(REPORT_TXT), report.render()).map_err(|e| malformed(out_dir, e))?;
    Ok(report)
}

// ============================================================================
// ablate
// ============================================================================

fn default_modes() -> Vec<InputMode> {
    vec![InputMode::MethodExcerpt]
}

/// Cartesian grid of step lists and input modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationGrid {
    pub steps: Vec<Vec<Step>>,
    #[serde(default = "default_modes")]
    pub input_modes: Vec<InputMode>,
    /// Label of the row deltas are measured against. Defaults to the first
    /// full-text cell, else the first cell.
    #[serde(default)]
    pub baseline: Option<String>,
}

impl AblationGrid {
    pub fn load(path: &Path) -> Result<Self, RunError> {
        let raw = std::fs::read_to_string(path).map_err(|e| malformed(path, e))?;
        toml::from_str(&raw).map_err(|e| malformed(path, e))
    }

    pub fn cells(&self, template_set: &str) -> Result<Vec<ChainConfig>, RunError> {
        let mut cells = Vec::new();
        for steps in &self.steps {
            for &mode in &self.input_modes {
                let mut cfg = ChainConfig::new(steps, mode).map_err(|e| {
                    let names: Vec<&str> = steps.iter().map(|s| s.as_str()).collect();
                    RunError::Config(format!("grid cell [{}]: {e}", names.join(", ")))
                })?;
                cfg.template_set = template_set.to_string();
                if !cells.contains(&cfg) {
                    cells.push(cfg);
                }
            }
        }
        if cells.is_empty() {
            return Err(RunError::Config("ablation grid has no cells".into()));
        }
        Ok(cells)
    }
}

/// Runs extract and evaluate per grid cell with one shared backend, then
/// compares the cells. Writes `comparison.json` and `comparison.txt`.
pub fn run_ablate(base: &RunConfig, grid: &AblationGrid, gold: &Path) -> Result<Comparison, RunError> {
    base.validate()?;
    let cells = grid.cells(&base.chain.template_set)?;
    let res = Resources::load(base)?;
    let mut reports = Vec::with_capacity(cells.len());
    for chain in &cells {
        let label = chain.label();
        let mut cfg = base.clone();
        cfg.chain = chain.clone();
        cfg.output_dir = base.output_dir.join("cells").join(label.replace(['/', '+'], "_"));
        let manifest = run_extract(&cfg, &res)?;
        if let Some(err) = manifest.failure() {
            return Err(err);
        }
        let report = run_evaluate(&cfg.output_dir, gold, &res.dictionary, &cfg.normalizer, &cfg.output_dir)?;
        reports.push((label, report));
    }
    let baseline = match &grid.baseline {
        Some(b) => b.clone(),
        None => cells.iter().find(|c| c.input_mode == InputMode::FullText).unwrap_or(&cells[0]).label(),
    };
    let comparison = compare_configs(&reports, &baseline).map_err(|e| RunError::Config(e.to_string()))?;
    write_json(&base.output_dir.join("comparison.json"), &comparison)?;
    std::fs::write(base.output_dir.join("comparison.txt"), comparison.render())
        .map_err(|e| malformed(&base.output_dir, e))?;
    Ok(comparison)
}

// ============================================================================
// detect
// ============================================================================

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanLabel {
    pub start_page: u32,
    pub end_page: u32,
    pub detection_mode: DetectionMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectedSpan {
    pub doc_id: String,
    pub span: SectionSpan,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectReport {
    pub spans: Vec<DetectedSpan>,
    pub labeled: usize,
    pub correct: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    pub unlabeled: Vec<String>,
}

pub fn span_matches(span: &SectionSpan, label: &SpanLabel) -> bool {
    span.detection_mode == label.detection_mode
        && span.start_page == label.start_page
        && span.end_page == label.end_page
}

/// Detects the method span of every document; with labels (a JSON object
/// keyed by doc_id) also scores span accuracy.
pub fn run_detect(
    input_dir: &Path,
    detector: &DetectorConfig,
    labels: Option<&Path>,
) -> Result<DetectReport, RunError> {
    let labels: Option<BTreeMap<String, SpanLabel>> = labels
        .map(|p| {
            let raw = std::fs::read_to_string(p).map_err(|e| malformed(p, e))?;
            serde_json::from_str(&raw).map_err(|e| malformed(p, e))
        })
        .transpose()?;
    let mut spans = Vec::new();
    let mut unlabeled = Vec::new();
    for path in list_documents(input_dir)? {
        let doc = load_document(&path).map_err(|e| RunError::Ingestion(e.to_string()))?;
        let span = detect_method_span(&doc, detector);
        let correct = labels.as_ref().and_then(|l| l.get(&doc.doc_id)).map(|l| span_matches(&span, l));
        if labels.is_some() && correct.is_none() {
            unlabeled.push(doc.doc_id.clone());
        }
        spans.push(DetectedSpan { doc_id: doc.doc_id, span, correct });
    }
    let labeled = spans.iter().filter(|s| s.correct.is_some()).count();
    let correct = spans.iter().filter(|s| s.correct == Some(true)).count();
    Ok(DetectReport {
        accuracy: (labeled > 0).then(|| correct as f64 / labeled as f64),
        spans,
        labeled,
        correct,
        unlabeled,
    })
}
