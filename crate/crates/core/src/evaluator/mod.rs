//! Scoring of predicted instruments against gold annotations.

mod compare;
mod matching;
mod metrics;
mod profile;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::UsageStats;
use crate::normalizer::{fold, normalize, normalize_key, InstrumentDictionary, NormalizerConfig};
use crate::relation::type_alias_map;

pub use compare::{compare_configs, Comparison, ComparisonRow};
pub use matching::{match_entities, pair_score, MatchPair, MatchResult, PairKind};
pub use metrics::{accuracy_from_rates, compute_metrics, f1_score, CoreRates, Counts, Rates};
pub use profile::{error_profile, ErrorProfile, ProfileDoc};

pub const NORMALIZATION_NOTE: &str = "Names are matched after dictionary normalization: canonical-name \
equality first, then fuzzy similarity at or above the configured threshold, one-to-one.";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error("reports cover different documents: `{left}` vs `{right}`")]
    MismatchedCorpora { left: String, right: String },
    #[error("baseline configuration `{0}` is not among the reports")]
    UnknownBaseline(String),
}

// ============================================================================
// Inputs
// ============================================================================

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldInstrument {
    pub name: String,
    #[serde(rename = "type", default, skip_serializing_if = "Option::is_none")]
    pub instrument_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub respondents: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constructs: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcomes: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldAnnotation {
    pub doc_id: String,
    pub instruments: Vec<GoldInstrument>,
}

pub fn parse_gold(raw: &str, path: &Path) -> Result<Vec<GoldAnnotation>, EvalError> {
    let malformed = |message: String| EvalError::Malformed { path: path.to_path_buf(), message };
    let gold: Vec<GoldAnnotation> = serde_json::from_str(raw).map_err(|e| malformed(e.to_string()))?;
    let mut seen = BTreeSet::new();
    for (i, g) in gold.iter().enumerate() {
        if g.doc_id.trim().is_empty() {
            return Err(malformed(format!("entry {i}: empty doc_id")));
        }
        if !seen.insert(g.doc_id.clone()) {
            return Err(malformed(format!("entry {i}: duplicate doc_id `{}`", g.doc_id)));
        }
        if let Some(j) = g.instruments.iter().position(|x| x.name.trim().is_empty()) {
            return Err(malformed(format!("entry {i} (`{}`): instrument {j} has an empty name", g.doc_id)));
        }
    }
    Ok(gold)
}

pub fn load_gold(path: &Path) -> Result<Vec<GoldAnnotation>, EvalError> {
    let raw = std::fs::read_to_string(path).map_err(|source| EvalError::Io { path: path.to_path_buf(), source })?;
    parse_gold(&raw, path)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictedInstrument {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instrument_type: Option<String>,
    #[serde(default)]
    pub respondents: Vec<String>,
    #[serde(default)]
    pub constructs: Vec<String>,
    #[serde(default)]
    pub outcomes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_chunk_index: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictedDoc {
    pub doc_id: String,
    pub instruments: Vec<PredictedInstrument>,
}

// ============================================================================
// Report
// ============================================================================

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocScore {
    pub doc_id: String,
    pub result: MatchResult,
    pub rates: Rates,
    pub predictions_missing: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FieldOverlap {
    pub pairs: usize,
    pub mean_jaccard: Option<f64>,
}

/// Soft agreement on relation fields over matched pairs. Experimental.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FieldAgreement {
    pub experimental: bool,
    pub type_pairs: usize,
    pub type_agreement: Option<f64>,
    pub fields: BTreeMap<String, FieldOverlap>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub docs: Vec<DocScore>,
    pub rates: CoreRates,
    pub usage: UsageStats,
    pub profile: ErrorProfile,
    pub fields: FieldAgreement,
    pub notes: Vec<String>,
}

/// Token set of a list of phrases, in normalized-key space.
fn token_set(items: &[String]) -> BTreeSet<String> {
    items
        .iter()
        .flat_map(|s| {
            let k = normalize_key(s);
            let mut words: Vec<String> = k.key.split_whitespace().map(str::to_string).collect();
            if let Some(e) = k.expansion {
                words.extend(e.split_whitespace().map(str::to_string));
            }
            words
        })
        .collect()
}

pub fn token_jaccard(a: &[String], b: &[String]) -> Option<f64> {
    let (sa, sb) = (token_set(a), token_set(b));
    let union = sa.union(&sb).count();
    (union > 0).then(|| sa.intersection(&sb).count() as f64 / union as f64)
}

/// Predictions grouped under the canonical name the matcher reports.
struct PredGroup {
    instrument_type: Option<String>,
    respondents: Vec<String>,
    constructs: Vec<String>,
    outcomes: Vec<String>,
    first_chunk_index: Option<usize>,
}

fn group_predictions(
    doc: &PredictedDoc,
    dict: &InstrumentDictionary,
    cfg: &NormalizerConfig,
) -> HashMap<String, PredGroup> {
    let mut groups: HashMap<String, PredGroup> = HashMap::new();
    for inst in &doc.instruments {
        let Some(c) = normalize([inst.name.as_str()], dict, cfg).pop() else { continue };
        let g = groups.entry(fold(&c.canonical_name)).or_insert_with(|| PredGroup {
            instrument_type: inst.instrument_type.clone(),
            respondents: Vec::new(),
            constructs: Vec::new(),
            outcomes: Vec::new(),
            first_chunk_index: None,
        });
        g.respondents.extend(inst.respondents.iter().cloned());
        g.constructs.extend(inst.constructs.iter().cloned());
        g.outcomes.extend(inst.outcomes.iter().cloned());
        g.first_chunk_index = match (g.first_chunk_index, inst.first_chunk_index) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
    }
    groups
}

struct DocEval {
    score: DocScore,
    profile: ProfileDoc,
    type_hits: Vec<bool>,
    jaccards: BTreeMap<&'static str, Vec<f64>>,
}

fn evaluate_doc(
    gold: &GoldAnnotation,
    predicted: Option<&PredictedDoc>,
    dict: &InstrumentDictionary,
    cfg: &NormalizerConfig,
) -> DocEval {
    let empty = PredictedDoc::default();
    let pred = predicted.unwrap_or(&empty);
    let pred_names: Vec<String> = pred.instruments.iter().map(|i| i.name.clone()).collect();
    let gold_names: Vec<String> = gold.instruments.iter().map(|i| i.name.clone()).collect();
    let result = match_entities(&pred_names, &gold_names, dict, cfg);

    let groups = group_predictions(pred, dict, cfg);
    let gold_by_name: HashMap<String, &GoldInstrument> =
        gold.instruments.iter().map(|g| (g.name.split_whitespace().collect::<Vec<_>>().join(" "), g)).collect();

    let mut positions = Vec::new();
    let mut type_hits = Vec::new();
    let mut jaccards: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
    for pair in &result.pairs {
        let (Some(p), Some(g)) = (groups.get(&fold(&pair.predicted)), gold_by_name.get(&pair.gold)) else {
            continue;
        };
        positions.extend(p.first_chunk_index);
        if let Some(gt) = g.instrument_type.as_deref().and_then(type_alias_map) {
            type_hits.push(p.instrument_type.as_deref().and_then(type_alias_map) == Some(gt));
        }
        for (field, gv, pv) in [
            ("respondents", &g.respondents, &p.respondents),
            ("constructs", &g.constructs, &p.constructs),
            ("outcomes", &g.outcomes, &p.outcomes),
        ] {
            if let Some(j) = gv.as_ref().and_then(|gv| token_jaccard(gv, pv)) {
                jaccards.entry(field).or_default().push(j);
            }
        }
    }

    let profile = ProfileDoc {
        gold_count: result.tp + result.fn_,
        predicted_count: result.tp + result.fp,
        matched_positions: positions,
    };
    DocEval {
        score: DocScore {
            doc_id: gold.doc_id.clone(),
            rates: Rates::from_counts(Counts::of(&result)),
            result,
            predictions_missing: predicted.is_none(),
        },
        profile,
        type_hits,
        jaccards,
    }
}

/// Scores every gold document. Documents without predictions count as all
/// misses; predictions for documents absent from the gold file are listed
/// in the notes and not scored.
pub fn evaluate(
    label: &str,
    predicted: &[PredictedDoc],
    gold: &[GoldAnnotation],
    dict: &InstrumentDictionary,
    cfg: &NormalizerConfig,
    usage: UsageStats,
) -> EvalReport {
    let by_id: HashMap<&str, &PredictedDoc> = predicted.iter().map(|p| (p.doc_id.as_str(), p)).collect();
    let mut gold_sorted: Vec<&GoldAnnotation> = gold.iter().collect();
    gold_sorted.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));

    let evals: Vec<DocEval> =
        gold_sorted.par_iter().map(|g| evaluate_doc(g, by_id.get(g.doc_id.as_str()).copied(), dict, cfg)).collect();

    let mut notes = vec![NORMALIZATION_NOTE.to_string()];
    if cfg.collapse_subtests {
        notes.push("Sub-tests are collapsed into their parent battery before matching.".into());
    }
    for e in evals.iter().filter(|e| e.score.predictions_missing) {
        notes.push(format!("{}: no predictions found; scored as all misses", e.score.doc_id));
    }
    let gold_ids: BTreeSet<&str> = gold.iter().map(|g| g.doc_id.as_str()).collect();
    let mut extra: Vec<&str> =
        predicted.iter().map(|p| p.doc_id.as_str()).filter(|id| !gold_ids.contains(id)).collect();
    extra.sort_unstable();
    for id in extra {
        notes.push(format!("{id}: predictions without gold annotation; not scored"));
    }

    let results: Vec<MatchResult> = evals.iter().map(|e| e.score.result.clone()).collect();
    let profiles: Vec<ProfileDoc> = evals.iter().map(|e| e.profile.clone()).collect();
    let type_hits: Vec<bool> = evals.iter().flat_map(|e| e.type_hits.iter().copied()).collect();
    let mut fields = FieldAgreement {
        experimental: true,
        type_pairs: type_hits.len(),
        type_agreement: (!type_hits.is_empty())
            .then(|| type_hits.iter().filter(|&&h| h).count() as f64 / type_hits.len() as f64),
        fields: BTreeMap::new(),
    };
    for field in crate::relation::RELATION_FIELDS {
        let values: Vec<f64> =
            evals.iter().flat_map(|e| e.jaccards.get(field).into_iter().flatten().copied()).collect();
        fields.fields.insert(
            field.to_string(),
            FieldOverlap {
                pairs: values.len(),
                mean_jaccard: (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64),
            },
        );
    }

    EvalReport {
        label: label.to_string(),
        rates: compute_metrics(&results),
        docs: evals.into_iter().map(|e| e.score).collect(),
        usage,
        profile: error_profile(&profiles),
        fields,
        notes,
    }
}

impl EvalReport {
    /// Plain-text table: one row per averaging mode, then counts, profile
    /// and notes.
    pub fn render(&self) -> String {
        let width = self.label.len().max("Model".len()) + 8;
        let mut out = String::new();
        let _ =
            writeln!(out, "{:<width$}  {:>8}  {:>9}  {:>6}  {:>5}", "Model", "Accuracy", "Precision", "Recall", "F1");
        for (suffix, r) in [("micro", &self.rates.micro), ("macro", &self.rates.macro_avg)] {
            let _ = writeln!(
                out,
                "{:<width$}  {:>8.3}  {:>9.3}  {:>6.3}  {:>5.3}",
                format!("{} ({suffix})", self.label),
                r.accuracy,
                r.precision,
                r.recall,
                r.f1
            );
        }
        let c = self.rates.counts;
        let _ = writeln!(out, "\nTP {}  FP {}  FN {}  over {} documents", c.tp, c.fp, c.fn_, self.docs.len());
        let p = &self.profile;
        let _ = writeln!(
            out,
            "Mean gold per doc {:.2}; mean predicted per doc {:.2}; over-extraction on single-instrument docs {}",
            p.mean_gold_per_doc,
            p.mean_predicted_per_doc,
            p.over_extraction_factor.map(|f| format!("{f:.2}")).unwrap_or_else(|| "n/a".into())
        );
        let _ = writeln!(
            out,
            "Tokens {} in / {} out; wall time {} ms ({})",
            self.usage.input_tokens, self.usage.output_tokens, self.usage.wall_time_ms, self.usage.backend_name
        );
        for note in &self.notes {
            let _ = writeln!(out, "Note: {note}");
        }
        out
    }
}
