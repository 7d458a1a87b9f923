use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{EvalError, EvalReport, Rates};
use crate::gateway::UsageStats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub config: String,
    pub micro: Rates,
    pub usage: UsageStats,
    /// Relative reductions against the baseline row: (baseline - row) / baseline.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub token_reduction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub input_token_reduction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_time_reduction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: String,
    pub rows: Vec<ComparisonRow>,
}

fn reduction(baseline: u64, value: u64) -> Option<f64> {
    (baseline > 0).then(|| (baseline as f64 - value as f64) / baseline as f64)
}

/// Compares reports scored on the same documents. Rows keep input order;
/// the baseline row carries no deltas, and neither does a single-row table.
pub fn compare_configs(reports: &[(String, EvalReport)], baseline: &str) -> Result<Comparison, EvalError> {
    let base = reports
        .iter()
        .find(|(name, _)| name == baseline)
        .map(|(_, r)| r)
        .ok_or_else(|| EvalError::UnknownBaseline(baseline.to_string()))?;
    let doc_set = |r: &EvalReport| r.docs.iter().map(|d| d.doc_id.clone()).collect::<BTreeSet<_>>();
    let base_docs = doc_set(base);
    for (name, report) in reports {
        if doc_set(report) != base_docs {
            return Err(EvalError::MismatchedCorpora { left: baseline.to_string(), right: name.clone() });
        }
    }
    let single = reports.len() < 2;
    let rows = reports
        .iter()
        .map(|(name, r)| {
            let deltas = !single && name != baseline;
            let pick = |f: fn(&UsageStats) -> u64| if deltas { reduction(f(&base.usage), f(&r.usage)) } else { None };
            ComparisonRow {
                config: name.clone(),
                micro: r.rates.micro,
                usage: r.usage.clone(),
                token_reduction: pick(UsageStats::total_tokens),
                input_token_reduction: pick(|u| u.input_tokens),
                wall_time_reduction: pick(|u| u.wall_time_ms),
            }
        })
        .collect();
    Ok(Comparison { baseline: baseline.to_string(), rows })
}

fn pct(x: Option<f64>) -> String {
    x.map(|v| format!("{:.1}%", v * 100.0)).unwrap_or_else(|| "-".into())
}

impl Comparison {
    pub fn render(&self) -> String {
        let width = self.rows.iter().map(|r| r.config.len()).max().unwrap_or(0).max("Configuration".len());
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>8}  {:>9}  {:>6}  {:>5}  {:>9}  {:>9}  {:>7}  {:>9}  {:>7}",
            "Configuration", "Accuracy", "Precision", "Recall", "F1", "In tok", "Out tok", "dTok", "Wall ms", "dWall"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>8.3}  {:>9.3}  {:>6.3}  {:>5.3}  {:>9}  {:>9}  {:>7}  {:>9}  {:>7}",
                r.config,
                r.micro.accuracy,
                r.micro.precision,
                r.micro.recall,
                r.micro.f1,
                r.usage.input_tokens,
                r.usage.output_tokens,
                pct(r.token_reduction),
                r.usage.wall_time_ms,
                pct(r.wall_time_reduction),
            );
        }
        let _ = writeln!(out, "Deltas are reductions relative to `{}`.", self.baseline);
        out
    }
}
