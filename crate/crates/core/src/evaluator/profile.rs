use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Per-document inputs to the error profile.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProfileDoc {
    pub gold_count: usize,
    pub predicted_count: usize,
    /// Chunk index of the first mention of each matched prediction, where known.
    pub matched_positions: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorProfile {
    pub docs: usize,
    pub mean_gold_per_doc: f64,
    pub mean_predicted_per_doc: f64,
    pub single_instrument_docs: usize,
    /// Predictions per gold instrument over documents with exactly one gold
    /// instrument; absent when there are none.
    pub over_extraction_factor: Option<f64>,
    pub position_counts: BTreeMap<usize, usize>,
    pub position_share: BTreeMap<usize, f64>,
}

pub fn error_profile(docs: &[ProfileDoc]) -> ErrorProfile {
    let n = docs.len();
    let mean = |f: fn(&ProfileDoc) -> usize| {
        if n == 0 {
            0.0
        } else {
            docs.iter().map(f).sum::<usize>() as f64 / n as f64
        }
    };
    let singles: Vec<&ProfileDoc> = docs.iter().filter(|d| d.gold_count == 1).collect();
    let over_extraction_factor = (!singles.is_empty())
        .then(|| singles.iter().map(|d| d.predicted_count).sum::<usize>() as f64 / singles.len() as f64);

    let mut position_counts = BTreeMap::new();
    for &p in docs.iter().flat_map(|d| &d.matched_positions) {
        *position_counts.entry(p).or_insert(0usize) += 1;
    }
    let total: usize = position_counts.values().sum();
    let position_share = position_counts.iter().map(|(&k, &v)| (k, v as f64 / total as f64)).collect();

    ErrorProfile {
        docs: n,
        mean_gold_per_doc: mean(|d| d.gold_count),
        mean_predicted_per_doc: mean(|d| d.predicted_count),
        single_instrument_docs: singles.len(),
        over_extraction_factor,
        position_counts,
        position_share,
    }
}
