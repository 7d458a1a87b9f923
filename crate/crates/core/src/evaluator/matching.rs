//! One-to-one matching of predicted instrument names against gold names.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::normalizer::{fold, key_similarity, normalize, normalize_key, InstrumentDictionary, NormalizerConfig};

/// Score assigned to pairs whose canonical names agree; ranks above any
/// fuzzy similarity.
const CANONICAL_SCORE: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    Canonical,
    Fuzzy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub predicted: String,
    pub gold: String,
    pub kind: PairKind,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub pairs: Vec<MatchPair>,
    pub unmatched_predicted: Vec<String>,
    pub unmatched_gold: Vec<String>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// A name after dictionary resolution. `name` is what the report shows.
#[derive(Debug, Clone)]
struct Side {
    name: String,
    canonical: String,
}

fn resolve_predicted(names: &[String], dict: &InstrumentDictionary, cfg: &NormalizerConfig) -> Vec<Side> {
    normalize(names.iter().map(String::as_str), dict, cfg)
        .into_iter()
        .map(|c| Side { name: c.canonical_name.clone(), canonical: c.canonical_name })
        .collect()
}

fn resolve_gold(names: &[String], dict: &InstrumentDictionary, cfg: &NormalizerConfig) -> Vec<Side> {
    let mut seen = std::collections::HashSet::new();
    names
        .iter()
        .map(|n| n.split_whitespace().collect::<Vec<_>>().join(" "))
        .filter(|n| !n.is_empty() && seen.insert(fold(n)))
        .map(|n| {
            let canonical =
                normalize([n.as_str()], dict, cfg).pop().map(|c| c.canonical_name).unwrap_or_else(|| n.clone());
            Side { name: n, canonical }
        })
        .collect()
}

/// Similarity of two resolved names, or `None` when they may not be paired.
pub fn pair_score(predicted_canonical: &str, gold_canonical: &str, threshold: f64) -> Option<(PairKind, f64)> {
    if fold(predicted_canonical) == fold(gold_canonical) {
        return Some((PairKind::Canonical, CANONICAL_SCORE));
    }
    let s = key_similarity(&normalize_key(predicted_canonical), &normalize_key(gold_canonical));
    (s >= threshold).then_some((PairKind::Fuzzy, s))
}

struct Edge {
    p: usize,
    g: usize,
    kind: PairKind,
    score: f64,
}

/// Resolves both sides through the dictionary, pairs them greedily in
/// descending similarity (gold-name order breaks ties), then repairs the
/// greedy result with augmenting paths so the pair count is maximal.
pub fn match_entities(
    predicted: &[String],
    gold: &[String],
    dict: &InstrumentDictionary,
    cfg: &NormalizerConfig,
) -> MatchResult {
    let preds = resolve_predicted(predicted, dict, cfg);
    let golds = resolve_gold(gold, dict, cfg);

    let mut edges: Vec<Edge> = Vec::new();
    for (p, ps) in preds.iter().enumerate() {
        for (g, gs) in golds.iter().enumerate() {
            if let Some((kind, score)) = pair_score(&ps.canonical, &gs.canonical, cfg.fuzzy_threshold) {
                edges.push(Edge { p, g, kind, score });
            }
        }
    }
    edges.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(Ordering::Equal)
            .then_with(|| golds[a.g].name.cmp(&golds[b.g].name))
            .then_with(|| preds[a.p].name.cmp(&preds[b.p].name))
    });

    let mut pred_to: Vec<Option<usize>> = vec![None; preds.len()];
    let mut gold_to: Vec<Option<usize>> = vec![None; golds.len()];
    for (i, e) in edges.iter().enumerate() {
        if pred_to[e.p].is_none() && gold_to[e.g].is_none() {
            pred_to[e.p] = Some(i);
            gold_to[e.g] = Some(i);
        }
    }

    // adjacency lists keep the descending-score order
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); preds.len()];
    for (i, e) in edges.iter().enumerate() {
        adj[e.p].push(i);
    }
    for p in 0..preds.len() {
        if pred_to[p].is_none() {
            let mut visited = vec![false; golds.len()];
            augment(p, &edges, &adj, &mut pred_to, &mut gold_to, &mut visited);
        }
    }

    let mut pairs: Vec<MatchPair> = pred_to
        .iter()
        .flatten()
        .map(|&i| {
            let e = &edges[i];
            MatchPair {
                predicted: preds[e.p].name.clone(),
                gold: golds[e.g].name.clone(),
                kind: e.kind,
                score: e.score.min(1.0),
            }
        })
        .collect();
    pairs.sort_by(|a, b| a.gold.cmp(&b.gold).then_with(|| a.predicted.cmp(&b.predicted)));
    let unmatched_predicted: Vec<String> =
        preds.iter().zip(&pred_to).filter(|(_, m)| m.is_none()).map(|(s, _)| s.name.clone()).collect();
    let unmatched_gold: Vec<String> =
        golds.iter().zip(&gold_to).filter(|(_, m)| m.is_none()).map(|(s, _)| s.name.clone()).collect();

    MatchResult {
        tp: pairs.len(),
        fp: unmatched_predicted.len(),
        fn_: unmatched_gold.len(),
        pairs,
        unmatched_predicted,
        unmatched_gold,
    }
}

fn augment(
    p: usize,
    edges: &[Edge],
    adj: &[Vec<usize>],
    pred_to: &mut [Option<usize>],
    gold_to: &mut [Option<usize>],
    visited: &mut [bool],
) -> bool {
    for &i in &adj[p] {
        let g = edges[i].g;
        if visited[g] {
            continue;
        }
        visited[g] = true;
        let free = match gold_to[g] {
            None => true,
            Some(j) => augment(edges[j].p, edges, adj, pred_to, gold_to, visited),
        };
        if free {
            pred_to[p] = Some(i);
            gold_to[g] = Some(i);
            return true;
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::normalizer::DictEntry;

    fn dict() -> InstrumentDictionary {
        let e = |name: &str, aliases: &[&str], parent: Option<&str>| DictEntry {
            canonical_name: name.into(),
            aliases: aliases.iter().map(|s| s.to_string()).collect(),
            parent: parent.map(str::to_string),
            default_type: None,
        };
        InstrumentDictionary::new(
            "t",
            vec![
                e("CLASS (Classroom Assessment Scoring System)", &["CLASS"], None),
                e("Woodcock-Johnson III", &["WJ-III"], None),
                e("WJ-III Letter-Word Identification", &["WJ-III Letter-Word subtest"], Some("Woodcock-Johnson III")),
            ],
        )
        .unwrap()
    }

    fn names(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn acronym_and_full_name_match() {
        let r = match_entities(
            &names(&["CLASS (Classroom Assessment Scoring System)"]),
            &names(&["CLASS"]),
            &dict(),
            &NormalizerConfig::default(),
        );
        assert_eq!((r.tp, r.fp, r.fn_), (1, 0, 0));
        assert_eq!(r.pairs[0].kind, PairKind::Canonical);
    }

    #[test]
    fn empty_prediction_misses_everything() {
        let r = match_entities(&[], &names(&["A", "B", "C"]), &dict(), &NormalizerConfig::default());
        assert_eq!((r.tp, r.fp, r.fn_), (0, 0, 3));
    }

    #[test]
    fn subtest_collapse_changes_false_positives() {
        let pred = names(&["Woodcock Johnson III", "WJ-III Letter-Word subtest"]);
        let gold = names(&["Woodcock-Johnson III"]);
        let on = NormalizerConfig { collapse_subtests: true, ..Default::default() };
        let r = match_entities(&pred, &gold, &dict(), &on);
        assert_eq!((r.tp, r.fp, r.fn_), (1, 0, 0));
        let r = match_entities(&pred, &gold, &dict(), &NormalizerConfig::default());
        assert_eq!((r.tp, r.fp, r.fn_), (1, 1, 0));
    }

    #[test]
    fn augmentation_recovers_blocked_pair() {
        // greedy pairs "abcdefghij" with its exact twin, stranding
        // "zbcdefghij", whose only candidate is that same gold name
        let cfg = NormalizerConfig { fuzzy_threshold: 0.8, ..Default::default() };
        let pred = names(&["abcdefghij", "zbcdefghij"]);
        let gold = names(&["abcdefghij", "abcdefghyy"]);
        let r = match_entities(&pred, &gold, &dict(), &cfg);
        assert_eq!(r.tp, 2);
    }

    #[test]
    fn duplicate_gold_names_count_once() {
        let r = match_entities(&names(&["X"]), &names(&["X", " x "]), &dict(), &NormalizerConfig::default());
        assert_eq!((r.tp, r.fp, r.fn_), (1, 0, 0));
    }
}
