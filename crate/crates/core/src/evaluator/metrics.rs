use serde::{Deserialize, Serialize};

use super::MatchResult;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn of(r: &MatchResult) -> Self {
        Counts { tp: r.tp, fp: r.fp, fn_: r.fn_ }
    }
}

impl std::iter::Sum for Counts {
    fn sum<I: Iterator<Item = Counts>>(iter: I) -> Self {
        iter.fold(Counts::default(), |a, b| Counts { tp: a.tp + b.tp, fp: a.fp + b.fp, fn_: a.fn_ + b.fn_ })
    }
}

/// Precision, recall, F1 and set-Jaccard accuracy. A zero denominator
/// yields 0 and sets `empty`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub empty: bool,
}

fn ratio(num: usize, den: usize) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// TP/(TP+FP+FN) expressed through precision and recall, i.e. the accuracy
/// implied by micro counts that produced those rates.
pub fn accuracy_from_rates(precision: f64, recall: f64) -> f64 {
    if precision <= 0.0 || recall <= 0.0 {
        0.0
    } else {
        1.0 / (1.0 / precision + 1.0 / recall - 1.0)
    }
}

impl Rates {
    pub fn from_counts(c: Counts) -> Self {
        let (precision, e1) = ratio(c.tp, c.tp + c.fp);
        let (recall, e2) = ratio(c.tp, c.tp + c.fn_);
        let (accuracy, e3) = ratio(c.tp, c.tp + c.fp + c.fn_);
        Rates { precision, recall, f1: f1_score(precision, recall), accuracy, empty: e1 || e2 || e3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoreRates {
    pub counts: Counts,
    pub micro: Rates,
    pub macro_avg: Rates,
    /// Documents whose own rates hit a zero denominator.
    pub empty_docs: usize,
}

pub fn compute_metrics(results: &[MatchResult]) -> CoreRates {
    let counts: Counts = results.iter().map(Counts::of).sum();
    let per_doc: Vec<Rates> = results.iter().map(|r| Rates::from_counts(Counts::of(r))).collect();
    let n = per_doc.len();
    let mean = |f: fn(&Rates) -> f64| if n == 0 { 0.0 } else { per_doc.iter().map(f).sum::<f64>() / n as f64 };
    let macro_avg = Rates {
        precision: mean(|r| r.precision),
        recall: mean(|r| r.recall),
        f1: mean(|r| r.f1),
        accuracy: mean(|r| r.accuracy),
        empty: n == 0,
    };
    CoreRates {
        counts,
        micro: Rates::from_counts(counts),
        macro_avg,
        empty_docs: per_doc.iter().filter(|r| r.empty).count(),
    }
}
