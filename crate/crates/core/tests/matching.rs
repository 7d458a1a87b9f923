mod common;

use std::path::{Path, PathBuf};

use common::{dedup, near_miss, oracle_max_matching, oracle_similarity, random_instance};
use instrex::evaluator::{
    compare_configs, compute_metrics, evaluate, load_gold, match_entities, parse_gold, EvalError, EvalReport,
    GoldAnnotation, GoldInstrument, PredictedDoc, PredictedInstrument,
};
use instrex::gateway::UsageStats;
use instrex::normalizer::{
    key_similarity, normalize, normalize_key, similarity, DictEntry, InstrumentDictionary, MatchKind, NormalizerConfig,
};
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::SeedableRng;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn fixture_dict() -> InstrumentDictionary {
    InstrumentDictionary::load(&fixtures().join("dictionary.json")).unwrap()
}

fn empty_dict() -> InstrumentDictionary {
    InstrumentDictionary::new("empty", vec![]).unwrap()
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

// ============================================================================
// Normalizer
// ============================================================================

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn normalize_key_is_idempotent(s in "[ a-zA-Z0-9()\\-\u{2013}.,'/\u{e9}\u{c5}\u{3b1}]{0,40}") {
        let once = normalize_key(&s);
        prop_assert_eq!(normalize_key(&once.to_string()), once);
    }

    #[test]
    fn every_surface_lands_in_exactly_one_group(
        surfaces in prop::collection::vec(prop::sample::select(vec![
            "CLASS", "Classroom Assessment Scoring System", "TSES", "WJ-III", "WJ III", "Letter-Word Identification",
            "Passage Comprehension", "PPVT", "Mathematics Anxiety Rating Scale", "district survey", "Peabody Picture Vocabulary Tests",
        ]), 0..12),
        collapse in any::<bool>(),
    ) {
        let cfg = NormalizerConfig { collapse_subtests: collapse, ..Default::default() };
        let out = normalize(surfaces.iter().copied(), &fixture_dict(), &cfg);
        let grouped: Vec<&String> = out.iter().flat_map(|c| &c.surface_names).collect();
        let distinct: Vec<&str> = surfaces.iter().fold(Vec::new(), |mut acc, s| { if !acc.contains(s) { acc.push(*s) } acc });
        prop_assert_eq!(grouped.len(), distinct.len());
        for s in distinct {
            prop_assert_eq!(grouped.iter().filter(|g| g.as_str() == s).count(), 1);
        }
    }
}

#[test]
fn similarity_agrees_with_recursive_edit_distance() {
    let mut rng = StdRng::seed_from_u64(7);
    let alphabet = b"abcdefghij -";
    for _ in 0..500 {
        let base: String = common::near_miss(&mut rng, "reading fluency scale", alphabet);
        let other = near_miss(&mut rng, &base, alphabet);
        assert!((similarity(&base, &other) - oracle_similarity(&base, &other)).abs() < 1e-12, "{base:?} {other:?}");
    }
}

#[test]
fn exact_names_win_over_fuzzy_neighbours() {
    let dict = InstrumentDictionary::new(
        "t",
        vec![
            DictEntry { canonical_name: "Reading Test".into(), aliases: vec![], parent: None, default_type: None },
            DictEntry { canonical_name: "Reading Tests".into(), aliases: vec![], parent: None, default_type: None },
        ],
    )
    .unwrap();
    assert!(key_similarity(&normalize_key("Reading Test"), &normalize_key("Reading Tests")) >= 0.9);
    for name in ["Reading Test", "Reading Tests"] {
        let out = normalize([name], &dict, &NormalizerConfig::default());
        assert_eq!(out[0].canonical_name, name);
        assert_eq!(out[0].match_kind, MatchKind::Exact);
    }
    let fuzzy = normalize(["Reading Testz"], &dict, &NormalizerConfig::default());
    assert_eq!(fuzzy[0].match_kind, MatchKind::Fuzzy);
    assert_eq!(fuzzy[0].canonical_name, "Reading Test");
}

#[test]
fn collapsing_is_idempotent() {
    let dict = fixture_dict();
    let cfg = NormalizerConfig { collapse_subtests: true, ..Default::default() };
    let surfaces = ["Letter-Word Identification", "WJ-III Passage Comprehension", "PPVT-4", "unknown probe"];
    let once: Vec<String> = normalize(surfaces, &dict, &cfg).into_iter().map(|c| c.canonical_name).collect();
    assert_eq!(
        once,
        strings(&["Woodcock-Johnson III", "Peabody Picture Vocabulary Test, Fourth Edition (PPVT-4)", "unknown probe"])
    );
    let twice: Vec<String> =
        normalize(once.iter().map(String::as_str), &dict, &cfg).into_iter().map(|c| c.canonical_name).collect();
    assert_eq!(once, twice);
}

#[test]
fn dictionary_structure_errors() {
    let e = |name: &str, aliases: &[&str], parent: Option<&str>| DictEntry {
        canonical_name: name.into(),
        aliases: strings(aliases),
        parent: parent.map(str::to_string),
        default_type: None,
    };
    let cases = [
        (vec![e("A", &["x"], None), e("B", &["X"], None)], "already listed"),
        (vec![e("A", &[], Some("Nope"))], "is not an entry"),
        (vec![e("A", &[], Some("B")), e("B", &[], Some("A"))], "cycle"),
        (vec![e(" ", &[], None)], "empty canonical_name"),
    ];
    for (entries, needle) in cases {
        let err = InstrumentDictionary::new("t", entries).unwrap_err().to_string();
        assert!(err.contains(needle), "{err}");
    }
}

// ============================================================================
// Matching
// ============================================================================

#[test]
fn matching_reaches_maximum_cardinality() {
    let dict = empty_dict();
    let cfg = NormalizerConfig { fuzzy_threshold: 0.8, ..Default::default() };
    let mut rng = StdRng::seed_from_u64(2024);
    for _ in 0..500 {
        let (preds, gold) = random_instance(&mut rng);
        let r = match_entities(&preds, &gold, &dict, &cfg);
        let (p, g) = (dedup(&preds), dedup(&gold));
        let edge = |i: usize, j: usize| p[i] == g[j] || oracle_similarity(&p[i], &g[j]) >= 0.8;
        let best = oracle_max_matching(p.len(), g.len(), &edge);
        assert_eq!(r.tp, best, "preds {p:?} gold {g:?}");
        assert_eq!(r.fp, p.len() - best);
        assert_eq!(r.fn_, g.len() - best);
        for pair in &r.pairs {
            let (i, j) =
                (p.iter().position(|x| *x == pair.predicted).unwrap(), g.iter().position(|x| *x == pair.gold).unwrap());
            assert!(edge(i, j));
        }
    }
}

#[test]
fn canonical_pairs_are_preferred_over_fuzzy() {
    let dict = fixture_dict();
    let r = match_entities(
        &strings(&["CLASS", "TSES"]),
        &strings(&["Classroom Assessment Scoring System"]),
        &dict,
        &NormalizerConfig::default(),
    );
    assert_eq!(r.tp, 1);
    assert_eq!(r.pairs[0].predicted, "CLASS (Classroom Assessment Scoring System)");
    assert_eq!(r.unmatched_predicted, strings(&["Teacher Sense of Efficacy Scale (TSES)"]));
}

// ============================================================================
// Reports
// ============================================================================

fn gold(doc: &str, names: &[&str]) -> GoldAnnotation {
    GoldAnnotation {
        doc_id: doc.into(),
        instruments: names
            .iter()
            .map(|n| GoldInstrument {
                name: n.to_string(),
                instrument_type: None,
                respondents: None,
                constructs: None,
                outcomes: None,
            })
            .collect(),
    }
}

fn pred(doc: &str, names: &[&str]) -> PredictedDoc {
    PredictedDoc {
        doc_id: doc.into(),
        instruments: names.iter().map(|n| PredictedInstrument { name: n.to_string(), ..Default::default() }).collect(),
    }
}

fn usage(input: u64, output: u64, wall: u64) -> UsageStats {
    UsageStats { input_tokens: input, output_tokens: output, wall_time_ms: wall, backend_name: "mock".into() }
}

fn report(label: &str, preds: &[PredictedDoc], golds: &[GoldAnnotation], u: UsageStats) -> EvalReport {
    evaluate(label, preds, golds, &empty_dict(), &NormalizerConfig::default(), u)
}

#[test]
fn micro_and_macro_rates() {
    let golds = [gold("a", &["alpha scale", "beta test"]), gold("b", &["gamma survey"])];
    let preds = [pred("a", &["alpha scale", "delta probe", "epsilon log"]), pred("b", &["gamma survey"])];
    let r = report("x", &preds, &golds, usage(0, 0, 0));
    let c = r.rates.counts;
    assert_eq!((c.tp, c.fp, c.fn_), (2, 2, 1));
    assert!((r.rates.micro.precision - 0.5).abs() < 1e-12);
    assert!((r.rates.micro.recall - 2.0 / 3.0).abs() < 1e-12);
    assert!((r.rates.micro.accuracy - 0.4).abs() < 1e-12);
    // doc a: P 1/3 R 1/2; doc b: P 1 R 1
    assert!((r.rates.macro_avg.precision - (1.0 / 3.0 + 1.0) / 2.0).abs() < 1e-12);
    assert!((r.rates.macro_avg.recall - 0.75).abs() < 1e-12);
    assert!((r.rates.macro_avg.f1 - (0.4 + 1.0) / 2.0).abs() < 1e-12);
}

#[test]
fn missing_and_extra_predictions_are_noted() {
    let golds = [gold("a", &["alpha scale"]), gold("b", &["beta test"])];
    let r = report("x", &[pred("a", &["alpha scale"]), pred("zzz", &["noise"])], &golds, usage(0, 0, 0));
    let b = r.docs.iter().find(|d| d.doc_id == "b").unwrap();
    assert!(b.predictions_missing);
    assert_eq!(b.result.fn_, 1);
    assert!(r.notes.iter().any(|n| n.contains("b: no predictions found")));
    assert!(r.notes.iter().any(|n| n.contains("zzz")));
    assert_eq!(r.docs.len(), 2);
}

#[test]
fn empty_documents_set_the_flag() {
    let r = compute_metrics(&[Default::default()]);
    assert!(r.micro.empty);
    assert_eq!(r.micro.precision, 0.0);
    assert_eq!(r.empty_docs, 1);
}

#[test]
fn comparison_reductions_and_errors() {
    let golds = [gold("a", &["alpha scale"])];
    let preds = [pred("a", &["alpha scale"])];
    let reports = vec![
        ("full".to_string(), report("full", &preds, &golds, usage(800, 200, 1000))),
        ("chain".to_string(), report("chain", &preds, &golds, usage(300, 100, 750))),
    ];
    let cmp = compare_configs(&reports, "full").unwrap();
    assert!(cmp.rows[0].token_reduction.is_none());
    assert!((cmp.rows[1].token_reduction.unwrap() - 0.6).abs() < 1e-12);
    assert!((cmp.rows[1].input_token_reduction.unwrap() - 0.625).abs() < 1e-12);
    assert!((cmp.rows[1].wall_time_reduction.unwrap() - 0.25).abs() < 1e-12);

    assert!(matches!(compare_configs(&reports, "nope"), Err(EvalError::UnknownBaseline(_))));
    let other = vec![
        reports[0].clone(),
        ("elsewhere".to_string(), report("e", &preds, &[gold("b", &["alpha scale"])], usage(1, 1, 1))),
    ];
    assert!(matches!(compare_configs(&other, "full"), Err(EvalError::MismatchedCorpora { .. })));
}

#[test]
fn gold_file_validation() {
    assert_eq!(load_gold(&fixtures().join("gold.json")).unwrap().len(), 6);
    let p = Path::new("g.json");
    for (raw, needle) in [
        (r#"[{"doc_id": "a", "instruments": []}, {"doc_id": "a", "instruments": []}]"#, "duplicate"),
        (r#"[{"doc_id": "a", "instruments": [{"name": "  "}]}]"#, "empty name"),
        (r#"{"doc_id": "a"}"#, "invalid type"),
    ] {
        let err = parse_gold(raw, p).unwrap_err().to_string();
        assert!(err.contains(needle), "{err}");
    }
}
