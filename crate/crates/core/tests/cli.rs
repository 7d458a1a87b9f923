use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn instrex(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_instrex")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every file under `root`, keyed by relative path.
fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn subset(snap: &BTreeMap<String, Vec<u8>>, prefixes: &[&str]) -> BTreeMap<String, Vec<u8>> {
    snap.iter()
        .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect()
}

/// Compares `actual` with the golden files under `golden`, or rewrites them
/// when `UPDATE_GOLDEN` is set.
fn check_golden(actual: &BTreeMap<String, Vec<u8>>, golden: &Path) {
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        if golden.exists() {
            std::fs::remove_dir_all(golden).unwrap();
        }
        for (rel, bytes) in actual {
            let path = golden.join(rel);
            std::fs::create_dir_all(path.parent().unwrap()).unwrap();
            std::fs::write(path, bytes).unwrap();
        }
        return;
    }
    let expected = snapshot(golden);
    assert_eq!(
        actual.keys().collect::<Vec<_>>(),
        expected.keys().collect::<Vec<_>>(),
        "golden file set differs under {}",
        golden.display()
    );
    for (rel, bytes) in actual {
        assert!(
            expected[rel] == *bytes,
            "{rel} differs from golden copy; rerun with UPDATE_GOLDEN=1 if the change is intended"
        );
    }
}

fn extract_into(out: &Path, extra: &[&str]) -> Output {
    let config = fixtures().join("run.toml");
    let mut args = vec!["extract", "--config", s(&config), "--output-dir", s(out)];
    args.extend_from_slice(extra);
    instrex(&args)
}

#[test]
fn extract_matches_golden_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = extract_into(dir.path(), &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let snap = snapshot(dir.path());
    check_golden(&subset(&snap, &["records/", "traces/"]), &fixtures().join("golden/extract"));

    let manifest: Value = serde_json::from_slice(&snap["manifest.json"]).unwrap();
    assert_eq!(manifest["dictionary_version"], "fixture-2024.1");
    assert_eq!(manifest["template_set"], "default");
    assert_eq!(manifest["chain"], "Ex+Sum+Dec/excerpt");
    assert_eq!(manifest["succeeded"], 6);
}

#[test]
fn manifest_reproduces_the_run() {
    let first = tempfile::tempdir().unwrap();
    assert_eq!(code(&extract_into(first.path(), &[])), 0);
    let second = tempfile::tempdir().unwrap();
    let manifest = first.path().join("manifest.json");
    let out = instrex(&["extract", "--config", s(&manifest), "--output-dir", s(second.path())]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let (a, b) = (snapshot(first.path()), snapshot(second.path()));
    assert_eq!(subset(&a, &["records/", "traces/"]), subset(&b, &["records/", "traces/"]));

    let mut tampered: Value = serde_json::from_slice(&a["manifest.json"]).unwrap();
    tampered["config"]["seed"] = Value::from(99);
    let bad = first.path().join("tampered.json");
    std::fs::write(&bad, tampered.to_string()).unwrap();
    let out = instrex(&["extract", "--config", s(&bad), "--output-dir", s(second.path())]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("digest mismatch"), "{}", stderr(&out));
}

#[test]
fn missing_dictionary_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("no-such-dictionary.json");
    let out = extract_into(dir.path(), &["--dictionary", s(&missing)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("no-such-dictionary.json"), "{}", stderr(&out));
}

#[test]
fn transcript_miss_exits_4_naming_the_request() {
    let dir = tempfile::tempdir().unwrap();
    let full = std::fs::read_to_string(fixtures().join("transcript.jsonl")).unwrap();
    let dropped = "\"request_id\":\"class-observation-2019/relation/0\"";
    let trimmed: String = full.lines().filter(|l| !l.contains(dropped)).map(|l| format!("{l}\n")).collect();
    assert!(trimmed.len() < full.len());
    let transcript = dir.path().join("partial.jsonl");
    std::fs::write(&transcript, trimmed).unwrap();

    let out_dir = dir.path().join("out");
    let out = extract_into(&out_dir, &["--transcript", s(&transcript)]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
    assert!(stderr(&out).contains("class-observation-2019/relation/0"), "{}", stderr(&out));
    // the other documents still complete
    let manifest: Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["succeeded"], 5);
    assert_eq!(manifest["failed"], 1);
}

#[test]
fn malformed_document_exits_3_and_others_continue() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    std::fs::create_dir_all(&corpus).unwrap();
    std::fs::copy(fixtures().join("corpus/class-observation-2019.json"), corpus.join("class-observation-2019.json"))
        .unwrap();
    std::fs::write(corpus.join("broken.json"), r#"{"doc_id": "broken", "pages": [{"page_number": 0}]}"#).unwrap();
    let out_dir = dir.path().join("out");
    let out = extract_into(&out_dir, &["--input-dir", s(&corpus)]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("broken"));
    assert!(out_dir.join("records/class-observation-2019.json").exists());

    let out = extract_into(&out_dir, &["--input-dir", s(&corpus), "--fail-fast", "--concurrency", "1"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn collapse_flag_merges_subtests() {
    let dir = tempfile::tempdir().unwrap();
    let out = extract_into(dir.path(), &["--collapse-subtests"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rec: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("records/early-reading-2018.json")).unwrap())
            .unwrap();
    let names: Vec<&str> = rec["instruments"].as_array().unwrap().iter().map(|i| i["name"].as_str().unwrap()).collect();
    assert_eq!(names, vec!["Woodcock-Johnson III", "Peabody Picture Vocabulary Test, Fourth Edition (PPVT-4)"]);
}

#[test]
fn evaluate_matches_golden_report() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&extract_into(dir.path(), &[])), 0);
    let report_dir = dir.path().join("report");
    let gold = fixtures().join("gold.json");
    let dict = fixtures().join("dictionary.json");
    let out = instrex(&[
        "evaluate",
        "--predictions",
        s(dir.path()),
        "--gold",
        s(&gold),
        "--dictionary",
        s(&dict),
        "--out",
        s(&report_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    check_golden(&snapshot(&report_dir), &fixtures().join("golden/evaluate"));
}

#[test]
fn evaluate_empty_predictions_scores_zero_recall() {
    let dir = tempfile::tempdir().unwrap();
    let preds = dir.path().join("preds");
    std::fs::create_dir_all(&preds).unwrap();
    let gold = fixtures().join("gold.json");
    let dict = fixtures().join("dictionary.json");
    let out = instrex(&["evaluate", "--predictions", s(&preds), "--gold", s(&gold), "--dictionary", s(&dict)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(preds.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["rates"]["micro"]["recall"], 0.0);
    assert_eq!(report["rates"]["counts"]["fn"], 9);
    assert!(report["notes"].as_array().unwrap().iter().any(|n| n.as_str().unwrap().contains("no predictions found")));
}

#[test]
fn evaluate_rejects_malformed_gold() {
    let dir = tempfile::tempdir().unwrap();
    let gold = dir.path().join("gold.json");
    std::fs::write(&gold, r#"[{"doc_id": "", "instruments": []}]"#).unwrap();
    let dict = fixtures().join("dictionary.json");
    let out = instrex(&["evaluate", "--predictions", s(dir.path()), "--gold", s(&gold), "--dictionary", s(&dict)]);
    assert_eq!(code(&out), 2);
}

fn ablate(grid: &str, out: &Path) -> Output {
    let config = fixtures().join("run.toml");
    let grid = fixtures().join(grid);
    let gold = fixtures().join("gold.json");
    instrex(&["ablate", "--config", s(&config), "--grid", s(&grid), "--gold", s(&gold), "--output-dir", s(out)])
}

#[test]
fn ablate_two_cell_grid_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    let out = ablate("grid.toml", dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let snap = snapshot(dir.path());
    check_golden(&subset(&snap, &["comparison."]), &fixtures().join("golden/ablate"));
    let cmp: Value = serde_json::from_slice(&snap["comparison.json"]).unwrap();
    assert_eq!(cmp["rows"].as_array().unwrap().len(), 2);
}

#[test]
fn ablate_rejects_decision_only_cell() {
    let dir = tempfile::tempdir().unwrap();
    let out = ablate("grid_invalid.toml", dir.path());
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("decision"), "{}", stderr(&out));
}

#[test]
fn ablate_single_cell_has_no_deltas() {
    let dir = tempfile::tempdir().unwrap();
    let grid = dir.path().join("one.toml");
    std::fs::write(&grid, "steps = [[\"extraction\"]]\n").unwrap();
    let out = ablate(s(&grid), &dir.path().join("out"));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let cmp: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/comparison.json")).unwrap()).unwrap();
    let rows = cmp["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].get("token_reduction").is_none());
}

#[test]
fn validate_dict_reports_problems() {
    let ok = fixtures().join("dictionary.json");
    let out = instrex(&["validate-dict", s(&ok)]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("fixture-2024.1"));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("cycle.json");
    std::fs::write(
        &bad,
        r#"{"version": "x", "entries": [
  {"canonical_name": "A", "aliases": [], "parent": "B"},
  {"canonical_name": "B", "aliases": [], "parent": "A"}
]}"#,
    )
    .unwrap();
    let out = instrex(&["validate-dict", s(&bad)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("cycle"), "{}", stderr(&out));
}

#[test]
fn detect_scores_against_labels() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("spans.json");
    let input = fixtures().join("detection");
    let labels = fixtures().join("detection_labels.json");
    let out = instrex(&["detect", "--input-dir", s(&input), "--labels", s(&labels), "--out", s(&report)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let r: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["labeled"], 30);
    assert!(r["accuracy"].as_f64().unwrap() >= 0.92);
}
