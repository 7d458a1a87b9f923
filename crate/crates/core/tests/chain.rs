use std::path::{Path, PathBuf};

use instrex::orchestrator::{run_extract, DocState, Manifest, Overrides, Resources, RunConfig, RunError};
use instrex::relation::{type_alias_map, InstrumentType};
use serde_json::Value;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn run(out: &Path, transcript: Option<PathBuf>) -> Result<Manifest, RunError> {
    let mut cfg = RunConfig::load(&fixtures().join("run.toml"))?;
    cfg.apply(&Overrides { output_dir: Some(out.to_path_buf()), transcript, ..Default::default() });
    cfg.validate()?;
    let res = Resources::load(&cfg)?;
    run_extract(&cfg, &res)
}

fn trace(out: &Path, doc: &str) -> Vec<Value> {
    std::fs::read_to_string(out.join(format!("traces/{doc}.trace.jsonl")))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn events<'a>(t: &'a [Value], kind: &str) -> Vec<&'a Value> {
    t.iter().filter(|e| e["event"] == kind).collect()
}

fn request<'a>(t: &'a [Value], id: &str) -> &'a Value {
    t.iter()
        .find_map(|e| {
            let r = if e["event"] == "request" { e } else { &e["request"] };
            (r["request_id"] == id).then_some(r)
        })
        .unwrap_or_else(|| panic!("no request {id}"))
}

#[test]
fn degradation_paths_from_the_fixture_transcript() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = run(dir.path(), None).unwrap();
    assert!(manifest.documents.iter().all(|d| d.status == DocState::Ok));

    // malformed first reply is repaired on the second attempt
    let math = trace(dir.path(), "math-anxiety-2020");
    let r = request(&math, "math-anxiety-2020/extraction/0");
    assert_eq!((r["status"].as_str(), r["attempts"].as_u64()), (Some("ok"), Some(2)));

    // a decision step that never validates falls back to the union of mentions
    let peer = trace(dir.path(), "peer-tutoring-2017");
    let r = request(&peer, "peer-tutoring-2017/decision");
    assert_eq!(r["status"], "schema_violation");
    assert_eq!(r["attempts"], 3);
    let fin = events(&peer, "final")[0];
    assert_eq!(fin["decision_degraded"], true);
    let union: Vec<&str> = events(&peer, "mentions")
        .iter()
        .flat_map(|e| e["mentions"].as_array().unwrap())
        .map(|m| m["surface_name"].as_str().unwrap())
        .collect();
    for m in fin["mentions"].as_array().unwrap() {
        assert!(union.contains(&m["surface_name"].as_str().unwrap()));
    }
    let status = manifest.documents.iter().find(|d| d.doc_id == "peer-tutoring-2017").unwrap();
    assert!(status.decision_degraded);

    // a wrong-shape relation reply is repaired
    let climate = trace(dir.path(), "school-climate-2016");
    let rel = events(&climate, "relation")[0];
    assert_eq!(rel["request"]["attempts"], 2);
    assert_eq!(rel["degraded"], false);
    assert_eq!(events(&climate, "detect")[0]["span"]["detection_mode"], "fallback_full_text");

    // an unknown type label is coerced and a fabricated quote is dropped
    let coerced: Vec<&Value> =
        events(&math, "relation").into_iter().filter(|e| e["coerced_type"].is_string()).collect();
    assert_eq!(coerced.len(), 1);
    assert_eq!(coerced[0]["coerced_type"], "telemetry logger");
    let dropped: u64 = events(&math, "relation").iter().map(|e| e["dropped_evidence"].as_u64().unwrap()).sum();
    assert_eq!(dropped, 1);
    let record: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("records/math-anxiety-2020.json")).unwrap())
            .unwrap();
    let checklist = record["instruments"]
        .as_array()
        .unwrap()
        .iter()
        .find(|i| i["name"] == "Student Engagement Walkthrough Checklist")
        .unwrap();
    assert_eq!(checklist["type"], "other_tool");
}

#[test]
fn record_fields_match_the_class_example() {
    let dir = tempfile::tempdir().unwrap();
    run(dir.path(), None).unwrap();
    let record: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("records/class-observation-2019.json")).unwrap())
            .unwrap();
    let inst = &record["instruments"][0];
    assert_eq!(inst["name"], "CLASS (Classroom Assessment Scoring System)");
    assert_eq!(inst["type"], "observation_protocol");
    assert_eq!(inst["respondents"], serde_json::json!(["Students", "Teachers"]));
    assert_eq!(
        inst["constructs"],
        serde_json::json!(["Classroom Organization", "Preventive Discipline", "Time Management"])
    );
    assert_eq!(inst["outcomes"], serde_json::json!(["Teacher Interaction"]));
}

#[test]
fn transcript_miss_fails_only_that_document() {
    let dir = tempfile::tempdir().unwrap();
    let full = std::fs::read_to_string(fixtures().join("transcript.jsonl")).unwrap();
    let kept: String = full
        .lines()
        .filter(|l| !l.contains("\"request_id\":\"teacher-efficacy-2021/decision\""))
        .map(|l| format!("{l}\n"))
        .collect();
    let path = dir.path().join("t.jsonl");
    std::fs::write(&path, kept).unwrap();
    let manifest = run(&dir.path().join("out"), Some(path)).unwrap();
    let failed: Vec<&str> =
        manifest.documents.iter().filter(|d| d.status == DocState::Failed).map(|d| d.doc_id.as_str()).collect();
    assert_eq!(failed, vec!["teacher-efficacy-2021"]);
    let err = manifest.failure().unwrap();
    assert_eq!(err.exit_code(), 4);
    assert!(err.to_string().contains("teacher-efficacy-2021/decision"), "{err}");
}

#[test]
fn type_labels_map_onto_the_closed_set() {
    let cases = [
        ("survey_questionnaire", Some(InstrumentType::SurveyQuestionnaire)),
        ("Survey", Some(InstrumentType::SurveyQuestionnaire)),
        ("Observation Protocol", Some(InstrumentType::ObservationProtocol)),
        ("semi-structured interview guide", Some(InstrumentType::InterviewProtocol)),
        ("standardized test", Some(InstrumentType::TestAssessment)),
        ("telemetry logger", None),
        ("", None),
    ];
    for (raw, expected) in cases {
        assert_eq!(type_alias_map(raw), expected, "{raw}");
    }
}
