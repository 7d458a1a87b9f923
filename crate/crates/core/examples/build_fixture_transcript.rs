//! Regenerates `fixtures/transcript.jsonl` by running the fixture corpus
//! through a rule-based stand-in for a language model and recording every
//! exchange. Run after changing templates, the corpus or the run config:
//!
//! ```text
//! cargo run -p instrex --example build_fixture_transcript
//! ```

use std::path::Path;
use std::sync::Arc;

use anyhow::{ensure, Context};
use instrex::chain::{InputMode, Step};
use instrex::gateway::{Backend, BackendCall, BackendError, BackendReply, RecordingBackend};
use instrex::orchestrator::{run_extract, Resources, RunConfig};
use serde_json::{json, Value};

struct Known {
    surface: &'static str,
    used: bool,
    decided: &'static str,
}

const fn used(surface: &'static str, decided: &'static str) -> Known {
    Known { surface, used: true, decided }
}

const fn cited(surface: &'static str) -> Known {
    Known { surface, used: false, decided: surface }
}

const KNOWN: &[(&str, &[Known])] = &[
    (
        "class-observation-2019",
        &[
            used("Classroom Assessment Scoring System (CLASS)", "CLASS (Classroom Assessment Scoring System)"),
            used("CLASS", "CLASS (Classroom Assessment Scoring System)"),
        ],
    ),
    (
        "teacher-efficacy-2021",
        &[
            cited("district survey"),
            used("Teacher Sense of Efficacy Scale (TSES)", "Teacher Sense of Efficacy Scale (TSES)"),
            used("Teacher Reflection Interview Protocol", "Teacher Reflection Interview Protocol"),
        ],
    ),
    (
        "early-reading-2018",
        &[
            used("Woodcock-Johnson III", "Woodcock-Johnson III"),
            used("WJ-III Letter-Word Identification", "WJ-III Letter-Word Identification"),
            used("WJ-III Passage Comprehension", "WJ-III Passage Comprehension"),
            used("Peabody Picture Vocabulary Test (PPVT-4)", "Peabody Picture Vocabulary Test (PPVT-4)"),
        ],
    ),
    (
        "math-anxiety-2020",
        &[
            cited("Math Attitudes Survey"),
            used("Mathematics Anxiety Rating Scale (MARS)", "Mathematics Anxiety Rating Scale (MARS)"),
            used("MARS", "Mathematics Anxiety Rating Scale (MARS)"),
            used("Student Engagement Walkthrough Checklist", "Student Engagement Walkthrough Checklist"),
        ],
    ),
    (
        "peer-tutoring-2017",
        &[
            cited("Dynamic Indicators of Basic Early Literacy Skills (DIBELS)"),
            used("Peer Tutoring Fidelity Checklist", "Peer Tutoring Fidelity Checklist"),
            used("Strengths and Difficulties Questionnaire (SDQ)", "Strengths and Difficulties Questionnaire (SDQ)"),
            used("SDQ", "Strengths and Difficulties Questionnaire (SDQ)"),
        ],
    ),
    (
        "school-climate-2016",
        &[
            used("Delaware School Climate Survey (DSCS)", "Delaware School Climate Survey (DSCS)"),
            used("DSCS", "Delaware School Climate Survey (DSCS)"),
        ],
    ),
];

struct Relation {
    anchor: &'static str,
    kind: &'static str,
    respondents: &'static [&'static str],
    constructs: &'static [&'static str],
    outcomes: &'static [&'static str],
    evidence: &'static [(&'static str, &'static str)],
}

const RELATIONS: &[Relation] = &[
    Relation {
        anchor: "CLASS (Classroom Assessment Scoring System)",
        kind: "Observation Protocol",
        respondents: &["Students", "Teachers"],
        constructs: &["Classroom Organization", "Preventive Discipline", "Time Management"],
        outcomes: &["Teacher Interaction"],
        evidence: &[
            ("respondents", "Teachers and students were observed during whole-group and small-group instruction."),
            ("outcomes", "teacher interaction"),
        ],
    },
    Relation {
        anchor: "Teacher Sense of Efficacy Scale (TSES)",
        kind: "Survey",
        respondents: &["Teachers"],
        constructs: &["Instructional strategies", "Classroom management", "Student engagement"],
        outcomes: &["Teacher self-efficacy"],
        evidence: &[("respondents", "teachers completed the Teacher Sense of Efficacy Scale (TSES)")],
    },
    Relation {
        anchor: "Teacher Reflection Interview Protocol",
        kind: "Semi-structured interview",
        respondents: &["Teachers"],
        constructs: &["Coaching experience"],
        outcomes: &["Interview themes"],
        evidence: &[("respondents", "semi-structured interviews with 12 teachers")],
    },
    Relation {
        anchor: "Woodcock-Johnson III",
        kind: "Test",
        respondents: &["Children"],
        constructs: &["Reading achievement"],
        outcomes: &["Letter-word identification", "Passage comprehension"],
        evidence: &[("constructs", "Reading achievement was assessed with the Woodcock-Johnson III battery.")],
    },
    Relation {
        anchor: "WJ-III Letter-Word Identification",
        kind: "Subtest",
        respondents: &["Children"],
        constructs: &["Decoding"],
        outcomes: &["Letter-word identification"],
        evidence: &[],
    },
    Relation {
        anchor: "WJ-III Passage Comprehension",
        kind: "test_assessment",
        respondents: &["Children"],
        constructs: &["Reading comprehension"],
        outcomes: &["Passage comprehension"],
        evidence: &[],
    },
    Relation {
        anchor: "Peabody Picture Vocabulary Test, Fourth Edition (PPVT-4)",
        kind: "Standardized test",
        respondents: &["Children"],
        constructs: &["Receptive vocabulary"],
        outcomes: &["Vocabulary scores"],
        evidence: &[(
            "constructs",
            "Receptive vocabulary was measured with the Peabody Picture Vocabulary Test (PPVT-4).",
        )],
    },
    Relation {
        anchor: "Mathematics Anxiety Rating Scale (MARS)",
        kind: "questionnaire",
        respondents: &["Undergraduate students"],
        constructs: &["Math anxiety"],
        outcomes: &["Anxiety scores"],
        evidence: &[
            ("respondents", "Undergraduate students enrolled in college algebra"),
            ("constructs", "The MARS was validated in 1972."),
        ],
    },
    Relation {
        anchor: "Student Engagement Walkthrough Checklist",
        kind: "telemetry logger",
        respondents: &["Instructors"],
        constructs: &["Student engagement"],
        outcomes: &[],
        evidence: &[],
    },
    Relation {
        anchor: "Peer Tutoring Fidelity Checklist",
        kind: "Checklist",
        respondents: &["Program staff"],
        constructs: &["Implementation fidelity"],
        outcomes: &["Structure", "Pacing", "Feedback"],
        evidence: &[("respondents", "completed by program staff")],
    },
    Relation {
        anchor: "Strengths and Difficulties Questionnaire (SDQ)",
        kind: "Survey/Questionnaire",
        respondents: &["Parents"],
        constructs: &["Conduct problems", "Prosocial behavior"],
        outcomes: &["Conduct problems"],
        evidence: &[("respondents", "Parents completed the Strengths and Difficulties Questionnaire (SDQ)")],
    },
    Relation {
        anchor: "Delaware School Climate Survey (DSCS)",
        kind: "Survey",
        respondents: &["Students", "Teachers"],
        constructs: &["Teacher-student relations", "Student-student relations", "School safety"],
        outcomes: &["Attendance"],
        evidence: &[("constructs", "The DSCS covers teacher-student relations")],
    },
];

/// Rule-based replies keyed on the request id and the prompt text.
struct Scripted;

fn known(doc: &str) -> &'static [Known] {
    KNOWN.iter().find(|(d, _)| *d == doc).map(|(_, k)| *k).unwrap_or(&[])
}

fn between<'a>(text: &'a str, open: &str, close: &str) -> &'a str {
    let start = text.find(open).map_or(0, |i| i + open.len());
    let end = text[start..].find(close).map_or(text.len(), |i| start + i);
    &text[start..end]
}

/// Known instruments named in `text`, longest surface forms first so that an
/// acronym inside a full name is not counted twice.
fn found_in(doc: &str, text: &str) -> Vec<&'static Known> {
    let mut ks: Vec<&Known> = known(doc).iter().collect();
    ks.sort_by_key(|k| std::cmp::Reverse(k.surface.len()));
    let mut rest = text.to_string();
    let mut hits = Vec::new();
    for k in ks {
        if rest.contains(k.surface) {
            rest = rest.replace(k.surface, &" ".repeat(k.surface.len()));
            hits.push(k);
        }
    }
    hits.sort_by_key(|k| text.find(k.surface));
    hits
}

fn sentence_around(text: &str, needle: &str) -> String {
    let at = text.find(needle).unwrap_or(0);
    let start = text[..at].rfind(". ").map_or(0, |i| i + 2);
    let end = text[at..].find('.').map_or(text.len(), |i| at + i + 1);
    text[start..end].trim().to_string()
}

fn extraction(doc: &str, chunk: &str) -> String {
    let items: Vec<Value> = found_in(doc, chunk)
        .into_iter()
        .map(|k| json!({"name": k.surface, "evidence": sentence_around(chunk, k.surface)}))
        .collect();
    json!({ "instruments": items }).to_string()
}

fn summary(doc: &str, chunk: &str) -> String {
    let names: Vec<&str> = found_in(doc, chunk).into_iter().filter(|k| k.used).map(|k| k.surface).collect();
    if names.is_empty() {
        "This excerpt does not describe data collection.".into()
    } else {
        format!("This excerpt describes data collection with {}.", names.join(" and "))
    }
}

fn decision(doc: &str, prompt: &str) -> String {
    let mut names: Vec<&str> = Vec::new();
    for k in found_in(doc, prompt).into_iter().filter(|k| k.used) {
        if !names.contains(&k.decided) {
            names.push(k.decided);
        }
    }
    let items: Vec<Value> = names.into_iter().map(|n| json!({"name": n})).collect();
    json!({ "instruments": items }).to_string()
}

fn relation(prompt: &str) -> String {
    let anchor = between(prompt, "Instrument: ", "\n").trim();
    let Some(r) = RELATIONS.iter().find(|r| r.anchor == anchor) else {
        return json!({"type": "other", "respondents": [], "constructs": [], "outcomes": []}).to_string();
    };
    let mut evidence = serde_json::Map::new();
    for (field, quote) in r.evidence {
        evidence
            .entry(field.to_string())
            .or_insert_with(|| json!([]))
            .as_array_mut()
            .expect("array")
            .push(json!(quote));
    }
    json!({
        "type": r.kind,
        "respondents": r.respondents,
        "constructs": r.constructs,
        "outcomes": r.outcomes,
        "evidence": evidence,
    })
    .to_string()
}

impl Backend for Scripted {
    fn name(&self) -> &str {
        "scripted"
    }

    fn send(&self, call: &BackendCall<'_>) -> Result<BackendReply, BackendError> {
        let req = call.request;
        let id = req.request_id.as_str();
        let mut parts = id.split('/');
        let doc = parts.next().unwrap_or_default();
        let step = parts.next().unwrap_or_default();
        let prompt = req.user_text.as_str();

        let text = match (id, step, call.attempt) {
            // first reply cut off mid-object; the repair prompt gets a valid one
            ("math-anxiety-2020/extraction/0", _, 1) => {
                "Here are the instruments: {\"instruments\": [{\"name\": \"Math".into()
            }
            // the consolidation step never produces JSON for this document
            ("peer-tutoring-2017/decision", _, _) => {
                "Final answer: the study used the fidelity checklist and the SDQ.".into()
            }
            // well-formed JSON of the wrong shape, then a valid reply
            (_, "relation", 1) if doc == "school-climate-2016" => json!({"type": 3}).to_string(),
            (_, "extraction", _) => extraction(doc, between(prompt, "\"\"\"\n", "\n\"\"\"")),
            (_, "summarization", _) => summary(doc, between(prompt, "\"\"\"\n", "\n\"\"\"")),
            (_, "decision", _) => decision(doc, prompt),
            (_, "relation", _) => relation(prompt),
            _ => return Err(BackendError::Rejected { status: 400, body: format!("unscripted request {id}") }),
        };
        Ok(BackendReply { text, input_tokens: None, output_tokens: None, latency_ms: None })
    }
}

fn main() -> anyhow::Result<()> {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let base = RunConfig::load(&fixtures.join("run.toml"))?;
    let recorder = Arc::new(RecordingBackend::new(Arc::new(Scripted)));
    let res = Resources {
        dictionary: instrex::normalizer::InstrumentDictionary::load(&base.dictionary)?,
        backend: recorder.clone(),
        recorder: None,
    };
    let scratch = tempfile::tempdir()?;

    let full = [Step::Extraction, Step::Summarization, Step::Decision];
    let variants: [(&[Step], InputMode, bool); 5] = [
        (&full, InputMode::MethodExcerpt, false),
        (&full, InputMode::MethodExcerpt, true),
        (&full, InputMode::FullText, false),
        (&[Step::Extraction], InputMode::MethodExcerpt, false),
        (&[Step::Extraction], InputMode::FullText, false),
    ];
    for (i, (steps, mode, collapse)) in variants.into_iter().enumerate() {
        let mut cfg = base.clone();
        cfg.chain.steps = steps.to_vec();
        cfg.chain.input_mode = mode;
        cfg.normalizer.collapse_subtests = collapse;
        cfg.output_dir = scratch.path().join(i.to_string());
        let manifest = run_extract(&cfg, &res).with_context(|| format!("variant {}", cfg.chain.label()))?;
        ensure!(manifest.failed == 0, "variant {} had failures: {:?}", cfg.chain.label(), manifest.failure());
    }

    let out = fixtures.join("transcript.jsonl");
    recorder.write_transcript(&out)?;
    println!("wrote {} records to {}", recorder.records().len(), out.display());
    Ok(())
}
