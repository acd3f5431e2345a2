use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use svagent::model_client::{AgentTag, MockFixtures};
use svagent::orchestrator::{run_id_for, RunTrace};
use svagent::synthetic::{replies, two_clusters};

const QUESTION: &str = "Which color dominates?";
const OPTIONS: &str = "A=red|B=blue|C=green";

fn svagent(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_svagent"))
        .args(args)
        .env_remove("SVAGENT_CHAT_URL")
        .env_remove("SVAGENT_EMBED_URL")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

struct World {
    dir: tempfile::TempDir,
}

impl World {
    /// A two-cluster manifest plus fixtures answering "B" in one iteration.
    fn new() -> Self {
        Self::with_questions(&[QUESTION])
    }

    fn with_questions(questions: &[&str]) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let w = two_clusters(10);
        fs::create_dir(dir.path().join("videos")).unwrap();
        fs::write(dir.path().join("videos/two.json"), w.store.to_manifest_json()).unwrap();
        let mut fx = MockFixtures::new();
        for q in questions {
            fx = fx.pin_embedding(*q, w.anchor_a.clone());
        }
        let fx = fx
            .pin_embedding("red objects", w.anchor_a.clone())
            .chat(AgentTag::Storyline, replies::storyline("red, then blue"))
            .chat(AgentTag::Hypothesis, replies::hypothesis("A", "red objects"))
            .chat(AgentTag::TextDecision, replies::decision("B", "captions", &[(0, 0.9)]))
            .chat(AgentTag::VisionDecision, replies::decision("B", "pixels", &[(1, 0.4)]))
            .chat(AgentTag::Meta, replies::meta("B", "both agree"));
        fs::write(dir.path().join("fixtures.jsonl"), fx.to_jsonl()).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> String {
        self.dir.path().join(rel).to_string_lossy().into_owned()
    }
}

fn answer(w: &World, extra: &[&str]) -> Output {
    answer_with(w, OPTIONS, extra)
}

fn answer_with(w: &World, options: &str, extra: &[&str]) -> Output {
    let manifest = w.path("videos/two.json");
    let fixtures = w.path("fixtures.jsonl");
    let mut args = vec!["answer", "--manifest", &manifest, "--question", QUESTION, "--options", options];
    args.extend_from_slice(&["--fixtures", &fixtures]);
    args.extend_from_slice(extra);
    svagent(&args)
}

#[test]
fn answer_prints_the_final_option_and_writes_a_trace() {
    let w = World::new();
    let trace = w.path("trace.jsonl");
    let out = answer(&w, &["--trace-out", &trace]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout(&out), "B\n");
    let t = RunTrace::from_json(fs::read_to_string(&trace).unwrap().trim_end()).unwrap();
    assert_eq!(t.run_id, run_id_for("two-clusters", QUESTION));
    assert_eq!(t.final_option, "B");

    let shown = svagent(&["trace", "show", "--trace", &trace]);
    assert_eq!(shown.status.code(), Some(0));
    let text = stdout(&shown);
    assert!(text.contains("final     B via meta"), "{text}");
    assert!(text.contains("pass"));
}

#[test]
fn answer_accepts_json_options() {
    let w = World::new();
    let out = answer_with(&w, r#"["red", "blue", "green"]"#, &[]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(stdout(&out), "B\n");
}

#[test]
fn usage_errors_exit_two() {
    let w = World::new();
    let manifest = w.path("videos/two.json");
    let no_fixtures = svagent(&["answer", "--manifest", &manifest, "--question", QUESTION, "--options", OPTIONS]);
    assert_eq!(no_fixtures.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&no_fixtures.stderr).contains("--fixtures"));

    let missing = w.path("nope.json");
    let fixtures = w.path("fixtures.jsonl");
    let unreadable =
        svagent(&["answer", "--manifest", &missing, "--question", "q", "--options", OPTIONS, "--fixtures", &fixtures]);
    assert_eq!(unreadable.status.code(), Some(2));

    assert_eq!(answer(&w, &["--tau", "0"]).status.code(), Some(2));
    assert_eq!(answer(&w, &["--ablations", "no_text_verify,no_vision_verify"]).status.code(), Some(2));
    assert_eq!(answer(&w, &["--ablations", "no_such_flag"]).status.code(), Some(2));
    assert_eq!(answer_with(&w, "A=only", &[]).status.code(), Some(2));
    assert_eq!(svagent(&["answer", "--backend", "http", "--manifest", &manifest, "--question", "q", "--options", OPTIONS]).status.code(), Some(2));
    assert_eq!(svagent(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn orchestration_errors_exit_one() {
    let w = World::new();
    let fx = MockFixtures::new().chat(AgentTag::Storyline, "not json");
    fs::write(w.dir.path().join("fixtures.jsonl"), fx.to_jsonl()).unwrap();
    let out = answer(&w, &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).is_empty());
}

#[test]
fn config_file_is_overridden_by_flags() {
    let w = World::new();
    let config = w.path("config.json");
    fs::write(&config, r#"{"tau": 0.9, "max_iters": 1}"#).unwrap();
    let trace = w.path("t.jsonl");
    // tau 0.9 would fail the gate; the flag restores a passable threshold
    let out = answer(&w, &["--config", &config, "--tau", "0.2", "--trace-out", &trace]);
    assert_eq!(out.status.code(), Some(0));
    let t = RunTrace::from_json(fs::read_to_string(&trace).unwrap().trim_end()).unwrap();
    assert_eq!(t.config.tau, 0.2);
    assert_eq!(t.config.max_iters, 1);

    fs::write(&config, r#"{"tau": 0.3, "bogus": 1}"#).unwrap();
    assert_eq!(answer(&w, &["--config", &config]).status.code(), Some(2));
}

fn tiny_manifest(dir: &Path) -> PathBuf {
    let h = 0.5f64.sqrt();
    let manifest = serde_json::json!({
        "video_id": "tiny",
        "dimension": 3,
        "frames": [
            {"index": 0, "timestamp_s": 0.0, "caption": "x", "embedding": [1.0, 0.0, 0.0]},
            {"index": 1, "timestamp_s": 1.0, "caption": "y", "embedding": [0.0, 1.0, 0.0]},
            {"index": 2, "timestamp_s": 2.0, "caption": "xy", "embedding": [h, h, 0.0]},
        ]
    });
    let path = dir.join("tiny.json");
    fs::write(&path, manifest.to_string()).unwrap();
    let fx = MockFixtures::new().pin_embedding("anchor", vec![0.0, 0.0, 1.0]);
    fs::write(dir.join("tiny.jsonl"), fx.to_jsonl()).unwrap();
    path
}

#[test]
fn dpp_select_matches_the_brute_force_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_manifest(dir.path());
    let fixtures = dir.path().join("tiny.jsonl");
    let m = manifest.to_str().unwrap();
    let f = fixtures.to_str().unwrap();
    let out = svagent(&["dpp-select", "--manifest", m, "--anchor-text", "anchor", "--k", "2", "--fixtures", f]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("{0, 1}"));
    // relevance 0.5 everywhere: first gain 0.25, second 0.25 * 0.75
    assert_eq!(lines.next(), Some("step 1: frame 0 gain 0.250000 log-gain -1.386294"));
    assert_eq!(lines.next(), Some("step 2: frame 1 gain 0.187500 log-gain -1.673976"));

    let all = svagent(&["dpp-select", "--manifest", m, "--anchor-text", "anchor", "--k", "9", "--fixtures", f]);
    assert_eq!(stdout(&all).lines().next(), Some("{0, 1, 2}"));
    let zero = svagent(&["dpp-select", "--manifest", m, "--anchor-text", "anchor", "--k", "0", "--fixtures", f]);
    assert_eq!(zero.status.code(), Some(2));
}

fn questions(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{QUESTION} #{i}")).collect()
}

fn qa_file(w: &World, answers: &[(&str, &str)]) -> String {
    let qs = questions(answers.len());
    let lines: Vec<String> = answers
        .iter()
        .zip(&qs)
        .map(|((cat, ans), q)| {
            serde_json::json!({
                "video_id": "two-clusters",
                "question": q,
                "options": [{"id": "A", "text": "red"}, {"id": "B", "text": "blue"}, {"id": "C", "text": "green"}],
                "answer": ans,
                "category": cat,
            })
            .to_string()
        })
        .collect();
    let path = w.path("qa.jsonl");
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    path
}

#[test]
fn bench_reports_accuracy() {
    let qs = questions(3);
    let w = World::with_questions(&qs.iter().map(String::as_str).collect::<Vec<_>>());
    let qa = qa_file(&w, &[("short", "B"), ("short", "B"), ("long", "A")]);
    let report = w.path("report.json");
    let dir = w.path("videos");
    let fixtures = w.path("fixtures.jsonl");
    let out = svagent(&["bench", "--qa", &qa, "--manifest-dir", &dir, "--fixtures", &fixtures, "--parallel", "2", "--report-out", &report]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("2/3"), "{text}");
    assert!(text.contains("short"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["overall"], serde_json::json!({"correct": 2, "total": 3}));
}

#[test]
fn bench_runs_the_standard_grid() {
    let qs = questions(1);
    let w = World::with_questions(&qs.iter().map(String::as_str).collect::<Vec<_>>());
    let qa = qa_file(&w, &[("short", "B")]);
    let report = w.path("grid.json");
    let dir = w.path("videos");
    let fixtures = w.path("fixtures.jsonl");
    let out = svagent(&["bench", "--qa", &qa, "--manifest-dir", &dir, "--fixtures", &fixtures, "--ablate", "standard", "--report-out", &report]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout(&out).lines().count(), 8);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 7);

    let missing = w.path("absent.jsonl");
    assert_eq!(svagent(&["bench", "--qa", &missing, "--manifest-dir", &dir, "--fixtures", &fixtures]).status.code(), Some(2));
}

#[test]
fn corrupt_traces_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    fs::write(&path, "{\"run_id\": 1").unwrap();
    let out = svagent(&["trace", "show", "--trace", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let missing = dir.path().join("missing.jsonl");
    assert_eq!(svagent(&["trace", "show", "--trace", missing.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn validate_reports_each_file() {
    let w = World::new();
    let manifest = w.path("videos/two.json");
    let fixtures = w.path("fixtures.jsonl");
    let ok = svagent(&["validate", "--manifest", &manifest, "--fixtures", &fixtures]);
    assert_eq!(ok.status.code(), Some(0));
    assert!(stdout(&ok).contains("20 frames"));

    let bad = w.path("bad.json");
    fs::write(&bad, r#"{"video_id": "v", "dimension": 2, "frames": []}"#).unwrap();
    let out = svagent(&["validate", "--manifest", &manifest, "--manifest", &bad]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("invalid"));
    assert_eq!(svagent(&["validate"]).status.code(), Some(2));
}

#[test]
fn help_exits_zero_for_every_subcommand() {
    for sub in [&["--help"][..], &["answer", "--help"], &["bench", "--help"], &["dpp-select", "--help"], &["trace", "show", "--help"], &["validate", "--help"]] {
        let out = svagent(sub);
        assert_eq!(out.status.code(), Some(0), "{sub:?}");
        assert!(stdout(&out).contains("Usage"));
    }
}
