use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const TINY: &str = r#"
seed = 3

[data]
n_train = 24
n_test = 6

[data.vocab]
n_families = 3
tasks_per_family = 2
n_keys = 4
n_values = 4

[train]
k = 2
epochs = 1
batch_size = 4
eval_samples = 4

[train.pretrain]
steps = 2
batch_size = 2
min_len = 4
max_len = 6

[train.model]
vocab_size = 20
d_model = 8
n_layers = 1
n_heads = 2
d_ff = 16
max_positions = 32

[retrieval]
top_c = 2

[session]
window_size = 24
retrieval_slots = 2
max_new_tokens = 3
"#;

fn hmem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hmem"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// The JSON object printed after the `=== json ===` marker.
fn json_block(o: &Output) -> Value {
    let text = stdout(o);
    let (_, tail) = text.split_once("=== json ===\n").expect("json marker");
    serde_json::from_str(tail.trim()).expect("valid json")
}

fn assert_ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        stdout(o),
        String::from_utf8_lossy(&o.stderr)
    );
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    fn run(&self, args: &[&str]) -> Output {
        let config = self.s("tiny.toml");
        let mut all = vec!["--config", config.as_str()];
        all.extend_from_slice(args);
        hmem(&all)
    }

    /// Generates data and trains a checkpoint.
    fn trained(&self) -> &Self {
        assert_ok(&self.run(&["gen-data", "--out", &self.s("data")]));
        assert_ok(&self.run(&[
            "train",
            "--data",
            &self.s("data"),
            "--checkpoint",
            &self.s("model.hmem"),
            "--metrics",
            &self.s("metrics.jsonl"),
        ]));
        self
    }
}

fn write(path: &Path, text: &str) {
    fs::write(path, text).unwrap();
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(hmem(&["--help"]).status.code(), Some(0));
    assert_eq!(hmem(&["--version"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(hmem(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(hmem(&["cost", "--n", "4"]).status.code(), Some(1));
    assert_eq!(
        hmem(&["cost", "--n", "4", "--k", "1", "--d", "8"]).status.code(),
        Some(1)
    );
    let ws = Workspace::new();
    write(&ws.path("bad.toml"), "unknown_key = 1\n");
    let o = hmem(&["--config", &ws.s("bad.toml"), "cost", "--n", "4", "--k", "2", "--d", "8"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn cost_reports_levels_and_forwards() {
    let o = hmem(&["cost", "--n", "4096", "--k", "4", "--d", "64"]);
    assert_ok(&o);
    let v = json_block(&o);
    assert_eq!(v["report"]["levels"], 6);
    assert_eq!(v["report"]["forwards_per_sample"], 14);
    assert!(v["instrumented"].is_null());
}

#[test]
fn gen_data_writes_splits_and_stats() {
    let ws = Workspace::new();
    let o = ws.run(&["gen-data", "--out", &ws.s("data"), "--n-test", "0"]);
    assert_ok(&o);
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));
    let v = json_block(&o);
    assert_eq!(v["stats"]["n_train"], 24);
    assert_eq!(v["vocab_size"], 19);
    let train = fs::read_to_string(ws.path("data/train.jsonl")).unwrap();
    assert_eq!(train.lines().filter(|l| l.contains("\"target\"")).count(), 24);
    assert!(ws.path("data/stats.json").exists());
}

#[test]
fn missing_data_is_a_format_error() {
    let ws = Workspace::new();
    let o = ws.run(&[
        "train",
        "--data",
        &ws.s("nowhere"),
        "--checkpoint",
        &ws.s("m.hmem"),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_eval_and_cost_with_checkpoint() {
    let ws = Workspace::new();
    ws.trained();
    let metrics = fs::read_to_string(ws.path("metrics.jsonl")).unwrap();
    assert!(metrics.lines().count() >= 2);
    assert_eq!(metrics.matches("\"pretrain\"").count(), 2);

    let o = ws.run(&["eval", "--data", &ws.s("data"), "--checkpoint", &ws.s("model.hmem")]);
    assert_ok(&o);
    assert!(stdout(&o).contains("zero-shot"));
    let v = json_block(&o);
    assert_eq!(v["n"], 6);
    assert!(v["full_context_accuracy"].is_number());
    assert!(v["samples"][0].get("trace").is_none());

    let o = ws.run(&[
        "cost", "--n", "16", "--k", "2", "--d", "8", "--checkpoint", &ws.s("model.hmem"),
    ]);
    assert_ok(&o);
    let v = json_block(&o);
    assert_eq!(v["report"]["forwards_per_sample"], 2 * 4 + 2);
    assert_eq!(v["instrumented"]["descent"], 5);
}

#[test]
fn build_db_retrieve_and_session() {
    let ws = Workspace::new();
    ws.trained();
    let model = ws.s("model.hmem");
    write(&ws.path("ctx.txt"), "6 12 16\n7 13 17\n8 14 18 19 9\n");
    let o = ws.run(&[
        "build-db", "--context", &ws.s("ctx.txt"), "--checkpoint", &model, "--db", &ws.s("db.hmdb"),
    ]);
    assert_ok(&o);
    assert_eq!(json_block(&o)["chunks"].as_array().unwrap().len(), 3);

    write(&ws.path("q.txt"), "6 12\n");
    let o = ws.run(&[
        "retrieve", "--query", &ws.s("q.txt"), "--checkpoint", &model, "--db", &ws.s("db.hmdb"),
        "--top-c", "100",
    ]);
    assert_ok(&o);
    let v = json_block(&o);
    assert_eq!(v["dense"], true);
    assert_eq!(v["prefix_rows"], 1);

    write(
        &ws.path("turns.jsonl"),
        "{\"tokens\": [6, 12, 16, 7, 13, 17, 8, 14]}\n{\"tokens\": [18, 19, 9, 10, 11, 15, 16, 17], \"trigger_at\": 1}\n{\"tokens\": [6, 12]}\n",
    );
    for mode in ["off", "on"] {
        let o = ws.run(&[
            "session", "--script", &ws.s("turns.jsonl"), "--checkpoint", &model, "--db",
            &ws.s("db.hmdb"), "--trigger", "token", "--async", mode, "--save-db", &ws.s("grown.hmdb"),
        ]);
        assert_ok(&o);
        let v = json_block(&o);
        assert_eq!(v["summary"]["pending"], false);
        assert!(v["summary"]["chunks"].as_u64().unwrap() >= 3);
        let events = v["transcript"].as_array().unwrap();
        assert!(events.iter().any(|e| e["event"] == "prefix_merged"));
    }
    assert!(ws.path("grown.hmdb").exists());
}

#[test]
fn overlong_chunk_is_rejected() {
    let ws = Workspace::new();
    ws.trained();
    write(&ws.path("ctx.txt"), &"6 ".repeat(40));
    let o = ws.run(&[
        "build-db", "--context", &ws.s("ctx.txt"), "--checkpoint", &ws.s("model.hmem"), "--db",
        &ws.s("db.hmdb"),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let o = ws.run(&[
        "build-db", "--context", &ws.s("ctx.txt"), "--chunk-len", "8", "--checkpoint",
        &ws.s("model.hmem"), "--db", &ws.s("db.hmdb"),
    ]);
    assert_ok(&o);
    assert_eq!(json_block(&o)["chunks"].as_array().unwrap().len(), 5);
}

#[test]
fn foreign_database_is_a_format_error() {
    let a = Workspace::new();
    a.trained();
    write(&a.path("ctx.txt"), "6 12 16\n");
    assert_ok(&a.run(&[
        "build-db", "--context", &a.s("ctx.txt"), "--checkpoint", &a.s("model.hmem"), "--db",
        &a.s("db.hmdb"),
    ]));
    let b = Workspace::new();
    fs::write(b.path("tiny.toml"), TINY.replace("seed = 3", "seed = 4")).unwrap();
    b.trained();
    write(&b.path("q.txt"), "6 12\n");
    let o = b.run(&[
        "retrieve", "--query", &b.s("q.txt"), "--checkpoint", &b.s("model.hmem"), "--db",
        &a.s("db.hmdb"),
    ]);
    assert_eq!(o.status.code(), Some(2));
}
