use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use serde_json::json;

fn a2r(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_a2r")).args(args).output().expect("spawn a2r")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    dataset: PathBuf,
    script: PathBuf,
    explorer: PathBuf,
    synth: PathBuf,
}

/// Three queries, four explorer paths per run, two runs. `skip_synth` leaves
/// one synthesizer entry unscripted.
fn fixture(dir: &Path, skip_synth: Option<(&str, u64)>) -> Fixture {
    let golds = [("a", "12"), ("b", "1/2"), ("c", "7")];
    let mut dataset = String::new();
    let mut script = String::new();
    for (id, gold) in golds {
        dataset.push_str(&format!("{}\n", json!({"id": id, "question": format!("Question {id}?"), "answer": gold})));
        for i in 0..8u64 {
            let answer = if i % 4 == 3 { "99" } else { gold };
            let line = json!({
                "query_id": id, "sample_index": i, "stage": "explorer",
                "text": format!("thinking</think> The answer is \\boxed{{{answer}}}"),
                "input_tokens": 30, "output_tokens": 100 + i,
            });
            script.push_str(&format!("{line}\n"));
        }
        for run in 0..2u64 {
            if skip_synth == Some((id, run)) {
                continue;
            }
            let line = json!({
                "query_id": id, "sample_index": run, "stage": "synthesizer",
                "text": format!("checked</think> \\boxed{{{gold}}}"),
                "input_tokens": 900, "output_tokens": 60,
            });
            script.push_str(&format!("{line}\n"));
        }
    }
    let f = Fixture {
        dataset: dir.join("dataset.jsonl"),
        script: dir.join("script.jsonl"),
        explorer: dir.join("explorer.json"),
        synth: dir.join("synth.json"),
    };
    fs::write(&f.dataset, dataset).unwrap();
    fs::write(&f.script, script).unwrap();
    let endpoint = |model: &str| {
        json!({"backend": "mock", "model_name": model, "mock_script": f.script, "backoff_base_ms": 1}).to_string()
    };
    fs::write(&f.explorer, endpoint("small")).unwrap();
    fs::write(&f.synth, endpoint("big")).unwrap();
    f
}

fn run_args<'a>(f: &'a Fixture, out: &'a Path) -> Vec<&'a str> {
    vec![
        "run", "--dataset", p(&f.dataset), "--explorer", p(&f.explorer), "--synthesizer", p(&f.synth),
        "--n-paths", "4", "--runs", "2", "--out-dir", p(out),
    ]
}

#[test]
fn malformed_dataset_exits_with_line_number() {
    let tmp = tempfile::tempdir().unwrap();
    let f = fixture(tmp.path(), None);
    let mut text = fs::read_to_string(&f.dataset).unwrap();
    text.push_str("{\"id\": \"d\", \"question\": \n");
    fs::write(&f.dataset, text).unwrap();
    let out = a2r(&run_args(&f, &tmp.path().join("run")));
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("line 4"), "{}", stderr(&out));
}

#[test]
fn run_report_curate_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let f = fixture(tmp.path(), None);
    let run_dir = tmp.path().join("run");
    let out = a2r(&run_args(&f, &run_dir));
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("6 completed, 0 skipped, 0 failed, 0 pending"), "{}", stdout(&out));

    let again = a2r(&run_args(&f, &run_dir));
    assert!(stdout(&again).contains("0 completed, 6 skipped"), "{}", stdout(&again));

    let prices = tmp.path().join("prices.json");
    fs::write(
        &prices,
        r#"{"small": {"input_per_mtok": 0.1, "output_per_mtok": 0.4}, "big": {"input_per_mtok": 1.0, "output_per_mtok": 5.0}}"#,
    )
    .unwrap();
    let json_path = tmp.path().join("report.json");
    let report = a2r(&["report", p(&run_dir), "--pricing", p(&prices), "--json", p(&json_path)]);
    assert!(report.status.success(), "{}", stderr(&report));
    let text = stdout(&report);
    assert!(text.contains("Pass@1") && text.contains("Cost/1K"), "{text}");
    // three of four paths correct everywhere, synthesizer always right
    assert!(text.contains("75.00"), "{text}");
    assert!(text.contains("100.00"), "{text}");

    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json_path).unwrap()).unwrap();
    assert_eq!(v["metrics"][0]["queries"], 3);
    assert_eq!(v["metrics"][0]["a2r"], 100.0);
    // 6 synthesis calls at 900 in / 60 out against 1.0 / 5.0 per Mtok
    assert_eq!(v["costs"][0]["synthesizer_cost"], "0.007200");

    let again = a2r(&["report", p(&run_dir), "--pricing", p(&prices)]);
    assert_eq!(stdout(&again), text);

    let records = tmp.path().join("records.jsonl");
    let curate = a2r(&[
        "curate", "--rollouts", p(&run_dir), "--n-paths", "4", "--records-per-query", "2", "--seed", "3", "--out",
        p(&records),
    ]);
    assert!(curate.status.success(), "{}", stderr(&curate));
    assert_eq!(fs::read_to_string(&records).unwrap().lines().count(), 6);
    assert!(tmp.path().join("records.jsonl.plan.json").exists());
}

#[test]
fn cost_without_pricing_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let f = fixture(tmp.path(), None);
    let run_dir = tmp.path().join("run");
    assert!(a2r(&run_args(&f, &run_dir)).status.success());
    let out = a2r(&["report", p(&run_dir), "--cost"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("pricing"), "{}", stderr(&out));
}

#[test]
fn empty_run_dir_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = a2r(&["report", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn failed_pairs_exit_nonzero_with_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let f = fixture(tmp.path(), Some(("b", 1)));
    let out = a2r(&run_args(&f, &tmp.path().join("run")));
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("5 completed, 0 skipped, 1 failed"), "{}", stdout(&out));
    assert!(stderr(&out).contains("failed: b run 1"), "{}", stderr(&out));
}

#[test]
fn mock_server_backs_an_http_run() {
    let tmp = tempfile::tempdir().unwrap();
    let f = fixture(tmp.path(), None);
    let mut server = Command::new(env!("CARGO_BIN_EXE_a2r"))
        .args(["mock-serve", "--script", p(&f.script)])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(server.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let url = line.trim().strip_prefix("listening on ").expect("listen line").to_string();

    for (path, model) in [(&f.explorer, "small"), (&f.synth, "big")] {
        let cfg = json!({"backend": "http", "base_url": url, "model_name": model, "backoff_base_ms": 1});
        fs::write(path, cfg.to_string()).unwrap();
    }
    let out = a2r(&run_args(&f, &tmp.path().join("run")));
    server.kill().unwrap();
    server.wait().unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("6 completed"), "{}", stdout(&out));
}
