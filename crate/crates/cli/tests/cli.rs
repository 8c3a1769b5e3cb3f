use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output};

fn mofg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mofg"))
        .args(args)
        .env("MOF_LOG", "error")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = mofg(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails_with(args: &[&str], code: i32) -> String {
    let out = mofg(args);
    assert_eq!(out.status.code(), Some(code), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(!err.trim().is_empty());
    err
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn line_count(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count()
}

fn small_data(dir: &Path, seed: &str) {
    ok(&["gen-data", "--out", p(dir), "--seed", seed, "--n", "48", "--n-test", "8"]);
}

#[test]
fn gen_data_defaults_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let full = dir.path().join("full");
    ok(&["gen-data", "--out", p(&full)]);
    assert_eq!(line_count(&full.join("train.jsonl")), 2000);
    assert_eq!(line_count(&full.join("test.jsonl")), 400);
    assert!(full.join("config.json").exists());

    let a = dir.path().join("a");
    let b = dir.path().join("b");
    small_data(&a, "7");
    small_data(&b, "7");
    for f in ["captions.jsonl", "train.jsonl", "test.jsonl", "sample_image.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let c = dir.path().join("c");
    small_data(&c, "8");
    assert_ne!(std::fs::read(a.join("train.jsonl")).unwrap(), std::fs::read(c.join("train.jsonl")).unwrap());
}

#[test]
fn usage_errors_exit_nonzero_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let err = fails_with(&["gen-data", "--out", p(dir.path()), "--n", "0"], 2);
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    fails_with(&["train", "--fusion", "sum"], 2);
    fails_with(&["frobnicate"], 2);

    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"seeed": 3}"#).unwrap();
    let err = fails_with(&["gen-data", "--config", p(&cfg), "--out", p(dir.path())], 1);
    assert_eq!(err.trim().lines().count(), 1, "{err}");
}

#[test]
fn train_eval_infer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    small_data(&run, "3");
    let out = ok(&["train", "--out", p(&run), "--stage", "both", "--quick", "--seed", "3"]);
    assert!(out.contains("align") && out.contains("ground"));
    let align = run.join("align.ckpt");
    let ground = run.join("ground.ckpt");
    assert!(align.exists() && ground.exists());

    // Same seed, same data: identical checkpoints.
    let again = dir.path().join("again");
    ok(&[
        "train", "--out", p(&again), "--data", p(&run), "--stage", "both", "--quick", "--seed", "3",
    ]);
    assert_eq!(std::fs::read(&ground).unwrap(), std::fs::read(again.join("ground.ckpt")).unwrap());

    // Ground stage resumed from the align checkpoint.
    let resumed = dir.path().join("resumed");
    ok(&[
        "train", "--out", p(&resumed), "--data", p(&run), "--stage", "ground", "--quick", "--seed", "3",
        "--checkpoint", p(&align),
    ]);
    assert!(resumed.join("ground.ckpt").exists());

    let summary = ok(&["eval", "--out", p(&run), "--checkpoint", p(&ground), "--max-new", "12"]);
    let json: serde_json::Value = serde_json::from_str(summary.trim()).unwrap();
    for key in ["accuracy", "bleu3", "bleu4", "rouge_l", "cider"] {
        assert!(json[key].is_number(), "{key} missing from {summary}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["records"].as_array().unwrap().len(), 8);

    fails_with(&["eval", "--out", p(&run), "--checkpoint", p(&ground), "--fusion", "cmof"], 1);

    let image = run.join("sample_image.json");
    let args = ["infer", "--checkpoint", p(&ground), "--image", p(&image), "--max-new", "8"];
    let first = ok(&args);
    assert_eq!(first, ok(&args));
    assert!(!first.trim().is_empty());
    let empty = ok(&["infer", "--checkpoint", p(&ground), "--image", p(&image), "--max-new", "0"]);
    assert_eq!(empty.trim(), "");
    let missing = run.join("missing.json");
    fails_with(&["infer", "--checkpoint", p(&ground), "--image", p(&missing)], 1);
}

#[test]
fn train_reports_missing_data_and_supports_global_only() {
    let dir = tempfile::tempdir().unwrap();
    let nothing = dir.path().join("nothing");
    let err = fails_with(&["train", "--out", p(&nothing), "--quick"], 1);
    assert!(err.contains("jsonl"), "{err}");

    let run = dir.path().join("run");
    small_data(&run, "5");
    ok(&["train", "--out", p(&run), "--stage", "ground", "--fusion", "global_only", "--quick"]);
    let config: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(config["fusion"], "global_only");
}

#[test]
fn eval_rejects_an_empty_test_set() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    small_data(&run, "2");
    ok(&["train", "--out", p(&run), "--stage", "ground", "--quick"]);
    std::fs::write(run.join("test.jsonl"), "").unwrap();
    let ckpt = run.join("ground.ckpt");
    fails_with(&["eval", "--out", p(&run), "--checkpoint", p(&ckpt)], 2);
}

/// Minimal HTTP judge answering "yes" to every request.
fn spawn_judge() -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap_or(0);
                }
                if line == "\r\n" {
                    break;
                }
            }
            let mut body = vec![0; len];
            let _ = reader.read_exact(&mut body);
            let reply = r#"{"verdict":"yes"}"#;
            let _ = write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            );
        }
    });
    format!("http://{addr}/judge")
}

#[test]
fn eval_can_use_a_remote_judge() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    small_data(&run, "4");
    ok(&["train", "--out", p(&run), "--stage", "ground", "--quick"]);
    let ckpt = run.join("ground.ckpt");
    let url = spawn_judge();
    let summary = ok(&[
        "eval", "--out", p(&run), "--checkpoint", p(&ckpt), "--judge", "remote", "--endpoint", &url,
        "--max-new", "6",
    ]);
    let json: serde_json::Value = serde_json::from_str(summary.trim()).unwrap();
    assert_eq!(json["accuracy"], 1.0);

    fails_with(&["eval", "--out", p(&run), "--checkpoint", p(&ckpt), "--judge", "remote"], 1);
}

#[test]
fn ablate_prints_both_grids() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    small_data(&data, "1");
    let run = dir.path().join("ablate");
    let table = ok(&["ablate", "--out", p(&run), "--data", p(&data), "--quick"]);
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.iter().filter(|r| r.starts_with("fusion")).count(), 4, "{table}");
    assert_eq!(rows.iter().filter(|r| r.starts_with("adapter")).count(), 4, "{table}");
    for name in ["global_only", "local_only", "cmof", "simof", "no_prealign", "no_refine", "joint_only", "full"] {
        assert!(table.contains(name), "{name} missing");
    }
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(json.as_array().unwrap().len(), 8);
}
