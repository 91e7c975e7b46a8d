use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use serde_json::Value;
use stagegrow::trace::{TraceLog, TraceRecord, TraceWriter};

const BIN: &str = env!("CARGO_BIN_EXE_stagegrow");

const TOY: &str = r#"{
  "stem": {"out_channels": 8, "kernel": 3, "stride": 1},
  "stages": [
    {"block": {"kind": "plain_conv", "kernel": 3}, "stride": 1, "base_width": 16, "base_depth": 1},
    {"block": {"kind": "plain_conv", "kernel": 3}, "stride": 2, "base_width": 32, "base_depth": 1}
  ],
  "head": {"channels": 16, "num_classes": 10},
  "base_resolution": 32
}
"#;

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn toy_file(dir: &Path) -> PathBuf {
    let p = dir.join("toy.json");
    std::fs::write(&p, TOY).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn base_macs(template: &Path) -> u64 {
    let o = run(&["macs", "--template", s(template)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_str::<Value>(&stdout(&o)).unwrap()["total_macs"]
        .as_u64()
        .unwrap()
}

fn toy_search(dir: &Path, template: &Path, out: &str, extra: &[&str]) -> Output {
    let target = (base_macs(template) * 5 / 2).to_string();
    let out = dir.join(out);
    let mut args = vec![
        "search",
        "--template",
        s(template),
        "--target-macs",
        &target,
        "--iterations",
        "3",
        "--out",
        s(&out),
    ];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn macs_for_the_b0_template() {
    let o = run(&["macs", "--template", "efficientnet-b0"]);
    assert_eq!(code(&o), 0);
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let macs = v["total_macs"].as_f64().unwrap();
    assert!((macs - 0.39e9).abs() / 0.39e9 <= 0.02, "{macs}");
    assert_eq!(v["per_stage_macs"].as_array().unwrap().len(), 7);

    let table = run(&["macs", "--template", "efficientnet-b0", "--format", "table"]);
    assert!(stdout(&table).contains("388184000"));
}

#[test]
fn macs_config_override() {
    let dir = tempfile::tempdir().unwrap();
    let t = toy_file(dir.path());
    let cfg = dir.path().join("c.json");
    std::fs::write(
        &cfg,
        r#"{"resolution": 40, "widths": [20, 32], "depths": [2, 1]}"#,
    )
    .unwrap();
    let o = run(&["macs", "--template", s(&t), "--config", s(&cfg)]);
    assert_eq!(code(&o), 0);
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["config"]["resolution"], 40);
    assert!(v["total_macs"].as_u64().unwrap() > base_macs(&t));

    std::fs::write(&cfg, r#"{"resolution": 40, "widths": [20], "depths": [2]}"#).unwrap();
    assert_eq!(
        code(&run(&["macs", "--template", s(&t), "--config", s(&cfg)])),
        2
    );
}

#[test]
fn malformed_template_reports_line_and_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    std::fs::write(&p, "{\n  \"stem\": {\"out_channels\": 8,,\n}\n").unwrap();
    let o = run(&["macs", "--template", s(&p)]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains(":2"), "{err}");
    assert_eq!(code(&run(&["macs", "--template", "no-such-template"])), 2);
}

#[test]
fn toy_search_writes_three_iterations() {
    let dir = tempfile::tempdir().unwrap();
    let t = toy_file(dir.path());
    let o = toy_search(dir.path(), &t, "run", &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let run_dir = dir.path().join("run");
    let log = TraceLog::read(&run_dir.join("trace.jsonl")).unwrap();
    assert_eq!(log.iterations().count(), 3);
    let manifest: Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["spec"]["iterations"], 3);
    assert!(manifest["started_at"].is_string());
    let final_cfg = run_dir.join("final_config.json");
    let m = run(&["macs", "--template", s(&t), "--config", s(&final_cfg)]);
    let v: Value = serde_json::from_str(&stdout(&m)).unwrap();
    assert_eq!(v["total_macs"], manifest["best"]["macs"]);

    let report = run(&["report", "--trace", s(&run_dir.join("trace.jsonl"))]);
    assert_eq!(code(&report), 0);
    let mut rows = csv::Reader::from_reader(report.stdout.as_slice());
    let targets: Vec<u64> = rows
        .records()
        .map(|r| r.unwrap()[1].parse().unwrap())
        .collect();
    assert_eq!(targets.len(), 3);
    assert!(targets.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn resume_mid_run_reproduces_the_trace() {
    let dir = tempfile::tempdir().unwrap();
    let t = toy_file(dir.path());
    assert_eq!(
        code(&toy_search(
            dir.path(),
            &t,
            "full",
            &["--surrogate-noise", "0.01", "--seed", "3"]
        )),
        0
    );
    let full = std::fs::read(dir.path().join("full/trace.jsonl")).unwrap();

    // Keep the header, the first iteration and half of the next line.
    let lines: Vec<usize> = full
        .iter()
        .enumerate()
        .filter(|(_, b)| **b == b'\n')
        .map(|(i, _)| i + 1)
        .collect();
    let log = TraceLog::read(&dir.path().join("full/trace.jsonl")).unwrap();
    let first_summary = log
        .records
        .iter()
        .position(|r| matches!(r, TraceRecord::Iteration(_)))
        .unwrap();
    let cut = lines[first_summary] + (lines[first_summary + 1] - lines[first_summary]) / 2;
    let part = dir.path().join("part");
    std::fs::create_dir_all(&part).unwrap();
    std::fs::write(part.join("trace.jsonl"), &full[..cut]).unwrap();

    let o = run(&[
        "search",
        "--template",
        s(&t),
        "--resume",
        s(&part.join("trace.jsonl")),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(part.join("trace.jsonl")).unwrap(), full);
    let manifest: Value =
        serde_json::from_str(&std::fs::read_to_string(part.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["resumed_from_iteration"], 1);

    // Search flags conflict with --resume.
    let o = run(&[
        "search",
        "--template",
        s(&t),
        "--resume",
        s(&part.join("trace.jsonl")),
        "--iterations",
        "5",
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn killed_search_resumes_to_the_uninterrupted_trace() {
    let dir = tempfile::tempdir().unwrap();
    let t = toy_file(dir.path());
    let evaluator = format!("exec:{BIN} worker --template {} --delay-ms 15", s(&t));
    let extra = ["--evaluator", evaluator.as_str()];
    assert_eq!(code(&toy_search(dir.path(), &t, "full", &extra)), 0);
    let full = std::fs::read(dir.path().join("full/trace.jsonl")).unwrap();

    let target = (base_macs(&t) * 5 / 2).to_string();
    let out = dir.path().join("killed");
    let mut child = Command::new(BIN)
        .args([
            "search",
            "--template",
            s(&t),
            "--target-macs",
            &target,
            "--iterations",
            "3",
            "--out",
            s(&out),
        ])
        .args(extra)
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let trace = out.join("trace.jsonl");
    let deadline = Instant::now() + Duration::from_secs(60);
    loop {
        let done = std::fs::read_to_string(&trace)
            .map(|t| t.matches("\"record\":\"iteration\"").count())
            .unwrap_or(0);
        if done >= 1 || Instant::now() > deadline {
            break;
        }
        std::thread::sleep(Duration::from_millis(5));
    }
    child.kill().unwrap();
    child.wait().unwrap();
    let partial = std::fs::read(&trace).unwrap();
    assert!(
        partial.len() < full.len(),
        "search finished before it was killed"
    );

    let o = run(&["search", "--template", s(&t), "--resume", s(&trace)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(&trace).unwrap(), full);
}

#[test]
fn worker_mirror_matches_in_process_surrogate() {
    let dir = tempfile::tempdir().unwrap();
    let t = toy_file(dir.path());
    assert_eq!(code(&toy_search(dir.path(), &t, "local", &[])), 0);
    let evaluator = format!("exec:{BIN} worker --template {}", s(&t));
    let o = toy_search(
        dir.path(),
        &t,
        "remote",
        &["--evaluator", &evaluator, "--workers", "3"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let local = TraceLog::read(&dir.path().join("local/trace.jsonl")).unwrap();
    let remote = TraceLog::read(&dir.path().join("remote/trace.jsonl")).unwrap();
    let (a, b): (Vec<_>, Vec<_>) = (
        local.evaluations().collect(),
        remote.evaluations().collect(),
    );
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(
            (x.iteration, x.index, &x.config, x.macs),
            (y.iteration, y.index, &y.config, y.macs)
        );
        assert!((x.accuracy - y.accuracy).abs() <= 1e-9);
    }
    let (a, b): (Vec<_>, Vec<_>) = (local.iterations().collect(), remote.iterations().collect());
    assert_eq!(a.len(), 3);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!((x.selected, &x.config), (y.selected, &y.config));
    }
}

#[test]
fn worker_survives_malformed_lines() {
    let mut child = Command::new(BIN)
        .args(["worker", "--mode", "echo", "--accuracy", "0.75"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut stdin = child.stdin.take().unwrap();
    let mut out = BufReader::new(child.stdout.take().unwrap());
    writeln!(stdin, "garbage").unwrap();
    writeln!(
        stdin,
        r#"{{"id": 4, "protocol": 1, "resolution": 32, "stages": [{{"width": 16, "depth": 1}}], "budget": {{"macs": 1}}}}"#
    )
    .unwrap();
    let mut line = String::new();
    out.read_line(&mut line).unwrap();
    let v: Value = serde_json::from_str(&line).unwrap();
    assert_eq!(v["id"], -1);
    assert!(v["error"].as_str().unwrap().contains("malformed"));
    line.clear();
    out.read_line(&mut line).unwrap();
    let v: Value = serde_json::from_str(&line).unwrap();
    assert_eq!(
        (v["id"].as_i64(), v["accuracy"].as_f64()),
        (Some(4), Some(0.75))
    );
    drop(stdin);
    assert!(child.wait().unwrap().success());
}

#[test]
fn report_flags_parent_switch_and_resolution_drop() {
    let dir = tempfile::tempdir().unwrap();
    let t = toy_file(dir.path());
    assert_eq!(code(&toy_search(dir.path(), &t, "run", &[])), 0);
    let log = TraceLog::read(&dir.path().join("run/trace.jsonl")).unwrap();
    let mut summaries: Vec<_> = log.iterations().cloned().collect();
    // Iteration 2 grows the base again at a lower resolution than iteration 1.
    let cfg = |r: u32| -> stagegrow::ArchConfig {
        serde_json::from_value(
            serde_json::json!({"resolution": r, "widths": [16, 32], "depths": [1, 1]}),
        )
        .unwrap()
    };
    summaries[0].config = cfg(48);
    summaries[0].parent = 0;
    summaries[1].config = cfg(40);
    summaries[1].parent = 0;
    let path = dir.path().join("constructed.jsonl");
    let mut w = TraceWriter::create(&path).unwrap();
    use stagegrow::trace::TraceSink;
    w.record(&TraceRecord::Header(log.header.clone())).unwrap();
    for s in &summaries {
        w.record(&TraceRecord::Iteration(s.clone())).unwrap();
    }
    w.commit().unwrap();
    drop(w);

    let o = run(&["report", "--trace", s(&path)]);
    let mut rows = csv::Reader::from_reader(o.stdout.as_slice());
    let headers = rows.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let recs: Vec<csv::StringRecord> = rows.records().map(Result::unwrap).collect();
    assert_eq!(recs.len(), 3);
    assert_eq!(&recs[0][col("parent_switch")], "false");
    assert_eq!(&recs[1][col("parent_switch")], "true");
    assert_eq!(&recs[1][col("resolution_drop")], "true");
    assert_eq!(&recs[0][col("resolution_drop")], "false");
}

#[test]
fn calibrate_against_itself_and_reversed() {
    let dir = tempfile::tempdir().unwrap();
    let t = toy_file(dir.path());
    let template = stagegrow::NetworkTemplate::load(&t).unwrap();
    let s_ =
        stagegrow::Surrogate::new(stagegrow::SurrogateParams::for_template(&template)).unwrap();
    let configs: Vec<stagegrow::ArchConfig> = (0..6)
        .map(|k| {
            stagegrow::ArchConfig::new(&template, 32 + 8 * k, vec![16 + 2 * k, 32], vec![1, 1])
                .unwrap()
        })
        .collect();
    let points = |sign: f64| -> Value {
        configs
            .iter()
            .map(|c| serde_json::json!({"config": c, "accuracy": 0.5 + sign * (s_.accuracy(&template, c).unwrap() - 0.5)}))
            .collect()
    };
    for (sign, want) in [(1.0, 1.0), (-1.0, -1.0)] {
        let p = dir.path().join("ref.json");
        std::fs::write(&p, points(sign).to_string()).unwrap();
        let o = run(&["calibrate", "--template", s(&t), "--reference", s(&p)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
        assert_eq!(v["spearman"].as_f64(), Some(want));
        assert_eq!(v["points"], 6);
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let t = toy_file(dir.path());
    // Nothing lands within a one-in-a-billion tolerance.
    let o = toy_search(dir.path(), &t, "empty", &["--delta", "1/1000000000"]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nearest misses"));
    let log = TraceLog::read(&dir.path().join("empty/trace.jsonl")).unwrap();
    assert_eq!(log.failures().next().unwrap().kind, "empty_candidate_set");

    let o = toy_search(
        dir.path(),
        &t,
        "relaxed",
        &["--delta", "1/1000000000", "--relax-on-empty"],
    );
    assert_eq!(code(&o), 0);

    let o = toy_search(
        dir.path(),
        &t,
        "evalfail",
        &["--evaluator", "exec:sh -c 'exit 1'"],
    );
    assert_eq!(code(&o), 3);
    let o = toy_search(dir.path(), &t, "badratio", &["--ratios", "0,1.5"]);
    assert_eq!(code(&o), 2);
    let o = toy_search(dir.path(), &t, "badeval", &["--evaluator", "magic"]);
    assert_eq!(code(&o), 2);
    let o = run(&[
        "search",
        "--template",
        s(&t),
        "--target-macs",
        "10",
        "--iterations",
        "2",
        "--out",
        s(&dir.path().join("small")),
    ]);
    assert_eq!(code(&o), 2);
    assert_eq!(code(&run(&["search", "--template", s(&t)])), 2);
    let o = run(&["report", "--trace", s(&dir.path().join("missing.jsonl"))]);
    assert_eq!(code(&o), 1);
}
