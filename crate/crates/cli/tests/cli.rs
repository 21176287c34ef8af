use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ragforge() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ragforge"));
    c.env_remove("RAGFORGE_THREADS");
    c
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(dir: &Path) {
    let o = run(ragforge().args([
        "synth",
        "--seed",
        "3",
        "--entities",
        "30",
        "--relations",
        "2",
        "--facts-per-passage",
        "4",
        "--vocab",
        "800",
        "--out",
    ])
    .arg(dir));
    assert!(o.status.success(), "{}", stderr(&o));
}

fn small_run(cmd: &mut Command, data: &Path, steps: &str) {
    cmd.arg("--corpus")
        .arg(data.join("corpus.jsonl"))
        .arg("--qa")
        .arg(data.join("qa.jsonl"))
        .args([
            "--vocab",
            "800",
            "--enc-dim",
            "8",
            "--gen-dim",
            "8",
            "--hidden",
            "8",
            "--steps",
            steps,
        ]);
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    synth(&a);
    synth(&b);
    for f in ["corpus.jsonl", "qa.jsonl"] {
        let x = fs::read(a.join(f)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn minimal_world_is_not_empty() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(ragforge()
        .args(["synth", "--seed", "0", "--entities", "2", "--relations", "1", "--facts-per-passage", "1", "--out"])
        .arg(dir.path()));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(!fs::read_to_string(dir.path().join("corpus.jsonl")).unwrap().trim().is_empty());
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let o = run(ragforge().args(["synth", "--seed", "1", "--entities", "5"]));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--relations"), "{}", stderr(&o));
}

#[test]
fn help_exits_zero() {
    let o = run(ragforge().arg("--help"));
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("compare"));
}

#[test]
fn invalid_config_lists_every_violation_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let out = dir.path().join("run");
    let mut cmd = ragforge();
    cmd.arg("train");
    small_run(&mut cmd, dir.path(), "30");
    let o = run(cmd.args(["--refresh-every", "0", "--k", "0", "--out"]).arg(&out));
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("refresh_every") && err.contains("k must"), "{err}");
    assert!(!out.exists());
}

#[test]
fn config_file_and_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let cfg = dir.path().join("run.conf");
    fs::write(
        &cfg,
        format!(
            "# small run\ncorpus = {}\nqa = {}\nvocab = 800\nenc_dim = 8\ngen_dim = 8\nhidden = 8\nsteps = 10\nk = 3\n",
            dir.path().join("corpus.jsonl").display(),
            dir.path().join("qa.jsonl").display()
        ),
    )
    .unwrap();
    let out = dir.path().join("run");
    let o = run(ragforge().arg("train").arg("--config").arg(&cfg).args(["--k", "2", "--set", "mode=frozen", "--out"]).arg(&out));
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(report["k"], 2);
    assert_eq!(report["mode"], "frozen");

    fs::write(&cfg, "bogus = 1\nk = x\n").unwrap();
    let o = run(ragforge().arg("train").arg("--config").arg(&cfg));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bogus") && stderr(&o).contains("k:"), "{}", stderr(&o));
}

#[test]
fn train_is_reproducible_and_eval_echoes_k() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let train = |name: &str| {
        let out = dir.path().join(name);
        let mut cmd = ragforge();
        cmd.arg("train");
        small_run(&mut cmd, dir.path(), "30");
        let o = run(cmd.args(["--mode", "end2end", "--refresh-every", "10", "--refresh-workers", "2", "--out"]).arg(&out));
        assert!(o.status.success(), "{}", stderr(&o));
        out
    };
    let (a, b) = (train("a"), train("b"));
    for f in ["metrics.jsonl", "checkpoint/manifest.txt", "checkpoint/tensors.bin", "index.rgf"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let metrics = fs::read_to_string(a.join("metrics.jsonl")).unwrap();
    assert!(metrics.lines().count() > 30);
    assert!(!metrics.contains("timing_ms\":1") && !metrics.contains("timing_ms\":0."));

    for k in ["1", "5"] {
        let o = run(ragforge()
            .arg("eval")
            .arg("--checkpoint")
            .arg(a.join("checkpoint"))
            .arg("--corpus")
            .arg(dir.path().join("corpus.jsonl"))
            .arg("--qa")
            .arg(dir.path().join("qa.jsonl"))
            .args(["--k", k]));
        assert!(o.status.success(), "{}", stderr(&o));
        let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
        assert_eq!(v["k"].to_string(), k);
        assert_eq!(v["step"], 30);
        assert_eq!(v["mode"], "end2end");
        let em = v["exact_match_percent"].as_f64().unwrap();
        assert!((0.0..=100.0).contains(&em));
    }

    let o = run(ragforge().arg("inspect-index").arg(a.join("index.rgf")));
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("magic RGF1"), "{text}");
    assert!(text.contains("generation 4"), "{text}");
    assert!(text.contains("kind exact"), "{text}");
}

#[test]
fn corrupted_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let out = dir.path().join("run");
    let mut cmd = ragforge();
    cmd.arg("train");
    small_run(&mut cmd, dir.path(), "5");
    assert!(run(cmd.arg("--out").arg(&out)).status.success());
    let payload = out.join("checkpoint/tensors.bin");
    let bytes = fs::read(&payload).unwrap();
    fs::write(&payload, &bytes[..bytes.len() / 2]).unwrap();
    let o = run(ragforge()
        .arg("eval")
        .arg("--checkpoint")
        .arg(out.join("checkpoint"))
        .arg("--corpus")
        .arg(dir.path().join("corpus.jsonl"))
        .arg("--qa")
        .arg(dir.path().join("qa.jsonl")));
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("payload"), "{}", stderr(&o));

    let o = run(ragforge().arg("inspect-index").arg(dir.path().join("corpus.jsonl")));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn compare_prints_one_row_per_mode_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let mut cmd = ragforge();
    cmd.arg("compare");
    small_run(&mut cmd, dir.path(), "10");
    let o = run(cmd.args(["--seeds", "4,5"]).env("RAGFORGE_THREADS", "2"));
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    let lines: Vec<&str> = table.lines().collect();
    assert!(lines[0].contains("EM gap"), "{table}");
    let rows: Vec<(&str, &str)> = lines[1..5]
        .iter()
        .map(|l| {
            let mut f = l.split_whitespace();
            (f.next().unwrap(), f.next().unwrap())
        })
        .collect();
    assert_eq!(rows, vec![("frozen", "4"), ("end2end", "4"), ("frozen", "5"), ("end2end", "5")]);
    assert!(lines[5].starts_with("median EM"), "{table}");

    let mut cmd = ragforge();
    cmd.arg("compare");
    small_run(&mut cmd, dir.path(), "10");
    let o = run(cmd.args(["--seeds", "4", "--json"]));
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["rows"].as_array().unwrap().len(), 2);
    assert!(v["em_gap"].is_number());
}

#[test]
fn bad_thread_cap_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let mut cmd = ragforge();
    cmd.arg("compare");
    small_run(&mut cmd, dir.path(), "10");
    let o = run(cmd.env("RAGFORGE_THREADS", "zero"));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("RAGFORGE_THREADS"), "{}", stderr(&o));
}
