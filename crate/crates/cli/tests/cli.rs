use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_slickmem");
const FAST_TRAIN: [&str; 6] = [
    "--train-images",
    "8",
    "--train-steps",
    "10",
    "--calibration-images",
    "8",
];

fn slickmem(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn synth(dir: &Path, images: usize) -> String {
    let out = dir.join("s");
    let n = images.to_string();
    let o = slickmem(&[
        "synth",
        "--out",
        out.to_str().unwrap(),
        "--images",
        &n,
        "--seed",
        "5",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out.join("stream.toml").to_str().unwrap().to_string()
}

fn stderr_json(o: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&o.stderr);
    serde_json::from_str(text.trim()).unwrap_or_else(|e| panic!("stderr is not json ({e}): {text}"))
}

#[test]
fn synth_run_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let stream = synth(dir.path(), 6);
    let out = dir.path().join("run");
    let mut args = vec!["run", "--stream", &stream, "--out", out.to_str().unwrap()];
    args.extend(FAST_TRAIN);
    let o = slickmem(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["images"], 6);

    let log = fs::read_to_string(out.join("runlog.jsonl")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 8);
    assert!(lines[0].contains("\"kind\":\"header\""));
    assert!(lines[7].contains("\"kind\":\"footer\""));
    assert_eq!(fs::read_dir(out.join("masks")).unwrap().count(), 6);

    let o = slickmem(&[
        "eval",
        "--stream",
        &stream,
        "--masks",
        out.to_str().unwrap(),
        "--json",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let miou = report["miou"].as_f64().unwrap();
    assert!((miou - summary["miou"].as_f64().unwrap()).abs() < 1e-12);
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let stream = synth(dir.path(), 4);
    let cfg = dir.path().join("cfg.toml");
    fs::write(&cfg, "k = 2\n[decoder]\nsource = \"random\"\nseed = 3\n").unwrap();
    let out = dir.path().join("run");
    let dec = dir.path().join("dec.txt");
    let o = slickmem(&[
        "run",
        "--stream",
        &stream,
        "--out",
        out.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--decoder-seed",
        "9",
        "--save-decoder",
        dec.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let header = fs::read_to_string(out.join("runlog.jsonl")).unwrap();
    let header: serde_json::Value = serde_json::from_str(header.lines().next().unwrap()).unwrap();
    assert_eq!(header["config"]["k"], 2);
    assert_eq!(header["config"]["decoder"]["seed"], 9);

    // a relative decoder path resolves against the config file's directory
    fs::write(&cfg, "[decoder]\nsource = \"file\"\npath = \"dec.txt\"\n").unwrap();
    let out2 = dir.path().join("run2");
    let o = slickmem(&[
        "run",
        "--stream",
        &stream,
        "--out",
        out2.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for id in ["img_0000", "img_0001", "img_0002", "img_0003"] {
        let a = fs::read(out.join("masks").join(format!("{id}.pgm"))).unwrap();
        let b = fs::read(out2.join("masks").join(format!("{id}.pgm"))).unwrap();
        assert_eq!(a, b, "{id}");
    }
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let stream = synth(dir.path(), 2);
    let cfg = dir.path().join("cfg.toml");
    fs::write(&cfg, "topk = 3\n").unwrap();
    let o = slickmem(&[
        "run",
        "--stream",
        &stream,
        "--out",
        "unused",
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert_eq!(stderr_json(&o)["kind"], "config");
}

#[test]
fn out_of_bounds_prompt_reports_image() {
    let dir = tempfile::tempdir().unwrap();
    let stream = synth(dir.path(), 3);
    let prompts = dir.path().join("s").join("prompts.jsonl");
    let text = fs::read_to_string(&prompts).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let victim: serde_json::Value = serde_json::from_str(&lines[1]).unwrap();
    let id = victim["image_id"].as_str().unwrap().to_string();
    lines[1] = format!("{{\"image_id\":\"{id}\",\"clicks\":[[999,0,\"pos\"]],\"boxes\":[]}}");
    fs::write(&prompts, lines.join("\n") + "\n").unwrap();

    let out = dir.path().join("run");
    let o = slickmem(&[
        "run",
        "--stream",
        &stream,
        "--out",
        out.to_str().unwrap(),
        "--decoder",
        "random",
    ]);
    assert!(!o.status.success());
    let err = stderr_json(&o);
    assert_eq!(err["image_id"], id.as_str());
    assert_eq!(err["kind"], "validation");
}

#[test]
fn missing_stream_is_io_error() {
    let o = slickmem(&["eval", "--stream", "/nonexistent/stream.toml", "--masks", "/tmp"]);
    assert!(!o.status.success());
    let err = stderr_json(&o);
    assert_eq!(err["kind"], "io");
    assert!(err["image_id"].is_null());
}

#[test]
fn contradictory_decoder_flags_fail() {
    let dir = tempfile::tempdir().unwrap();
    let stream = synth(dir.path(), 2);
    let o = slickmem(&[
        "run",
        "--stream",
        &stream,
        "--out",
        "unused",
        "--decoder",
        "random",
        "--train-steps",
        "3",
    ]);
    assert!(!o.status.success());
    assert_eq!(stderr_json(&o)["kind"], "usage");
    let o = slickmem(&["run", "--stream", &stream, "--out", "unused", "--decoder", "file"]);
    assert!(!o.status.success());
}

#[test]
fn ablate_on_small_stream() {
    let dir = tempfile::tempdir().unwrap();
    let stream = synth(dir.path(), 4);
    let mut args = vec!["ablate", "--stream", &stream, "--json"];
    args.extend(FAST_TRAIN);
    let o = slickmem(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 8);
    assert_eq!(rows[0]["name"], "Baseline");
    assert_eq!(rows[7]["name"], "Full");
}
