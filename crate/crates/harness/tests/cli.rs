use std::path::Path;
use std::process::{Command, Output};

fn dualscan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualscan")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = "\
# a few steps on a handful of small images
train.steps = 4
train.lr = 2e-3
data.train = 4
data.val = 2
data.size = 32
";

fn write_config(dir: &Path, extra: &str) -> String {
    let p = dir.join("run.conf");
    std::fs::write(&p, format!("{TINY}{extra}")).unwrap();
    p.display().to_string()
}

fn json_line(o: &Output) -> serde_json::Value {
    let text = stdout(o);
    let line = text.lines().last().expect("some output");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("{e}: {text}"))
}

#[test]
fn train_eval_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let run = dir.path().join("run");
    let o = dualscan(&["train", "--config", &cfg, "--out", run.to_str().unwrap(), "--threads", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary = json_line(&o);
    assert!(summary["mdice"].as_f64().unwrap() >= 0.0);
    assert!(run.join("metrics.jsonl").exists() && run.join("checkpoint/manifest.txt").exists());

    let data = dir.path().join("data");
    assert_eq!(code(&dualscan(&["synth", "--out", data.to_str().unwrap(), "--count", "3", "--size", "32"])), 0);
    assert!(data.join("image_0000.pgm").exists() && data.join("mask_0002.pgm").exists());
    let records = dir.path().join("records.jsonl");
    let o = dualscan(&[
        "eval",
        "--checkpoint",
        run.join("checkpoint").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--records",
        records.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(json_line(&o)["images"], 3);
    let lines = std::fs::read_to_string(&records).unwrap();
    assert_eq!(lines.lines().count(), 3 * 3, "one record per image and foreground class");
    let rec: serde_json::Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    for key in ["image", "class", "dice", "iou", "hd95", "asd"] {
        assert!(rec.get(key).is_some(), "{key} missing");
    }

    let out = dir.path().join("report");
    let o = dualscan(&["report", "--log", run.join("metrics.jsonl").to_str().unwrap(), "--out", out.to_str().unwrap(), "--no-bench"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let s: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(s["param_count"]["match"], true);
    assert_eq!(s["param_count"]["network"], s["logged_param_count"]);
    for name in ["M", "P_b", "R", "E", "w_ssm"] {
        let img = dualscan::pgm::load_pgm(out.join(format!("heatmap_{name}.pgm"))).unwrap();
        assert_eq!((img.width, img.height), (32, 32));
    }
}

#[test]
fn report_on_empty_log_says_no_data() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("metrics.jsonl");
    std::fs::write(&log, "").unwrap();
    let o = dualscan(&["report", "--log", log.to_str().unwrap(), "--no-bench"]);
    assert_eq!(code(&o), 0);
    let s: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(s["metrics"], "no data");
    assert_eq!(s["loss"], "no data");
}

#[test]
fn missing_inputs_are_io_errors() {
    assert_eq!(code(&dualscan(&["report", "--log", "/nonexistent/metrics.jsonl"])), 3);
    assert_eq!(code(&dualscan(&["train", "--config", "/nonexistent/run.conf"])), 3);
    assert_eq!(code(&dualscan(&["eval", "--checkpoint", "/nonexistent", "--data", "/nonexistent"])), 3);
}

#[test]
fn configuration_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.conf");
    std::fs::write(&bad, "basm.no_such_key = 1\n").unwrap();
    assert_eq!(code(&dualscan(&["train", "--config", bad.to_str().unwrap()])), 2);
    // 64 bottleneck channels are not divisible by 3 groups
    let cfg = write_config(dir.path(), "");
    let o = dualscan(&["sweep", "--config", &cfg, "--param", "G", "--values", "4,3", "--out", dir.path().join("s").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(!dir.path().join("s").join("G=4").exists(), "no run starts before every value is validated");
}

#[test]
fn ablation_switch_logs_a_distinct_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "train.steps = 1\n");
    let mut hashes = Vec::new();
    for extra in [vec![], vec!["--set", "basm.modulation=off"]] {
        let out = dir.path().join(format!("r{}", hashes.len()));
        let mut args = vec!["train", "--config", &cfg, "--out", out.to_str().unwrap()];
        args.extend(extra);
        let o = dualscan(&args);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let first = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
        let v: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
        assert_eq!(v["kind"], "config");
        hashes.push(v["hash"].as_str().unwrap().to_string());
    }
    assert_ne!(hashes[0], hashes[1]);
}

#[test]
fn sweep_writes_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "train.steps = 2\n");
    let out = dir.path().join("sweep");
    let o = dualscan(&["sweep", "--config", &cfg, "--param", "mu_R", "--values", "0.5,1.2", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("sweep.json")).unwrap()).unwrap();
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["value"], "0.5");
    assert!(stdout(&o).contains("mDice"));
}

#[test]
fn scan_bench_and_gradcheck_run() {
    let o = dualscan(&["scan-bench", "--len", "256", "--state", "4", "--channels", "4", "--reps", "1"]);
    assert_eq!(code(&o), 0);
    let b = json_line(&o);
    assert!(b["sequential_ns_per_token"].as_f64().unwrap() > 0.0);
    assert!(b["max_abs_diff"].as_f64().unwrap() < 1e-4);
    let o = dualscan(&["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("CMSA, Λ bound active"));
}
