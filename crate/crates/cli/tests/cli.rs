use std::path::Path;
use std::process::{Command, Output};

use ccaud::data::read_dump;
use ccaud::synthetic::{generate, SyntheticConfig};

fn ccaud(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ccaud"))
        .args(args)
        .env("CCAUD_WORKERS", "1")
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: [&str; 10] = [
    "--classes",
    "4",
    "--dim",
    "16",
    "--train-per-class",
    "300",
    "--val-per-class",
    "600",
    "--test-per-class",
    "50",
];

fn synth(out: &Path, extra: &[&str]) {
    let mut args = vec!["synth", "--out", p(out)];
    for pair in SMALL.chunks(2) {
        if !extra.contains(&pair[0]) {
            args.extend_from_slice(pair);
        }
    }
    args.extend_from_slice(extra);
    let o = ccaud(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn detect_with_calibration_reports_threshold_and_pc_rates() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("poisoned");
    synth(&data, &["--alpha", "0.1", "--target", "2"]);
    let out = tmp.path().join("run");
    let o = ccaud(&["detect", "--dump", p(&data), "--calibrate", "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let report = json(&out.join("report.json"));
    let theta = report["runs"][0]["theta"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&theta));
    assert_eq!(report["runs"][0]["calibrated"], true);
    let pc: Vec<&serde_json::Value> = report["records"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|r| r["case"] == "PC")
        .collect();
    assert_eq!(pc.len(), 1);
    assert_eq!(pc[0]["class"], 2);
    assert!(pc[0]["tpr"].as_f64().unwrap() >= 0.9);
    assert!(pc[0]["fpr"].is_number());
    for f in ["manifest.json", "report.csv", "table.csv", "roc_CCA-UD.csv", "verdicts_CCA-UD.jsonl"] {
        assert!(out.join(f).is_file(), "{} missing", f);
    }
    assert_eq!(json(&out.join("manifest.json"))["seed"], 0);
}

#[test]
fn benign_dump_flags_no_cluster() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("benign");
    synth(&data, &[]);
    let out = tmp.path().join("run");
    let o = ccaud(&["detect", "--dump", p(&data), "--theta", "0.5", "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let verdicts = std::fs::read_to_string(out.join("verdicts_CCA-UD.jsonl")).unwrap();
    let mut n = 0;
    for line in verdicts.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["poisoned"], false, "{}", line);
        assert_eq!(v["method"], "CCA-UD");
        n += 1;
    }
    assert!(n >= 4);
    let report = json(&out.join("report.json"));
    assert!(report["records"].as_array().unwrap().iter().all(|r| r["case"] == "BC_B"));
}

#[test]
fn malformed_dump_exits_3_without_output() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    synth(&data, &["--alpha", "0.1"]);
    let f = data.join("train/features.bin");
    let bytes = std::fs::read(&f).unwrap();
    std::fs::write(&f, &bytes[..bytes.len() - 4]).unwrap();
    let out = tmp.path().join("run");
    let o = ccaud(&["detect", "--dump", p(&data), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(!out.exists());

    std::fs::remove_file(data.join("val/manifest.json")).unwrap();
    let o = ccaud(&["detect", "--train", p(&data.join("train")), "--val", p(&data.join("val")), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(!out.exists());
}

#[test]
fn configuration_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    synth(&data, &["--alpha", "0.1"]);
    let out = tmp.path().join("run");
    let o = ccaud(&["detect", "--dump", p(&data), "--theta", "1.5", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
    let o = ccaud(&["detect", "--dump", p(&data), "--theta", "0.5", "--calibrate", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let o = ccaud(&["synth", "--out", p(&out), "--alpha", "0.9"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn synth_round_trips_bitwise() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    synth(&data, &["--alpha", "0.2", "--target", "1", "--seed", "7"]);
    let cfg: SyntheticConfig = serde_json::from_slice(&std::fs::read(data.join("synthetic.json")).unwrap()).unwrap();
    let bundle = generate(&cfg).unwrap();
    for (split, ds) in [("train", &bundle.train), ("val", &bundle.val), ("test", &bundle.test)] {
        let dump = read_dump(&data.join(split)).unwrap();
        assert_eq!(dump.dataset.len(), ds.len());
        for (a, b) in dump.dataset.samples().iter().zip(ds.samples()) {
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.features), bits(&b.features));
            assert_eq!((a.label, a.is_poisoned), (b.label, b.is_poisoned));
        }
        assert_eq!(dump.head, bundle.head);
    }
    let meta = read_dump(&data.join("train")).unwrap().manifest.meta.unwrap();
    assert!(meta.gates.unwrap().successful);
    assert!(data.join("triggered_0/manifest.json").is_file());
}

#[test]
fn alpha_sweep_writes_one_dataset_per_ratio() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sweep");
    synth(&out, &["--alpha-sweep", "--train-per-class", "60", "--val-per-class", "20"]);
    let mut dirs: Vec<String> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    dirs.sort();
    assert_eq!(
        dirs,
        ["alpha_0.025", "alpha_0.05", "alpha_0.1", "alpha_0.2", "alpha_0.35", "alpha_0.5", "alpha_0.55"]
    );
    for d in &dirs {
        let meta = read_dump(&out.join(d).join("train")).unwrap().manifest.meta.unwrap();
        let alpha: f64 = d.trim_start_matches("alpha_").parse().unwrap();
        assert_eq!(meta.alpha, Some(alpha));
    }
}

#[test]
fn multi_trigger_records_every_target() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("m");
    synth(&out, &["--alpha", "0.1", "--target", "1", "--multi-trigger", "3", "--dim", "24"]);
    let m = json(&out.join("train/manifest.json"));
    assert_eq!(m["meta"]["target_classes"], serde_json::json!([1, 2, 3]));
    assert_eq!(m["meta"]["gates"]["asr"].as_array().unwrap().len(), 3);
    for k in 0..3 {
        assert!(out.join(format!("triggered_{}", k)).is_dir());
    }
}

#[test]
fn sweep_tabulates_and_rejects_mixed_shapes() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    synth(&a, &["--alpha", "0.1", "--target", "3"]);
    let out = tmp.path().join("table");
    let o = ccaud(&["sweep", "--dumps", p(&a), "--theta", "0.5", "--method", "ac", "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(out.join("table.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 2, "{}", table);
    assert!(lines[1].starts_with("0.1,AC,"));

    let b = tmp.path().join("b");
    synth(&b, &["--alpha", "0.1", "--dim", "20"]);
    let out2 = tmp.path().join("table2");
    let o = ccaud(&["sweep", "--dumps", p(&a), p(&b), "--theta", "0.5", "--out", p(&out2)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out2.exists());
}

#[test]
fn repeated_runs_are_bitwise_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    synth(&data, &["--alpha", "0.05"]);
    let run = |name: &str| {
        let out = tmp.path().join(name);
        let o = ccaud(&["detect", "--dump", p(&data), "--method", "all", "--seed", "3", "--out", p(&out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let mut files: Vec<_> = std::fs::read_dir(&out).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        files
            .iter()
            .map(|f| (f.file_name().unwrap().to_owned(), std::fs::read(f).unwrap()))
            .collect::<Vec<_>>()
    };
    assert_eq!(run("r1"), run("r2"));
}
