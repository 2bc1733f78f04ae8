use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ap3d::network::{Model, NetworkSpec, ReplacementPolicy};
use ap3d::traineval::analysis::{count_flops, count_params};

fn ap3d(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ap3d")).current_dir(dir).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = ap3d(dir, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    stdout(&o)
}

/// Relative path → bytes of every file under `root`.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// Value of `key=` on any line.
fn field<'a>(text: &'a str, key: &str) -> &'a str {
    text.split_whitespace()
        .find_map(|t| t.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .unwrap_or_else(|| panic!("{key} missing in {text}"))
}

const SMALL: &[&str] = &[
    "--ids", "4", "--frames", "12", "--persons-per-batch", "4", "--clips-per-person", "2",
    "--batches-per-epoch", "2", "--test-clip-len", "8",
];

#[test]
fn count_reports_rounded_and_exact_values() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["count", "--arch", "resnet50-ap-p3d-c", "--policy", "per2-stage23"]);
    assert_eq!(field(&out, "params"), "24.24M");
    let out = ok(dir.path(), &["count", "--arch", "tiny-c2d", "--input-shape", "4x3x32x16"]);
    let model = Model::new(NetworkSpec::from_arch("tiny-c2d", ReplacementPolicy::Per2Stage23, 0).unwrap(), 0).unwrap();
    let macs = count_flops(&model, &[1, 4, 3, 32, 16]).unwrap();
    assert_eq!(field(&out, "params_exact"), count_params(&model).to_string());
    assert_eq!(field(&out, "layer_macs"), macs.layer.to_string());
    assert_eq!(field(&out, "attention_macs"), macs.attention.to_string());
    let resolved = dir.path().join("runs/count/config.resolved.json");
    let cfg: serde_json::Value = serde_json::from_slice(&fs::read(resolved).unwrap()).unwrap();
    assert_eq!(cfg["input_shape"], serde_json::json!([4, 3, 32, 16]));
}

#[test]
fn resolved_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let first = ok(dir.path(), &["count", "--arch", "tiny-ap-i3d", "--policy", "all-stage23", "--out", "a"]);
    let second = ok(dir.path(), &["count", "--config", "a/config.resolved.json", "--out", "b"]);
    assert_eq!(first, second);
    assert_eq!(fs::read(dir.path().join("a/count.json")).unwrap(), fs::read(dir.path().join("b/count.json")).unwrap());
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), r#"{"arch": "tiny-c2d", "input_shape": [2, 3, 32, 16]}"#).unwrap();
    ok(dir.path(), &["count", "--config", "c.json", "--arch", "tiny-i3d"]);
    let cfg: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("runs/count/config.resolved.json")).unwrap()).unwrap();
    assert_eq!(cfg["arch"], "tiny-i3d");
    assert_eq!(cfg["input_shape"], serde_json::json!([2, 3, 32, 16]));
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("typo.json"), r#"{"synth": {"num_identites": 3}}"#).unwrap();
    let cases: &[&[&str]] = &[
        &["count", "--arch", "resnet77-c2d"],
        &["count", "--input-shape", "4x3x256"],
        &["count", "--no-such-flag"],
        &["synth", "--config", "typo.json"],
        &["synth", "--config", "missing.json"],
        &["gradcheck", "--scope", "everything"],
        &["eval"],
        &["heatmap", "--pair", "1"],
        &["train", "--ids", "4", "--held-out", "4"],
    ];
    for args in cases {
        assert_eq!(ap3d(dir.path(), args).status.code(), Some(2), "{args:?}");
    }
    let o = Command::new(env!("CARGO_BIN_EXE_ap3d"))
        .current_dir(dir.path())
        .env("AP3D_THREADS", "0")
        .args(["count", "--arch", "tiny-c2d"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_lists_primitives_and_fails_on_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["gradcheck", "--scope", "primitives", "--seed", "0"]);
    let rows = out.lines().filter(|l| l.starts_with("primitives")).count();
    assert!(rows >= 12, "{out}");
    assert!(out.lines().filter(|l| l.starts_with("primitives")).all(|l| l.ends_with("pass")));
    ok(dir.path(), &["gradcheck", "--scope", "apm", "--seed", "0"]);
    let bad = ap3d(dir.path(), &["gradcheck", "--scope", "apm", "--corrupt-backward"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stdout(&bad).contains("FAIL"));
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("runs/gradcheck/gradcheck.json")).unwrap()).unwrap();
    assert_eq!(report.as_array().unwrap().len(), 2);
}

#[test]
fn synth_is_bit_identical_for_equal_seeds() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let args = ["synth", "--ids", "16", "--seed", "7", "--frames", "8", "--out", "data"];
    ok(a.path(), &args);
    ok(b.path(), &args);
    let (sa, sb) = (snapshot(&a.path().join("data")), snapshot(&b.path().join("data")));
    assert_eq!(sa.len(), 16 * 4 * 8 + 2);
    assert_eq!(sa, sb);
    ok(c.path(), &["synth", "--ids", "16", "--seed", "8", "--frames", "8", "--out", "data"]);
    assert_ne!(sa, snapshot(&c.path().join("data")));
}

#[test]
fn train_then_eval_agree() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--epochs", "2", "--out", "run"];
    args.extend_from_slice(SMALL);
    let trained = ok(dir.path(), &args);
    let run = dir.path().join("run");
    for f in ["config.resolved.json", "log.jsonl", "metrics.json", "model.ckpt", "spec.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(run.join("log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let evaluated = ok(
        dir.path(),
        &["eval", "--checkpoint", "run/model.ckpt", "--ids", "4", "--frames", "12", "--test-clip-len", "8"],
    );
    assert_eq!(trained.lines().next(), evaluated.lines().next());
}

#[test]
fn training_is_reproducible_from_the_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--epochs", "1", "--seed", "3", "--out", "a"];
    args.extend_from_slice(SMALL);
    ok(dir.path(), &args);
    ok(dir.path(), &["train", "--config", "a/config.resolved.json", "--out", "b"]);
    let read = |p: &str| fs::read(dir.path().join(p)).unwrap();
    assert_eq!(read("a/model.ckpt"), read("b/model.ckpt"));
    let loss = |p: &str| -> f64 {
        let v: serde_json::Value = serde_json::from_slice(&read(p)).unwrap();
        v["last_loss"].as_f64().unwrap()
    };
    assert_eq!(loss("a/metrics.json"), loss("b/metrics.json"));
}

#[test]
fn train_accepts_exported_data() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--ids", "4", "--frames", "12", "--out", "data"]);
    let mut args = vec!["train", "--data", "data", "--epochs", "1", "--out", "run"];
    args.extend_from_slice(SMALL);
    let out = ok(dir.path(), &args);
    assert!(out.contains("queries=8"), "{out}");
}

#[test]
fn scale_sweep_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["sweep", "--axis", "scale-s", "--values", "1,2,3,4,5,6", "--epochs", "1", "--out", "sw"];
    args.extend_from_slice(SMALL);
    let out = ok(dir.path(), &args);
    let csv = fs::read_to_string(dir.path().join("sw/sweep.csv")).unwrap();
    assert_eq!(csv, out);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 7);
    assert_eq!(lines[0], "setting,rank1,rank5,rank10,mAP,params,gmacs");
    for (line, s) in lines[1..].iter().zip(1..=6) {
        assert!(line.starts_with(&format!("s={s},")), "{line}");
    }
}

#[test]
fn heatmaps_are_normalised_per_scale() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["heatmap", "--s", "1", "--s", "4", "--ids", "2", "--frames", "4", "--out", "hm"]);
    let hm = dir.path().join("hm");
    let mut entropies = Vec::new();
    for s in ["1", "4"] {
        let csv = fs::read_to_string(hm.join(format!("heatmap_s{s}.csv"))).unwrap();
        let values: Vec<f64> = csv.lines().flat_map(|l| l.split(',')).map(|v| v.parse().unwrap()).collect();
        assert!((values.iter().sum::<f64>() - 1.0).abs() < 1e-6, "s={s}");
        assert!(values.iter().all(|&v| v > 0.0));
        entropies.push(-values.iter().map(|p| p * p.ln()).sum::<f64>());
        let pgm = fs::read(hm.join(format!("heatmap_s{s}.pgm"))).unwrap();
        assert!(pgm.starts_with(b"P5\n"));
    }
    assert!(entropies[1] <= entropies[0]);
    assert!(hm.join("frame_central.pgm").exists() && hm.join("frame_adjacent.pgm").exists());
}
