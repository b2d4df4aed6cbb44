use std::path::Path;
use std::process::{Command, Output};

fn cutrank(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cutrank"))
        .args(args)
        .env("CUTRANK_LOG", "info")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = cutrank(args);
    assert!(
        out.status.success(),
        "cutrank {} failed:\n{}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

/// `(relative path, bytes)` of every file under `dir`.
fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                v.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    v.sort();
    v
}

const SMALL: &[&str] = &["--set", "n_scenes=12", "--set", "gen.val_scenes=6"];

fn gen_small(dir: &Path, seed: &str) {
    let mut args = vec!["gen", "--seed", seed, "--out"];
    let d = s(dir);
    args.push(&d);
    args.extend_from_slice(SMALL);
    ok(&args);
}

#[test]
fn gen_is_deterministic() {
    let t = tempfile::tempdir().unwrap();
    gen_small(&t.path().join("a"), "7");
    gen_small(&t.path().join("b"), "7");
    gen_small(&t.path().join("c"), "8");
    for split in ["train", "val"] {
        let a = read_dir_sorted(&t.path().join("a").join(split));
        assert_eq!(a, read_dir_sorted(&t.path().join("b").join(split)));
        assert_ne!(a, read_dir_sorted(&t.path().join("c").join(split)));
        assert!(a.iter().any(|(n, _)| n == "manifest.json.provenance.json"));
        assert!(a.iter().any(|(n, _)| n == "ground_truth.json"));
    }
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(cutrank(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(cutrank(&["gen", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(cutrank(&["rank", "--method", "best", "--corpus", "x", "--out", "y"]).status.code(), Some(2));
    assert_eq!(cutrank(&[]).status.code(), Some(2));
}

#[test]
fn domain_errors_exit_1() {
    let t = tempfile::tempdir().unwrap();
    let out = cutrank(&["validate", "--corpus", &s(&t.path().join("missing"))]);
    assert_eq!(out.status.code(), Some(1));
    let out = cutrank(&["gen", "--out", &s(t.path()), "--set", "foo=1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`foo`"));
    let cfg = t.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"train": {"epochs": "many"}}"#).unwrap();
    let out = cutrank(&["gen", "--out", &s(t.path()), "--config", &s(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.epochs"));
}

#[test]
fn override_beats_config_file_and_is_logged() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"train": {"lr": 0.01}, "synth": {"n_scenes": 3}, "gen": {"val_scenes": 2}}"#).unwrap();
    let out = ok(&["gen", "--config", &s(&cfg), "--set", "lr=0.003", "--out", &s(t.path())]);
    let log = String::from_utf8_lossy(&out.stderr);
    assert!(log.contains("resolved config"), "{log}");
    assert!(log.contains("\"lr\":0.003"), "{log}");
    let prov: serde_json::Value = serde_json::from_slice(
        &std::fs::read(t.path().join("train/manifest.json.provenance.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(prov["config"]["train"]["lr"], 0.003);
    assert_eq!(prov["config"]["synth"]["n_scenes"], 3);
    assert_eq!(prov["corpus_hashes"].as_array().unwrap().len(), 1);
}

#[test]
fn pipeline_end_to_end() {
    let t = tempfile::tempdir().unwrap();
    let p = |x: &str| s(&t.path().join(x));
    gen_small(&t.path().join("data"), "1");
    let out = ok(&["validate", "--corpus", &p("data/val")]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("cuts     6"), "{text}");

    ok(&["train", "--train", &p("data/train"), "--val", &p("data/val"), "--epochs", "3", "--out", &p("m32")]);
    ok(&[
        "train", "--train", &p("data/train"), "--val", &p("data/val"), "--epochs", "3", "--precision", "double",
        "--out", &p("m64"),
    ]);
    assert!(t.path().join("m64/clm.0.weight.f64").exists());
    let history = std::fs::read_to_string(t.path().join("m32/history.csv")).unwrap();
    assert!(history.starts_with("epoch,train_loss,val_loss,lr,seconds\n"));
    assert_eq!(history.lines().count(), 1 + 3);

    for (name, extra) in [
        ("single", vec!["--model".to_string(), p("m32")]),
        ("two", vec!["--model".to_string(), p("m64")]),
        ("random", vec![]),
        ("raw", vec!["--modality".to_string(), "audio".to_string()]),
    ] {
        let mut args = vec!["rank".to_string(), "--corpus".into(), p("data/val"), "--method".into(), name.into()];
        args.extend(extra);
        args.extend(["--out".into(), p(&format!("{name}.csv"))]);
        ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    }
    let prov: serde_json::Value =
        serde_json::from_slice(&std::fs::read(t.path().join("two.csv.provenance.json")).unwrap()).unwrap();
    assert_eq!(prov["model_hash"].as_str().unwrap().len(), 64);

    let out = ok(&[
        "eval", "--corpus", &p("data/val"), "--list", &format!("two-stage={}", p("two.csv")), "--list",
        &p("random.csv"), "--out", &p("eval"),
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("two-stage"));
    let csv = std::fs::read_to_string(t.path().join("eval/metrics.csv")).unwrap();
    assert!(csv.starts_with("method,eta,d,recall_percent,K,pool_size,seed\n"));
    assert_eq!(csv.lines().count(), 1 + 18);
    assert!(csv.contains("\nrandom,1,1,"));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(t.path().join("eval/metrics.json")).unwrap()).unwrap();
    assert_eq!(report["rows"][0]["model_id"], prov["model_hash"]);
    assert!(t.path().join("eval/metrics.csv.provenance.json").exists());

    ok(&["heatmap", "--corpus", &p("data/val"), "--model", &p("m32"), "--cut", "2", "--out", &p("heat")]);
    let header: serde_json::Value =
        serde_json::from_slice(&std::fs::read(t.path().join("heat/cut_000002.json")).unwrap()).unwrap();
    let n = header["n_left"].as_u64().unwrap() * header["n_right"].as_u64().unwrap();
    assert_eq!(std::fs::metadata(t.path().join("heat/cut_000002.f32")).unwrap().len(), 4 * n);
}

#[test]
fn eval_on_mismatched_pool_fails() {
    let t = tempfile::tempdir().unwrap();
    let p = |x: &str| s(&t.path().join(x));
    gen_small(&t.path().join("data"), "2");
    ok(&["rank", "--corpus", &p("data/val"), "--method", "random", "--out", &p("r.csv")]);
    let out = cutrank(&["eval", "--corpus", &p("data/train"), "--list", &p("r.csv"), "--out", &p("eval")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not match the pool"));
    assert!(!t.path().join("eval/metrics.csv").exists());
}

#[test]
fn model_methods_need_a_model() {
    let t = tempfile::tempdir().unwrap();
    gen_small(&t.path().join("data"), "3");
    let out = cutrank(&[
        "rank", "--corpus", &s(&t.path().join("data/val")), "--method", "two", "--out", &s(&t.path().join("x.csv")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--model"));
}
