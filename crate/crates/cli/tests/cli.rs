use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vqa-fusion"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn")
}

fn ok(args: &[&str]) -> Value {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("summary is JSON")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn outputs(dir: &Path) -> Vec<String> {
    let m: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    m["outputs"]
        .as_object()
        .unwrap()
        .values()
        .map(|v| v.as_str().unwrap().to_string())
        .collect()
}

#[test]
fn gen_is_reproducible_and_counts_questions() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    for d in [&a, &b] {
        let s = ok(&["gen", "--out", p(d), "--num-images", "10", "--seed", "4"]);
        assert_eq!(s["questions"], 50);
    }
    let lines = std::fs::read_to_string(a.join("questions.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 50);
    assert_eq!(outputs(&a), outputs(&b));
    assert_eq!(outputs(&a).len(), 3);
}

#[test]
fn usage_and_io_errors_have_distinct_exit_codes() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("x");
    let r = run(&["gen", "--out", p(&out), "--quality", "bogus"]);
    assert_eq!(r.status.code(), Some(2));
    let r = run(&["gen", "--out", p(&out), "--num-images", "0"]);
    assert_eq!(r.status.code(), Some(2));
    let r = run(&[
        "eval",
        "--data",
        p(&t.path().join("missing")),
        "--scores",
        "s.jsonl",
    ]);
    assert_eq!(r.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&r.stderr);
    assert_eq!(stderr.trim().lines().count(), 1, "{stderr}");
}

#[test]
fn oracle_scores_evaluate_to_one() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    ok(&["gen", "--out", p(&data), "--num-images", "20"]);
    let fingerprint = vqa_fusion::program::vocab_fingerprint();
    let text = std::fs::read_to_string(data.join("questions.jsonl")).unwrap();
    let mut lines = String::new();
    for l in text.lines() {
        let q: Value = serde_json::from_str(l).unwrap();
        let gold = vqa_fusion::program::answer_index(q["answer"].as_str().unwrap()).unwrap();
        let mut scores = vec![0.0; vqa_fusion::program::NUM_ANSWERS];
        scores[gold] = 1.0;
        let line = serde_json::json!({ "qid": q["qid"], "scores": scores, "vocab_fingerprint": fingerprint });
        lines.push_str(&format!("{line}\n"));
    }
    let scores = t.path().join("oracle.jsonl");
    std::fs::write(&scores, lines).unwrap();
    let s = ok(&[
        "eval",
        "--data",
        p(&data),
        "--scores",
        p(&scores),
        "--split",
        "all",
    ]);
    assert_eq!(s["accuracy"], 1.0);
    assert_eq!(s["total"], 100);
    // A split the file does not match is refused.
    let r = run(&[
        "eval",
        "--data",
        p(&data),
        "--scores",
        p(&scores),
        "--split",
        "val",
    ]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn train_predict_eval_ensemble_pipeline() {
    let t = tempfile::tempdir().unwrap();
    let d = |n: &str| t.path().join(n);
    ok(&["gen", "--out", p(&d("data")), "--num-images", "30"]);
    for seed in ["1", "2"] {
        let m = d(&format!("m{seed}"));
        let s = ok(&[
            "train",
            "--data",
            p(&d("data")),
            "--out",
            p(&m),
            "--epochs",
            "2",
            "--seed",
            seed,
            "--encoder",
            "gru",
            "--spatial",
            "false",
        ]);
        assert!(s["best_val_accuracy"].as_f64().unwrap() >= 0.0);
        for split in ["val", "test"] {
            ok(&[
                "predict",
                "--data",
                p(&d("data")),
                "--checkpoint",
                p(&m),
                "--split",
                split,
                "--out",
                p(&m.join(split)),
            ]);
        }
        let from_ckpt = ok(&["eval", "--data", p(&d("data")), "--checkpoint", p(&m)]);
        let from_scores = ok(&[
            "eval",
            "--data",
            p(&d("data")),
            "--scores",
            p(&m.join("val")),
        ]);
        assert_eq!(from_ckpt["accuracy"], from_scores["accuracy"]);
    }
    let history: Value =
        serde_json::from_str(&std::fs::read_to_string(d("m1").join("history.json")).unwrap())
            .unwrap();
    assert_eq!(history["config"]["train"]["model"]["use_spatial"], false);
    assert_eq!(history["config"]["train"]["model"]["seed"], 1);

    let s = ok(&[
        "ensemble",
        "--data",
        p(&d("data")),
        "--val",
        p(&d("m1").join("val")),
        p(&d("m2").join("val")),
        "--test",
        p(&d("m1").join("test")),
        p(&d("m2").join("test")),
        "--out",
        p(&d("ens")),
    ]);
    let r = &s["report"];
    let w: f64 = r["weights"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .sum();
    assert!((w - 1.0).abs() < 1e-9);
    assert!(r["val_accuracy"].as_f64() >= r["val_average_accuracy"].as_f64());
    assert!(r["test"]["weighted_accuracy"].is_number());
    assert!(d("ens").join("test_scores.jsonl").exists());
}

#[test]
fn full_ablation_on_tiny_data_yields_every_row() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("abl");
    let s = ok(&[
        "ablate",
        "--out",
        p(&out),
        "--suite",
        "full",
        "--seeds",
        "0",
        "--epochs",
        "1",
        "--num-images",
        "20",
        "--jobs",
        "2",
    ]);
    assert_eq!(s["rows"], 12);
    let table = std::fs::read_to_string(out.join("table.txt")).unwrap();
    for name in [
        "quality low",
        "bayesian gru",
        "program on",
        "bbox position + size",
    ] {
        assert!(table.contains(name), "{name} missing from\n{table}");
    }
}

#[test]
fn gradcheck_passes_on_a_few_seeds() {
    let s = ok(&["gradcheck", "--seeds", "2"]);
    assert_eq!(s["passed"], true);
    assert!(s["max_rel_error"].as_f64().unwrap() < 1e-4);
}
