use std::path::Path;
use std::process::{Command, Output};

use dmapl::datasets::{load_csv, load_labels_csv};
use dmapl::model::{Activation, Dense, Model, ModelArch};
use dmapl::trainer::TrainConfig;

fn dmapl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dmapl"))
        .args(args)
        .output()
        .expect("spawn dmapl")
}

fn ok(args: &[&str]) -> String {
    let out = dmapl(args);
    assert!(
        out.status.success(),
        "dmapl {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

/// gen-data on a small benchmark plus a source model trained on it.
fn small_setup(root: &Path) {
    let spec = root.join("spec.toml");
    std::fs::write(&spec, "samples_per_class = 150\nseed = 4\n").unwrap();
    ok(&["gen-data", "--spec", &s(&spec), "--out", &s(&root.join("data"))]);
    ok(&[
        "train-source",
        "--source-train", &s(&root.join("data/source_train.csv")),
        "--source-val", &s(&root.join("data/source_val.csv")),
        "--set", "source_epochs=10",
        "--out", &s(&root.join("src")),
    ]);
}

#[test]
fn gen_data_writes_manifest_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["gen-data", "--seed", "7", "--out", &s(&a)]);
    ok(&["gen-data", "--seed", "7", "--out", &s(&b)]);
    let files = [
        "source_train.csv",
        "source_val.csv",
        "source_test.csv",
        "target_train.csv",
        "target_train_truth.csv",
        "target_test.csv",
        "config.toml",
    ];
    for f in files {
        let x = std::fs::read(a.join(f)).unwrap();
        let y = std::fs::read(b.join(f)).unwrap();
        assert_eq!(x, y, "{f} differs");
    }

    // Floor rule at 8:2 on 500 per class: 400 train, 100 test per class.
    let test = load_csv(a.join("target_test.csv")).unwrap();
    assert_eq!(test.class_counts().unwrap(), vec![100; 4]);
    let train = load_csv(a.join("target_train.csv")).unwrap();
    assert!(train.labels().is_none());
    assert_eq!(train.len(), 1600);
    assert_eq!(load_labels_csv(a.join("target_train_truth.csv")).unwrap().len(), 1600);
    let src = load_csv(a.join("source_train.csv")).unwrap().len() + load_csv(a.join("source_val.csv")).unwrap().len();
    assert_eq!(src, 1600);
}

#[test]
fn refuses_non_empty_output_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    ok(&["gen-data", "--out", &s(&out)]);
    let second = dmapl(&["gen-data", "--out", &s(&out)]);
    assert_eq!(second.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&second.stderr).contains("not empty"));
    ok(&["gen-data", "--out", &s(&out), "--force"]);
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(dmapl(&["adapt", "--bogus"]).status.code(), Some(2));
    assert_eq!(dmapl(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(dmapl(&["--help"]).status.code(), Some(0));
}

#[test]
fn adapt_echoes_defaults_and_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    small_setup(root);
    let out = root.join("adapt");
    ok(&[
        "adapt",
        "--source-model", &s(&root.join("src/model.txt")),
        "--target-train", &s(&root.join("data/target_train.csv")),
        "--target-truth", &s(&root.join("data/target_train_truth.csv")),
        "--target-test", &s(&root.join("data/target_test.csv")),
        "--set", "adapt_epochs=3",
        "--set", "p_th=0.8",
        "--out", &s(&out),
    ]);
    for f in ["config.toml", "model.txt", "epochs.jsonl", "split.csv", "soft_labels.csv", "summary.json", "timing.json"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let cfg = TrainConfig::from_toml_str(&std::fs::read_to_string(out.join("config.toml")).unwrap()).unwrap();
    let expected = TrainConfig {
        adapt_epochs: 3,
        p_th: 0.8,
        ..TrainConfig::default()
    };
    assert_eq!(cfg, expected);
    let epochs = std::fs::read_to_string(out.join("epochs.jsonl")).unwrap();
    assert_eq!(epochs.lines().count(), 3);
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert!(summary["split"]["pl_accuracy"].as_f64().is_some());
    assert!(summary.get("wall_clock_secs").is_none());
}

#[test]
fn source_only_summary_matches_eval() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    small_setup(root);
    let out = root.join("adapt");
    ok(&[
        "adapt",
        "--source-model", &s(&root.join("src/model.txt")),
        "--target-train", &s(&root.join("data/target_train.csv")),
        "--target-test", &s(&root.join("data/target_test.csv")),
        "--mode", "source_only",
        "--out", &s(&out),
    ]);
    ok(&[
        "eval",
        "--model", &s(&root.join("src/model.txt")),
        "--test", &s(&root.join("data/target_test.csv")),
        "--out", &s(&root.join("eval")),
    ]);
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(root.join("eval/metrics.json")).unwrap()).unwrap();
    assert_eq!(summary["test_metrics"], metrics);
}

#[test]
fn domain_errors_report_module_message() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    small_setup(root);
    // An all-zero model predicts uniformly, so nothing is confident.
    let arch = ModelArch {
        input_dim: 2,
        hidden_dims: vec![4],
        bottleneck_dim: 3,
        num_classes: 4,
        bottleneck_activation: Activation::Relu,
    };
    let layers = arch.layer_shapes().into_iter().map(|(i, o)| Dense::zeros(i, o)).collect();
    let zero = root.join("zero.txt");
    Model::from_layers(arch, layers).unwrap().save(&zero).unwrap();
    let out = dmapl(&[
        "split",
        "--source-model", &s(&zero),
        "--target-train", &s(&root.join("data/target_train.csv")),
        "--out", &s(&root.join("split")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("no confident instances at threshold p_th=0.9"), "{err}");

    let bad = root.join("bad.csv");
    std::fs::write(&bad, "f0,f1\n1.0,2.0\n1.0,oops\n").unwrap();
    let out = dmapl(&[
        "split",
        "--source-model", &s(&root.join("src/model.txt")),
        "--target-train", &s(&bad),
        "--out", &s(&root.join("split2")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(":3:"), "{err}");

    let out = dmapl(&[
        "adapt",
        "--source-model", &s(&root.join("src/model.txt")),
        "--target-train", &s(&root.join("data/target_train.csv")),
        "--set", "p_th=1.5",
        "--out", &s(&root.join("adapt")),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn split_and_ablate_commands() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    small_setup(root);
    ok(&[
        "split",
        "--source-model", &s(&root.join("src/model.txt")),
        "--target-train", &s(&root.join("data/target_train.csv")),
        "--target-truth", &s(&root.join("data/target_train_truth.csv")),
        "--set", "p_th=0.8",
        "--out", &s(&root.join("split")),
    ]);
    let csv = std::fs::read_to_string(root.join("split/split.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 480);
    ok(&[
        "ablate",
        "--source-model", &s(&root.join("src/model.txt")),
        "--target-train", &s(&root.join("data/target_train.csv")),
        "--target-test", &s(&root.join("data/target_test.csv")),
        "--set", "adapt_epochs=2",
        "--set", "p_th=0.8",
        "--out", &s(&root.join("ablate")),
    ]);
    let table = std::fs::read_to_string(root.join("ablate/ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 5);
    assert!(root.join("ablate/dmapl/summary.json").exists());
}

#[test]
fn sweep_writes_aggregate_and_rejects_empty_grid() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let grid = root.join("grid.toml");
    std::fs::write(
        &grid,
        "seeds = [0, 1]\n[grid]\np_th = [0.8, 0.9]\n[base]\nsource_epochs = 5\nadapt_epochs = 2\n[benchmark]\nsamples_per_class = 100\n",
    )
    .unwrap();
    ok(&["sweep", "--grid", &s(&grid), "--jobs", "2", "--out", &s(&root.join("sweep"))]);
    let csv = std::fs::read_to_string(root.join("sweep/sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "p_th,ratio,pl_acc,test_acc,seed,error");
    assert_eq!(lines.count(), 4);
    assert!(root.join("sweep/config.toml").exists());

    let empty = root.join("empty.toml");
    std::fs::write(&empty, "[grid]\n").unwrap();
    let out = dmapl(&["sweep", "--grid", &s(&empty), "--out", &s(&root.join("sweep2"))]);
    assert_eq!(out.status.code(), Some(1));
    let malformed = root.join("bad.toml");
    std::fs::write(&malformed, "[grid\np_th = [").unwrap();
    let out = dmapl(&["sweep", "--grid", &s(&malformed), "--out", &s(&root.join("sweep3"))]);
    assert_eq!(out.status.code(), Some(1));
}
