use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use backdep::ModelConfig;

const TINY: &[&str] = &[
    "--d-model",
    "8",
    "--heads",
    "2",
    "--layers",
    "2",
    "--steps",
    "3",
    "--batch-size",
    "4",
    "--any-batch-size",
];

fn backdep(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_backdep"))
        .current_dir(dir)
        .env_remove("BACKDEP_OUT_DIR")
        .env("RUST_LOG", "off")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = backdep(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn with_data() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &[
            "--out-dir", "data", "gen-data", "--triplets", "24", "--pairs", "20", "--conditional", "4", "--sentences",
            "12", "--groups", "3", "--captions", "3",
        ],
    );
    dir
}

fn train(dir: &Path, out: &str, extra: &[&str]) -> String {
    let mut args = vec!["--out-dir", out, "train", "--triplets", "data/triplets.tsv"];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    ok(dir, &args)
}

#[test]
fn same_seed_gives_identical_loss_files() {
    let dir = with_data();
    train(dir.path(), "a", &[]);
    train(dir.path(), "b", &[]);
    let a = fs::read(dir.path().join("a/loss.csv")).unwrap();
    let b = fs::read(dir.path().join("b/loss.csv")).unwrap();
    assert_eq!(a, b);
    assert!(String::from_utf8(a).unwrap().starts_with("step,loss\n1,"));
    assert_eq!(
        fs::read(dir.path().join("a/model.ckpt")).unwrap(),
        fs::read(dir.path().join("b/model.ckpt")).unwrap()
    );
    train(dir.path(), "c", &["--seed", "7"]);
    assert_ne!(fs::read(dir.path().join("c/loss.csv")).unwrap(), fs::read(dir.path().join("a/loss.csv")).unwrap());
}

#[test]
fn gold_as_predictions_scores_one() {
    let dir = with_data();
    let pairs = fs::read_to_string(dir.path().join("data/sts.tsv")).unwrap();
    let gold: String = pairs.lines().map(|l| format!("{}\n", l.split('\t').nth(2).unwrap())).collect();
    fs::write(dir.path().join("pred.txt"), gold).unwrap();
    let out = ok(dir.path(), &["eval-sts", "--pairs", "data/sts.tsv", "--predictions", "pred.txt"]);
    assert_eq!(out.trim(), "rho=1.000000");
}

#[test]
fn single_layer_model_degrades_to_one_point() {
    let dir = with_data();
    let mut args = vec!["--out-dir", "m", "train", "--triplets", "data/triplets.tsv", "--turning-point", "1"];
    args.extend_from_slice(TINY);
    let layers = args.iter().position(|a| *a == "--layers").unwrap();
    args[layers + 1] = "1";
    ok(dir.path(), &args);
    let out = ok(
        dir.path(),
        &["--out-dir", "m", "degrade", "--checkpoint", "m/model.ckpt", "--pairs", "data/sts.tsv"],
    );
    assert_eq!(out.lines().filter(|l| l.starts_with("layers=")).count(), 1);
    assert!(out.contains("turning_point=1\tdrop=0.000000"), "{out}");
    let csv = fs::read_to_string(dir.path().join("m/degradation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(fs::read_to_string(dir.path().join("m/degradation.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn ablation_reports_both_strategies() {
    let dir = with_data();
    let mut args = vec!["--out-dir", "abl", "ablate", "--triplets", "data/triplets.tsv", "--pairs", "data/sts.tsv"];
    args.extend_from_slice(TINY);
    let out = ok(dir.path(), &args);
    let rows: Vec<Vec<&str>> = out.lines().skip(1).map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][0], "modification");
    assert_eq!(rows[1][0], "addition");
    let layer = ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        ..ModelConfig::default()
    }
    .layer_param_count();
    assert_eq!(rows[0][1], "0");
    assert_eq!(rows[1][1], layer.to_string());
    assert!(dir.path().join("abl/ablation.csv").exists());
}

#[test]
fn analysis_commands_write_their_reports() {
    let dir = with_data();
    train(dir.path(), "m", &[]);
    let out = ok(
        dir.path(),
        &["--out-dir", "m", "analyze-dep", "--checkpoint", "m/model.ckpt", "--sentences", "data/sentences.txt"],
    );
    assert!(out.starts_with("checkpoint-plan\tmean="));
    let csv = fs::read_to_string(dir.path().join("m/dependency.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 12);
    assert!(dir.path().join("m/dependency.svg").exists());

    let out = ok(dir.path(), &["--out-dir", "m", "retrieve", "--checkpoint", "m/model.ckpt", "--corpus", "data/corpus.tsv"]);
    assert!(out.starts_with("strict_accuracy="));
    assert_eq!(fs::read_to_string(dir.path().join("m/retrieval.tsv")).unwrap().lines().count(), 4);

    ok(dir.path(), &["--out-dir", "m", "embed", "--checkpoint", "m/model.ckpt", "--sentences", "data/sentences.txt"]);
    let out = ok(
        dir.path(),
        &["anisotropy", "--data", "m/embeddings.tsv", "--left", "m/embeddings.tsv", "--right", "m/embeddings.tsv"],
    );
    assert!(out.starts_with("alignment=0.000000\nuniformity=-"), "{out}");

    let labels: String = (0..12).map(|i| format!("{}\n", i % 2)).collect();
    fs::write(dir.path().join("labels.txt"), labels).unwrap();
    let out = ok(
        dir.path(),
        &[
            "probe", "--train-embeddings", "m/embeddings.tsv", "--train-labels", "labels.txt", "--test-embeddings",
            "m/embeddings.tsv", "--test-labels", "labels.txt",
        ],
    );
    assert!(out.starts_with("accuracy="));
}

#[test]
fn output_directory_comes_from_the_environment() {
    let dir = with_data();
    let out = Command::new(env!("CARGO_BIN_EXE_backdep"))
        .current_dir(dir.path())
        .env("BACKDEP_OUT_DIR", "from-env")
        .args(["train", "--triplets", "data/triplets.tsv"])
        .args(TINY)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("from-env/loss.csv").exists());
}

#[test]
fn config_file_is_honoured_and_typos_rejected() {
    let dir = with_data();
    fs::write(
        dir.path().join("run.toml"),
        "out_dir = \"cfg-out\"\n[model]\nd_model = 8\nn_heads = 2\nn_layers = 2\n[train]\nsteps = 2\nbatch_size = 16\n[data]\ntriplets = \"data/triplets.tsv\"\n",
    )
    .unwrap();
    ok(dir.path(), &["train", "--config", "run.toml"]);
    let losses = fs::read_to_string(dir.path().join("cfg-out/loss.csv")).unwrap();
    assert_eq!(losses.lines().count(), 3);

    fs::write(dir.path().join("bad.toml"), "[train]\nlearnig_rate = 0.1\n").unwrap();
    let out = backdep(dir.path(), &["train", "--config", "bad.toml"]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error[config]:"), "{err}");
}

#[test]
fn failures_print_one_tagged_line() {
    let dir = with_data();
    for (args, kind) in [
        (vec!["eval-sts", "--pairs", "missing.tsv", "--predictions", "x"], "io"),
        (vec!["train", "--triplets", "data/triplets.tsv", "--batch-size", "20"], "config"),
        (vec!["analyze-dep", "--checkpoint", "data/sts.tsv", "--sentences", "data/sentences.txt"], "corrupt"),
    ] {
        let out = backdep(dir.path(), &args);
        assert!(!out.status.success(), "{args:?}");
        let err = String::from_utf8(out.stderr).unwrap();
        assert_eq!(err.lines().count(), 1, "{err}");
        assert!(err.starts_with(&format!("error[{kind}]: ")), "{err}");
    }
    let out = backdep(dir.path(), &["eval-sts", "--pairs", "missing.tsv", "--predictions", "x"]);
    assert!(String::from_utf8(out.stderr).unwrap().contains("missing.tsv"));
    fs::write(dir.path().join("broken.tsv"), "a\tb\tnot-a-number\n").unwrap();
    fs::write(dir.path().join("p.txt"), "1\n").unwrap();
    let out = backdep(dir.path(), &["eval-sts", "--pairs", "broken.tsv", "--predictions", "p.txt"]);
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error[parse]: broken.tsv:1:"));
}
