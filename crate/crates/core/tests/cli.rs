//! The `sasv` binary: files written, outputs and exit codes.

mod common;

use std::fs;
use std::path::Path;

use common::{field, run_pipeline, sasv, sasv_ok, stderr, stdout};
use sasv_core::dataio::{load_checkpoint, read_scores};
use sasv_core::graph::ModelParams;

fn p(path: &Path) -> String {
    path.display().to_string()
}

/// A small corpus so that training runs take well under a second.
fn small_corpus(dir: &Path, extra: &[&str]) {
    let mut args = vec![
        "synth", "--preset", "easy", "--n-speakers", "10", "--utts-per-speaker", "4", "--d-asv", "8", "--d-cm",
        "6",
    ];
    args.extend_from_slice(extra);
    let out = p(dir);
    args.extend_from_slice(&["--out", &out]);
    sasv_ok(&args).unwrap();
}

fn train_small(data: &Path, out: &Path, extra: &[&str]) -> String {
    let mut args: Vec<String> = [
        "train", "--asv", &p(&data.join("asv.semb")), "--cm", &p(&data.join("cm.semb")), "--train-trials",
        &p(&data.join("train.trl")), "--dev-trials", &p(&data.join("dev.trl")), "--h1", "8", "--h2", "4",
        "--batch-size", "16", "--out", &p(out),
    ]
    .map(String::from)
    .to_vec();
    args.extend(extra.iter().map(|s| s.to_string()));
    sasv_ok(&args).unwrap()
}

fn score_small(data: &Path, model: &Path, scores: &Path, extra: &[&str]) -> std::process::Output {
    let mut args: Vec<String> = [
        "score", "--model", &p(model), "--asv", &p(&data.join("asv.semb")), "--cm", &p(&data.join("cm.semb")),
        "--trials", &p(&data.join("dev.trl")), "--out", &p(scores),
    ]
    .map(String::from)
    .to_vec();
    args.extend(extra.iter().map(|s| s.to_string()));
    sasv(&args)
}

#[test]
fn synth_writes_four_files_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    small_corpus(&a, &["--seed", "3"]);
    small_corpus(&b, &["--seed", "3"]);
    small_corpus(&c, &["--seed", "4"]);
    for f in ["asv.semb", "cm.semb", "train.trl", "dev.trl"] {
        let (x, y, z) = (fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), fs::read(c.join(f)).unwrap());
        assert_eq!(x, y, "{f} differs for the same seed");
        assert_ne!(x, z, "{f} ignores the seed");
    }
}

#[test]
fn unknown_preset_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = sasv(["synth", "--preset", "medium-rare", "--out", &p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("medium-rare"), "{}", stderr(&out));
}

#[test]
fn bad_flags_and_help() {
    assert_eq!(sasv(["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(sasv(["frobnicate"]).status.code(), Some(2));
    let help = sasv(["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(stdout(&help).contains("synth"));
}

#[test]
fn train_score_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    small_corpus(&data, &[]);
    let run = dir.path().join("run");
    let train_out = train_small(&data, &run, &["--epochs", "3"]);
    let log = fs::read_to_string(run.join("train_log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 4, "{log}");

    let scores = dir.path().join("dev.scores");
    let out = score_small(&data, &run.join("model.smdl"), &scores, &["--dump-branch"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(read_scores(&scores).unwrap().len(), fs::read_to_string(data.join("dev.trl")).unwrap().lines().count());
    let branch = fs::read_to_string(dir.path().join("dev.scores.branch.tsv")).unwrap();
    assert!(branch.starts_with("enrol\ttest\ts_sasv\ts_asv_cal\ts_cm_cal\n"));

    let det = dir.path().join("det.tsv");
    let eval = sasv_ok(["eval", "--scores", &p(&scores), "--trials", &p(&data.join("dev.trl")), "--det", &p(&det)]).unwrap();
    let trained: f64 = field(&train_out, "dev min_adcf").unwrap().parse().unwrap();
    let evaluated: f64 = field(&eval, "min_adcf").unwrap().parse().unwrap();
    assert!((trained - evaluated).abs() <= 1e-9, "{trained} vs {evaluated}");
    assert!(fs::read_to_string(&det).unwrap().starts_with("p_miss\tp_fa_non\tp_fa_spf\ttau\n"));
}

#[test]
fn zero_epochs_writes_the_initial_model() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    small_corpus(&data, &[]);
    let run = dir.path().join("run");
    train_small(&data, &run, &["--epochs", "0", "--seed", "5"]);
    let log = fs::read_to_string(run.join("train_log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 1, "header only: {log}");
    let ckpt = load_checkpoint(run.join("model.smdl")).unwrap();
    assert_eq!(ckpt.meta("selected_epoch").unwrap(), "0");
    let params = ModelParams::from_checkpoint(&ckpt).unwrap();
    let init = ModelParams::init(params.shape(), params.rho_mode(), 5).unwrap().quantized();
    assert_eq!(params.values(), init.values());
}

#[test]
fn rho_zero_scores_are_the_calibrated_asv_scores() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    small_corpus(&data, &[]);
    let run = dir.path().join("run");
    train_small(&data, &run, &["--epochs", "2", "--rho", "0"]);
    let scores = dir.path().join("s");
    assert!(score_small(&data, &run.join("model.smdl"), &scores, &["--dump-branch"]).status.success());
    let branch = fs::read_to_string(dir.path().join("s.branch.tsv")).unwrap();
    for line in branch.lines().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        assert_eq!(f[2], f[3], "{line}");
    }
}

#[test]
fn score_refuses_mismatched_embeddings() {
    let dir = tempfile::tempdir().unwrap();
    let (data, other) = (dir.path().join("data"), dir.path().join("other"));
    small_corpus(&data, &[]);
    sasv_ok(["synth", "--n-speakers", "10", "--utts-per-speaker", "4", "--d-asv", "9", "--d-cm", "6", "--out", &p(&other)])
        .unwrap();
    let run = dir.path().join("run");
    train_small(&data, &run, &["--epochs", "1"]);
    let out = sasv([
        "score", "--model", &p(&run.join("model.smdl")), "--asv", &p(&other.join("asv.semb")), "--cm",
        &p(&data.join("cm.semb")), "--trials", &p(&data.join("dev.trl")), "--out", &p(&dir.path().join("s")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains('9') && stderr(&out).contains('8'), "{}", stderr(&out));
}

#[test]
fn eval_of_a_perfect_system_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let trials = dir.path().join("t.trl");
    let scores = dir.path().join("t.scores");
    fs::write(&trials, "e a target\ne b nontarget\ne c spoof\n").unwrap();
    fs::write(&scores, "e\tc\t0.000000\ne\ta\t1.000000\ne\tb\t-1.000000\n").unwrap();
    let out = sasv_ok(["eval", "--scores", &p(&scores), "--trials", &p(&trials)]).unwrap();
    assert_eq!(field(&out, "min_adcf").unwrap().parse::<f64>().unwrap(), 0.0);
    assert!(field(&out, "trials").unwrap().starts_with("3 "));
}

#[test]
fn eval_names_a_trial_without_score() {
    let dir = tempfile::tempdir().unwrap();
    let trials = dir.path().join("t.trl");
    let scores = dir.path().join("t.scores");
    fs::write(&trials, "e a target\ne lost nontarget\n").unwrap();
    fs::write(&scores, "e\ta\t1.0\n").unwrap();
    let out = sasv(["eval", "--scores", &p(&scores), "--trials", &p(&trials)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("lost"), "{}", stderr(&out));
}

#[test]
fn inspect_knows_both_binary_formats() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    small_corpus(&data, &[]);
    let out = sasv_ok(["inspect", &p(&data.join("asv.semb"))]).unwrap();
    assert!(out.contains('8'), "{out}");
    let run = dir.path().join("run");
    train_small(&data, &run, &["--epochs", "1"]);
    assert!(sasv(["inspect", &p(&run.join("model.smdl"))]).status.success());

    let junk = dir.path().join("junk.bin");
    fs::write(&junk, b"NOPE\x01\x00\x00\x00").unwrap();
    let out = sasv(["inspect", &p(&junk)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!stderr(&out).is_empty());
}

#[test]
fn full_pipeline_helper_runs() {
    let dir = tempfile::tempdir().unwrap();
    let run = run_pipeline(dir.path(), "easy", 0, 2).unwrap();
    assert!(run.model().exists() && run.scores().exists());
    assert!((0.0..=1.0).contains(&run.min_adcf_norm()));
}
