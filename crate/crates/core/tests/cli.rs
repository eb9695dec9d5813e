mod common;

use std::path::Path;
use std::process::{Command, Output};

use anchorft::harness::RunResults;
use common::small_experiment;

fn run(out: &Path, config: Option<&Path>, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_anchorft"));
    cmd.arg("--out").arg(out);
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.args(args).output().unwrap()
}

fn ok(out: &Path, config: Option<&Path>, args: &[&str]) {
    let o = run(out, config, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

fn write_small_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("small.json");
    std::fs::write(&path, serde_json::to_string_pretty(&small_experiment(21)).unwrap()).unwrap();
    path
}

#[test]
fn full_command_chain_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_small_config(dir.path());
    let c = Some(cfg.as_path());
    ok(&out, c, &["gen-data"]);
    ok(&out, c, &["pretrain"]);
    ok(&out, c, &["extract-targets"]);
    ok(&out, c, &["finetune", "--lambda-emb", "1", "--lambda-theta", "10"]);
    ok(&out, c, &["evaluate"]);
    ok(&out, c, &["grid-search", "--preset", "all"]);
    ok(&out, c, &["sweep", "--axis", "lambda-emb", "--values", "0,100"]);
    ok(&out, c, &["wise-ft", "--alpha", "0.5"]);
    let results = out.join("grid-search/results.json");
    ok(&out, c, &["report", "--results", results.to_str().unwrap()]);

    for file in [
        "experiment.json",
        "pretrained/params.bin",
        "targets-generic-a.bin",
        "finetune/history.csv",
        "finetune/params.bin",
        "results.json",
        "report.md",
        "grid-search/report.md",
        "grid-search/presets.json",
        "sweep/curves.csv",
        "wise-ft/results.json",
    ] {
        assert!(out.join(file).is_file(), "missing {file}");
    }
    let history = std::fs::read_to_string(out.join("finetune/history.csv")).unwrap();
    assert!(history.starts_with("step,in_domain,ood,composite"), "{history}");
    let grid = RunResults::load(&results).unwrap();
    assert!(grid.reference.is_some());
    let methods: Vec<&str> = grid.trials.iter().map(|t| t.label.as_str()).collect();
    for preset in ["standard", "l2sp-only", "embed-only-generic", "embed-only-indomain", "wise-ft", "ours"] {
        assert!(methods.iter().any(|m| m.starts_with(preset)), "{preset} missing from {methods:?}");
    }
    let md = std::fs::read_to_string(out.join("grid-search/report.md")).unwrap();
    assert!(md.starts_with("| Method | (lambda_emb, lambda_theta) |"), "{md}");
}

#[test]
fn invalid_config_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_experiment(1);
    cfg.finetune.eval_every = 0;
    let path = dir.path().join("bad.json");
    std::fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let o = run(dir.path(), Some(&path), &["gen-data"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));

    std::fs::write(&path, "{ not json").unwrap();
    assert_eq!(run(dir.path(), Some(&path), &["gen-data"]).status.code(), Some(2));
}

#[test]
fn alpha_outside_unit_interval_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_small_config(dir.path());
    let out = dir.path().join("out");
    ok(&out, Some(&cfg), &["pretrain"]);
    ok(&out, Some(&cfg), &["extract-targets"]);
    ok(&out, Some(&cfg), &["finetune"]);
    let o = run(&out, Some(&cfg), &["wise-ft", "--alpha", "1.5"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn report_without_reference_fails() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("results.json");
    RunResults { reference: None, trials: vec![] }.save(&path).unwrap();
    let o = run(dir.path(), None, &["report", "--results", path.to_str().unwrap()]);
    assert!(!o.status.success());
}
