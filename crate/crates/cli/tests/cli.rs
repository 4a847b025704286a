use std::path::Path;
use std::process::{Command, Output};

fn tomnet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tomnet"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: &str = "\
run.out = run
fleet.suv = 2
fleet.sport = 0
fleet.gt = 0
fleet.track = 2
fleet.test = 2
excitation.length = 240
train.epochs = 2
train.seq_len = 20
train.stride = 20
train.embed_dim = 4
analysis.samples_per_machine = 3
";

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = tomnet(&["frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error:"));
    assert!(stderr(&o).contains("Usage:"));
}

#[test]
fn missing_subcommand_and_bad_flag_values_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(tomnet(&[], dir.path()).status.code(), Some(2));
    assert_eq!(tomnet(&["eval", "--split", "dev"], dir.path()).status.code(), Some(2));
    assert_eq!(tomnet(&["plot", "--tag", "colour"], dir.path()).status.code(), Some(2));
    assert_eq!(tomnet(&["--threads", "0", "gradcheck"], dir.path()).status.code(), Some(2));
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let o = tomnet(&["--help"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("repro"));
}

#[test]
fn train_on_missing_data_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = tomnet(&["train", "--data", "no/such/dataset"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    let line = err.lines().find(|l| l.starts_with("error:")).expect("error line");
    assert!(line.contains("no/such/dataset"), "{line}");
}

#[test]
fn bad_config_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.conf"), "train.epoch = 3\n").unwrap();
    let o = tomnet(&["--config", "c.conf", "gen"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("unknown key `train.epoch`"));
}

#[test]
fn gradcheck_passes_on_reference_model() {
    let dir = tempfile::tempdir().unwrap();
    let o = tomnet(&["gradcheck", "--seed", "7", "--embed-dim", "4", "--seq-len", "8"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    let value: f64 = out.split_whitespace().nth(3).unwrap().parse().unwrap();
    assert!(out.starts_with("max rel err") && value < 1e-5, "{out}");
}

fn run_flow(dir: &Path, threads: &str) {
    std::fs::write(dir.join("small.conf"), SMALL).unwrap();
    let steps: &[&[&str]] = &[
        &["gen"],
        &["train"],
        &["eval", "--split", "test", "--out", "run/eval.json"],
        &["embed"],
        &["pca"],
        &["plot", "--tag", "year-bucket"],
        &["plot"],
    ];
    for step in steps {
        let mut args = vec!["--config", "small.conf", "--threads", threads];
        args.extend_from_slice(step);
        let o = tomnet(&args, dir);
        assert_eq!(o.status.code(), Some(0), "{step:?}: {}", stderr(&o));
    }
}

#[test]
fn pipeline_steps_are_reproducible_across_thread_counts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_flow(a.path(), "1");
    run_flow(b.path(), "3");
    for file in [
        "dataset/manifest.json",
        "model/model.json",
        "model/metrics.json",
        "eval.json",
        "embeddings.json",
        "projections.json",
        "plots/pca_class.svg",
        "plots/pca_class.csv",
        "plots/pca_year-bucket.svg",
    ] {
        let read = |d: &Path| std::fs::read(d.join("run").join(file)).unwrap_or_else(|e| panic!("{file}: {e}"));
        assert_eq!(read(a.path()), read(b.path()), "{file} differs");
    }
    let csv = std::fs::read_to_string(a.path().join("run/plots/pca_class.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4 * 3);
}

#[test]
fn eval_to_stdout_reports_split() {
    let dir = tempfile::tempdir().unwrap();
    run_flow(dir.path(), "2");
    let o = tomnet(&["--config", "small.conf", "eval", "--split", "train"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["split"], "train");
    assert_eq!(v["per_machine"].as_array().unwrap().len(), 2);
}
