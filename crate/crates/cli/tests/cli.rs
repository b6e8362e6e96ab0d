//! End-to-end tests of the `cmvqa` binary: help text, exit codes and file outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cmvqa::eval::PredictionRecord;

const BIN: &str = env!("CARGO_BIN_EXE_cmvqa");

/// Small model and dataset settings that keep each invocation under a few seconds.
const TINY: &[&str] = &[
    "image_size=16",
    "branch_patch=4",
    "epochs_total=2",
    "epochs_detector=1",
    "batch_size=8",
];

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn cmvqa")
}

fn with_tiny(mut args: Vec<&str>) -> Vec<&str> {
    for o in TINY {
        args.extend(["--set", o]);
    }
    args
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen_tiny(dir: &Path, n: usize) {
    let n = n.to_string();
    let o = run(&with_tiny(vec!["gen", "--out", path(dir), "--n", &n, "--seed", "5"]));
    assert!(o.status.success(), "{}", stderr(&o));
}

/// Compares against `tests/golden/<name>.txt`; set `UPDATE_GOLDEN=1` to rewrite the file.
fn golden(name: &str, actual: &str) {
    let file: PathBuf = [env!("CARGO_MANIFEST_DIR"), "tests", "golden", &format!("{name}.txt")]
        .iter()
        .collect();
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        fs::write(&file, actual).unwrap();
        return;
    }
    let expected = fs::read_to_string(&file).unwrap_or_else(|e| panic!("{}: {e}", file.display()));
    assert_eq!(
        actual, expected,
        "help text for {name} changed; rerun with UPDATE_GOLDEN=1 if intended"
    );
}

#[test]
fn help_matches_golden_files() {
    let o = run(&["--help"]);
    assert!(o.status.success());
    golden("help", &stdout(&o));
    for sub in ["gen", "train", "eval", "ablate", "gradcheck", "inspect"] {
        let o = run(&[sub, "--help"]);
        assert!(o.status.success(), "{sub}");
        golden(&format!("help_{sub}"), &stdout(&o));
    }
}

#[test]
fn gen_is_deterministic_and_reports_the_tamper_split() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for dir in [a.path(), b.path()] {
        let o = run(&with_tiny(vec!["gen", "--out", path(dir), "--n", "100", "--seed", "7"]));
        assert!(o.status.success(), "{}", stderr(&o));
        outputs.push(stdout(&o));
    }
    let manifest = |d: &Path| fs::read(d.join("manifest.json")).unwrap();
    assert_eq!(manifest(a.path()), manifest(b.path()));
    assert!(outputs[0].contains("tampered 86 / clean 14"), "{}", outputs[0]);
    for category in ["airplane", "ship", "vehicle"] {
        assert!(outputs[0].contains(category), "{}", outputs[0]);
    }
}

#[test]
fn gen_rejects_zero_samples() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["gen", "--out", path(&dir.path().join("d")), "--n", "0"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn gen_refuses_a_non_empty_directory_without_force() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("keep.txt"), "x").unwrap();
    let args = with_tiny(vec!["gen", "--out", path(dir.path()), "--n", "5"]);
    let o = run(&args);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--force"), "{}", stderr(&o));
    let mut forced = args.clone();
    forced.push("--force");
    assert!(run(&forced).status.success());
}

#[test]
fn unknown_override_is_an_invalid_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["gen", "--out", path(dir.path()), "--set", "no_such_key=1"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("no_such_key"));
}

#[test]
fn missing_inputs_exit_with_two_and_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent");
    let o = run(&[
        "train",
        "--data",
        path(&missing),
        "--out",
        path(&dir.path().join("run")),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("absent"), "{}", stderr(&o));

    let missing_config = dir.path().join("nope.toml");
    let o = run(&[
        "gen",
        "--out",
        path(&dir.path().join("d")),
        "--config",
        path(&missing_config),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn untrained_checkpoint_answers_near_chance() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run_dir = dir.path().join("run");
    gen_tiny(&data, 40);
    let o = run(&with_tiny(vec![
        "train",
        "--data",
        path(&data),
        "--out",
        path(&run_dir),
        "--set",
        "epochs_total=0",
        "--set",
        "epochs_detector=0",
    ]));
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(&[
        "eval",
        "--data",
        path(&data),
        "--run",
        path(&run_dir),
        "--split",
        "train",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let oa: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("OA "))
        .and_then(|l| l.split_whitespace().next())
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| panic!("no OA line in {out}"));
    assert!((0.0..=100.0).contains(&oa), "OA {oa}");
    assert!(out.contains("| basic"), "{out}");
    assert!(run_dir.join("gating.jsonl").exists());

    // Raw OA tracks the skewed answer marginals, so chance is measured with every answer weighted equally.
    let mut per_answer: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for line in fs::read_to_string(run_dir.join("predictions.jsonl")).unwrap().lines() {
        let p: PredictionRecord = serde_json::from_str(line).unwrap();
        let e = per_answer.entry(p.true_id).or_default();
        e.0 += usize::from(p.predicted_id == p.true_id);
        e.1 += 1;
    }
    let balanced = per_answer.values().map(|&(hit, n)| hit as f64 / n as f64).sum::<f64>() / per_answer.len() as f64;
    assert!(
        (balanced - 0.02).abs() <= 0.03,
        "answer-balanced accuracy {balanced:.4} (OA {oa})"
    );
}

#[test]
fn train_eval_inspect_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run_dir = dir.path().join("run");
    gen_tiny(&data, 30);
    let o = run(&with_tiny(vec![
        "train",
        "--data",
        path(&data),
        "--out",
        path(&run_dir),
    ]));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("best epoch"));
    let reports = fs::read_to_string(run_dir.join("epochs.csv")).unwrap();
    assert_eq!(reports.lines().count(), 3, "{reports}");

    let o = run(&[
        "eval",
        "--data",
        path(&data),
        "--run",
        path(&run_dir),
        "--checkpoint",
        "last",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    let masks = dir.path().join("masks");
    let o = run(&[
        "inspect",
        "--data",
        path(&data),
        "--run",
        path(&run_dir),
        "--sample",
        "0",
        "--out",
        path(&masks),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for which in ["source", "tampered", "background"] {
        assert!(masks.join(format!("pred_{which}.pgm")).exists());
    }
    let o = run(&[
        "inspect",
        "--data",
        path(&data),
        "--run",
        path(&run_dir),
        "--sample",
        "999",
        "--out",
        path(&masks),
    ]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn eval_without_a_run_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen_tiny(&data, 10);
    let o = run(&["eval", "--data", path(&data), "--run", path(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn ablate_alpha_writes_seven_rows() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen_tiny(&data, 20);
    let csv = dir.path().join("out/alpha.csv");
    let o = run(&with_tiny(vec![
        "ablate",
        "--data",
        path(&data),
        "--axis",
        "alpha",
        "--seeds",
        "0",
        "--out",
        path(&csv),
        "--set",
        "epochs_total=1",
        "--set",
        "epochs_detector=1",
    ]));
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("axis,label"));
    assert_eq!(lines.count(), 7, "{text}");
}

#[test]
fn ablate_rejects_an_unknown_axis() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen_tiny(&data, 10);
    let csv = dir.path().join("x.csv");
    let o = run(&["ablate", "--data", path(&data), "--axis", "depth", "--out", path(&csv)]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes_and_validates_its_arguments() {
    let o = run(&["gradcheck", "--instances", "2", "--seed", "3"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("0 failed"));
    let o = run(&["gradcheck", "--instances", "0"]);
    assert_eq!(o.status.code(), Some(3));
}
