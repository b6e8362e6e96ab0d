//! Training orchestration on a miniature dataset: freeze boundary, loss bookkeeping,
//! determinism, run directories, and evaluation tallies.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use cmvqa::config::RunConfig;
use cmvqa::eval::{evaluate, majority_answers, majority_baseline, write_jsonl};
use cmvqa::nn::ParamGroup;
use cmvqa::synth::{Dataset, Split};
use cmvqa::train::{load_run, reports_csv, save_run, train, BEST_CHECKPOINT, LAST_CHECKPOINT};

fn tiny(extra: &[&str]) -> RunConfig {
    let mut overrides: Vec<String> = [
        "image_size=16",
        "dataset_size=40",
        "branch_patch=4",
        "epochs_total=4",
        "epochs_detector=2",
        "batch_size=8",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    overrides.extend(extra.iter().map(|s| s.to_string()));
    RunConfig::from_toml("", &overrides).unwrap()
}

fn dataset() -> &'static Dataset {
    static DATA: OnceLock<Dataset> = OnceLock::new();
    DATA.get_or_init(|| Dataset::generate(40, 0.862, 3, 16).unwrap())
}

#[test]
fn detector_is_frozen_after_the_boundary() {
    let cfg = tiny(&[]);
    let out = train(dataset(), &cfg, |_| {}).unwrap();
    let hashes: Vec<u64> = out.reports.iter().map(|r| r.detector_hash).collect();
    assert_ne!(hashes[0], hashes[1], "detector trains before the boundary");
    assert_eq!(hashes[2], hashes[3], "detector frozen after the boundary");
    assert_eq!(hashes[1], hashes[3], "first frozen epoch leaves the detector untouched");
    assert_eq!(out.last.fingerprint(ParamGroup::Detector), hashes[3]);
    assert_ne!(out.reports[2].lr_rest, 0.0);
    assert_eq!(out.reports[2].lr_detector, 0.0);
}

#[test]
fn equal_epoch_counts_never_freeze() {
    let cfg = tiny(&["epochs_total=2", "epochs_detector=2"]);
    let out = train(dataset(), &cfg, |_| {}).unwrap();
    assert_ne!(out.reports[0].detector_hash, out.reports[1].detector_hash);
}

#[test]
fn reported_total_reconstructs_from_components() {
    let cfg = tiny(&["alpha=0.4"]);
    let out = train(dataset(), &cfg, |_| {}).unwrap();
    for r in &out.reports {
        let want = 0.4 * r.rmse + 0.6 * r.vqa + r.balance;
        assert!(
            (r.total - want).abs() <= 1e-10,
            "epoch {}: {} vs {want}",
            r.epoch,
            r.total
        );
        assert!((0.0..=1.0).contains(&r.val_oa) && (0.0..=1.0).contains(&r.val_aa));
    }
}

#[test]
fn identical_configs_give_identical_reports() {
    let cfg = tiny(&["epochs_total=2", "epochs_detector=1"]);
    let a = train(dataset(), &cfg, |_| {}).unwrap();
    let b = train(dataset(), &cfg, |_| {}).unwrap();
    assert_eq!(reports_csv(&a.reports), reports_csv(&b.reports));
    let other = train(dataset(), &RunConfig { seed: 9, ..cfg }, |_| {}).unwrap();
    assert_ne!(reports_csv(&a.reports), reports_csv(&other.reports));
}

#[test]
fn detector_only_leaves_the_rest_untouched() {
    let cfg = tiny(&["detector_only=true", "epochs_total=2", "epochs_detector=2"]);
    let out = train(dataset(), &cfg, |_| {}).unwrap();
    let (_, initial) = cmvqa::model::Model::new(16, cfg.dims(), cfg.moe(), cfg.seed).unwrap();
    assert_eq!(
        out.last.fingerprint(ParamGroup::Rest),
        initial.fingerprint(ParamGroup::Rest)
    );
    assert_ne!(
        out.last.fingerprint(ParamGroup::Detector),
        initial.fingerprint(ParamGroup::Detector)
    );
    assert!(out.reports.iter().all(|r| r.vqa == 0.0 && r.total == r.rmse));
}

#[test]
fn run_directory_round_trips() {
    let cfg = tiny(&["epochs_total=2", "epochs_detector=1"]);
    let out = train(dataset(), &cfg, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_run(dir.path(), &cfg, &out).unwrap();
    for (file, store) in [(BEST_CHECKPOINT, &out.best), (LAST_CHECKPOINT, &out.last)] {
        let (loaded_cfg, model, loaded) = load_run(dir.path(), file).unwrap();
        assert_eq!(loaded_cfg, cfg);
        let a = evaluate(&model, &loaded, dataset(), Split::Test).unwrap();
        let b = evaluate(&out.model, store, dataset(), Split::Test).unwrap();
        assert_eq!(a.predictions, b.predictions);
    }
    let csv = std::fs::read_to_string(dir.path().join("epochs.csv")).unwrap();
    assert_eq!(csv, reports_csv(&out.reports));
}

#[test]
fn missing_splits_and_size_mismatch_are_config_errors() {
    let one = Dataset::generate(1, 1.0, 0, 16).unwrap();
    assert!(matches!(train(&one, &tiny(&[]), |_| {}), Err(cmvqa::Error::Config(_))));
    let cfg = tiny(&["image_size=32"]);
    assert!(matches!(train(dataset(), &cfg, |_| {}), Err(cmvqa::Error::Config(_))));
}

#[test]
fn exported_predictions_recount_to_the_same_scores() {
    let cfg = tiny(&["epochs_total=1", "epochs_detector=1"]);
    let out = train(dataset(), &cfg, |_| {}).unwrap();
    let report = evaluate(&out.model, &out.best, dataset(), Split::Test).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("predictions.jsonl");
    write_jsonl(&path, &report.predictions).unwrap();

    let mut per: BTreeMap<u64, (usize, usize)> = BTreeMap::new();
    for line in std::fs::read_to_string(&path).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let e = per.entry(v["category"].as_u64().unwrap()).or_default();
        e.0 += usize::from(v["predicted_id"] == v["true_id"]);
        e.1 += 1;
    }
    let correct: usize = per.values().map(|e| e.0).sum();
    let total: usize = per.values().map(|e| e.1).sum();
    let aa = per.values().map(|&(c, n)| c as f64 / n as f64).sum::<f64>() / per.len() as f64;
    assert!((report.oa() - correct as f64 / total as f64).abs() < 1e-15);
    assert!((report.aa() - aa).abs() < 1e-12);
}

#[test]
fn majority_baseline_predicts_the_training_mode() {
    let d = dataset();
    let modes = majority_answers(d, Split::Train);
    let tally = majority_baseline(d, Split::Train, Split::Train);
    let mut correct = 0;
    let mut total = 0;
    for &id in &d.ids(Split::Train) {
        for q in &d.samples[id].qa {
            correct += usize::from(modes[q.category - 1] == Some(q.answer_id));
            total += 1;
        }
    }
    assert_eq!(tally.count(), total);
    assert!((tally.oa() - correct as f64 / total as f64).abs() < 1e-15);
}

#[test]
fn untrained_model_is_near_chance() {
    let cfg = tiny(&["epochs_total=0", "epochs_detector=0"]);
    let out = train(dataset(), &cfg, |_| {}).unwrap();
    assert!(out.reports.is_empty());
    let report = evaluate(&out.model, &out.best, dataset(), Split::Test).unwrap();
    assert!(report.oa() <= 0.05, "{}", report.oa());
}
