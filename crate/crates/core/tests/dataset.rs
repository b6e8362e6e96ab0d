//! Generated datasets on disk: partitioned masks, oracle answers, legal placement, split
//! bookkeeping and bitwise regeneration.

use cmvqa::synth::{emit_dataset, split_counts, tampered_count, Dataset, Split, QUESTION_COUNT};
use cmvqa_oracles::{regeneration_mismatches, sample_violations};

#[test]
fn emitted_dataset_is_consistent_and_regenerates() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = emit_dataset(120, 0.862, 5, 32, dir.path()).unwrap();
    let d = Dataset::load(dir.path()).unwrap();
    assert_eq!(d.manifest, manifest);
    let violations: Vec<String> = d.samples.iter().flat_map(sample_violations).collect();
    assert!(violations.is_empty(), "{violations:#?}");
    assert_eq!(regeneration_mismatches(&d), Vec::<usize>::new());
}

#[test]
fn in_memory_generation_matches_disk() {
    let dir = tempfile::tempdir().unwrap();
    emit_dataset(20, 0.5, 8, 32, dir.path()).unwrap();
    let disk = Dataset::load(dir.path()).unwrap();
    let mem = Dataset::generate(20, 0.5, 8, 32).unwrap();
    assert_eq!(disk.manifest, mem.manifest);
    for (a, b) in disk.samples.iter().zip(&mem.samples) {
        assert_eq!(a.image, b.image);
        assert_eq!(a.masks.tampered, b.masks.tampered);
        assert_eq!(a.qa, b.qa);
    }
}

#[test]
fn same_seed_same_manifest_bytes() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    emit_dataset(15, 0.862, 7, 24, a.path()).unwrap();
    emit_dataset(15, 0.862, 7, 24, b.path()).unwrap();
    for file in ["manifest.json", "qa.jsonl", "scenes.jsonl", "images/000003.ppm"] {
        let (x, y) = (std::fs::read(a.path().join(file)), std::fs::read(b.path().join(file)));
        assert_eq!(x.unwrap(), y.unwrap(), "{file}");
    }
}

#[test]
fn counts_follow_ratio_and_splits() {
    let d = Dataset::generate(100, 0.862, 1, 24).unwrap();
    let tampered = d.samples.iter().filter(|s| s.tamper.is_tampered()).count();
    assert_eq!(tampered, 86);
    assert_eq!(tampered_count(100, 0.862), 86);
    assert_eq!(split_counts(714), (500, 107, 107));
    let sizes: Vec<usize> = [Split::Train, Split::Val, Split::Test]
        .iter()
        .map(|&s| d.ids(s).len())
        .collect();
    assert_eq!(sizes, vec![70, 15, 15]);
    for s in &d.samples {
        let cats: Vec<usize> = s.qa.iter().map(|q| q.category).collect();
        if s.tamper.is_tampered() {
            assert_eq!(cats, (1..=QUESTION_COUNT).collect::<Vec<_>>());
        } else {
            assert!(!cats.is_empty());
        }
    }
}

#[test]
fn missing_directory_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = Dataset::load(&dir.path().join("absent")).unwrap_err();
    assert!(matches!(err, cmvqa::Error::Io { .. }));
}

#[test]
fn corrupted_manifest_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    emit_dataset(5, 0.862, 2, 16, dir.path()).unwrap();
    std::fs::write(dir.path().join("manifest.json"), "{").unwrap();
    assert!(matches!(Dataset::load(dir.path()), Err(cmvqa::Error::Format { .. })));
}
