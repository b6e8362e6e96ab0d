//! Whole datasets: sample generation, on-disk layout, and loading.
//!
//! Layout of a dataset directory:
//! `manifest.json`, `qa.jsonl`, `scenes.jsonl`, `images/NNNNNN.ppm`, and
//! `masks/NNNNNN_{source,tampered,background}.pgm`.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::qa::{answer_oracle, question_text, QUESTION_COUNT};
use super::scene::{generate_scene, SceneSpec};
use super::tamper::{apply_copy_move, sample_tamper, TamperSpec};
use super::{read_pgm, read_ppm, write_pgm, write_ppm};
use crate::detector::MaskTriplet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaRecord {
    pub sample_id: usize,
    pub category: usize,
    pub question: String,
    pub answer_id: usize,
}

/// One line of `scenes.jsonl`: what is needed to recompute every answer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub sample_id: usize,
    pub scene: SceneSpec,
    pub tamper: TamperSpec,
}

#[derive(Clone, Debug)]
pub struct SampleRecord {
    pub id: usize,
    pub seed: u64,
    pub scene: SceneSpec,
    pub tamper: TamperSpec,
    pub image: Tensor,
    pub masks: MaskTriplet,
    pub qa: Vec<QaRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: usize,
    pub seed: u64,
    pub tampered: bool,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub global_seed: u64,
    pub n_samples: usize,
    pub tamper_ratio: f64,
    pub image_size: usize,
    pub samples: Vec<ManifestEntry>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of sample `index` under `global_seed`.
pub fn sample_seed(global_seed: u64, index: usize) -> u64 {
    splitmix(global_seed ^ splitmix(index as u64))
}

/// Number of tampered samples: `n · ratio` rounded half up.
pub fn tampered_count(n: usize, ratio: f64) -> usize {
    (n as f64 * ratio + 0.5).floor() as usize
}

/// `(train, val, test)` sizes for a 70/15/15 split, each rounded half up, test taking the rest.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    let train = (70 * n + 50) / 100;
    let val = ((15 * n + 50) / 100).min(n - train);
    (train, val, n - train - val)
}

/// Generates sample `id` from its seed; retries with derived seeds until the scene admits
/// a legal copy-move.
pub fn generate_sample(id: usize, seed: u64, tampered: bool, size: usize) -> Result<SampleRecord> {
    let mut attempt = 0u64;
    let (scene, clean, tamper) = loop {
        let (scene, clean) = generate_scene(splitmix(seed ^ attempt.wrapping_mul(0x5851_f42d_4c95_7f2d)), size);
        if !tampered {
            break (scene, clean, TamperSpec::Clean);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed.wrapping_add(attempt) ^ 0x7a3d));
        if let Some(t) = sample_tamper(&scene, &mut rng) {
            break (scene, clean, t);
        }
        attempt += 1;
    };
    let (image, masks) = apply_copy_move(&scene, &clean, &tamper)?;
    let qa = (1..=QUESTION_COUNT)
        .map(|category| {
            Ok(QaRecord {
                sample_id: id,
                category,
                question: question_text(category)?.to_string(),
                answer_id: answer_oracle(&scene, &tamper, category)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SampleRecord {
        id,
        seed,
        scene,
        tamper,
        image,
        masks,
        qa,
    })
}

/// Tamper flags and split assignment for every sample, plus their seeds.
pub fn plan(n: usize, ratio: f64, global_seed: u64, size: usize) -> Result<Manifest> {
    if n == 0 {
        return Err(Error::Config("dataset size must be positive".into()));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("tamper ratio {ratio} outside [0, 1]")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(splitmix(global_seed ^ 0x7461_6d70)));
    let mut tampered = vec![false; n];
    for &i in &order[..tampered_count(n, ratio)] {
        tampered[i] = true;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(splitmix(global_seed ^ 0x7370_6c69)));
    let (train, val, _) = split_counts(n);
    let mut split = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        if rank < train {
            split[i] = Split::Train;
        } else if rank < train + val {
            split[i] = Split::Val;
        }
    }
    let samples = (0..n)
        .map(|id| ManifestEntry {
            id,
            seed: sample_seed(global_seed, id),
            tampered: tampered[id],
            split: split[id],
        })
        .collect();
    Ok(Manifest {
        format_version: FORMAT_VERSION,
        global_seed,
        n_samples: n,
        tamper_ratio: ratio,
        image_size: size,
        samples,
    })
}

fn image_path(dir: &Path, id: usize) -> std::path::PathBuf {
    dir.join("images").join(format!("{id:06}.ppm"))
}

fn mask_path(dir: &Path, id: usize, which: &str) -> std::path::PathBuf {
    dir.join("masks").join(format!("{id:06}_{which}.pgm"))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_line<T: Serialize>(out: &mut impl Write, path: &Path, value: &T) -> Result<()> {
    let line = serde_json::to_string(value).expect("serializable record");
    writeln!(out, "{line}").map_err(|e| Error::io(path, e))
}

/// Generates and writes a complete dataset into `out_dir`.
pub fn emit_dataset(n: usize, ratio: f64, global_seed: u64, size: usize, out_dir: &Path) -> Result<Manifest> {
    let manifest = plan(n, ratio, global_seed, size)?;
    for sub in ["images", "masks"] {
        let p = out_dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let qa_path = out_dir.join("qa.jsonl");
    let scenes_path = out_dir.join("scenes.jsonl");
    let mut qa_out = create(&qa_path)?;
    let mut scenes_out = create(&scenes_path)?;
    for entry in &manifest.samples {
        let s = generate_sample(entry.id, entry.seed, entry.tampered, size)?;
        write_ppm(&image_path(out_dir, s.id), &s.image)?;
        for (which, mask) in s.masks.named() {
            write_pgm(&mask_path(out_dir, s.id, which), mask)?;
        }
        for q in &s.qa {
            write_line(&mut qa_out, &qa_path, q)?;
        }
        let scene = SceneRecord {
            sample_id: s.id,
            scene: s.scene,
            tamper: s.tamper,
        };
        write_line(&mut scenes_out, &scenes_path, &scene)?;
    }
    qa_out.flush().map_err(|e| Error::io(&qa_path, e))?;
    scenes_out.flush().map_err(|e| Error::io(&scenes_path, e))?;
    let manifest_path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("serializable manifest");
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
        out.push(value);
    }
    Ok(out)
}

/// A dataset loaded from disk.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    /// Indexed by sample id.
    pub samples: Vec<SampleRecord>,
}

impl Dataset {
    pub fn read_manifest(dir: &Path) -> Result<Manifest> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::format(
                &path,
                format!("unsupported format version {}", manifest.format_version),
            ));
        }
        if manifest.samples.len() != manifest.n_samples || manifest.samples.iter().enumerate().any(|(i, e)| e.id != i) {
            return Err(Error::format(&path, "sample list does not match n_samples"));
        }
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = Self::read_manifest(dir)?;
        let n = manifest.n_samples;
        let scenes_path = dir.join("scenes.jsonl");
        let scenes: Vec<SceneRecord> = read_jsonl(&scenes_path)?;
        if scenes.len() != n || scenes.iter().enumerate().any(|(i, s)| s.sample_id != i) {
            return Err(Error::format(&scenes_path, "scene records do not match the manifest"));
        }
        let qa_path = dir.join("qa.jsonl");
        let mut qa: Vec<Vec<QaRecord>> = vec![Vec::new(); n];
        for q in read_jsonl::<QaRecord>(&qa_path)? {
            let slot = qa
                .get_mut(q.sample_id)
                .ok_or_else(|| Error::format(&qa_path, format!("unknown sample {}", q.sample_id)))?;
            slot.push(q);
        }
        let mut samples = Vec::with_capacity(n);
        for (entry, rec) in manifest.samples.iter().zip(scenes) {
            let id = entry.id;
            let masks = MaskTriplet {
                source: read_pgm(&mask_path(dir, id, "source"))?,
                tampered: read_pgm(&mask_path(dir, id, "tampered"))?,
                background: read_pgm(&mask_path(dir, id, "background"))?,
            };
            samples.push(SampleRecord {
                id,
                seed: entry.seed,
                scene: rec.scene,
                tamper: rec.tamper,
                image: read_ppm(&image_path(dir, id))?,
                masks,
                qa: std::mem::take(&mut qa[id]),
            });
        }
        Ok(Dataset { manifest, samples })
    }

    /// Generates a dataset in memory, identical to what [`emit_dataset`] writes.
    pub fn generate(n: usize, ratio: f64, global_seed: u64, size: usize) -> Result<Self> {
        let manifest = plan(n, ratio, global_seed, size)?;
        let samples = manifest
            .samples
            .iter()
            .map(|e| generate_sample(e.id, e.seed, e.tampered, size))
            .collect::<Result<_>>()?;
        Ok(Dataset { manifest, samples })
    }

    /// Sample ids of one split, ascending.
    pub fn ids(&self, split: Split) -> Vec<usize> {
        self.manifest
            .samples
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.id)
            .collect()
    }

    /// Every question string in the dataset, for vocabulary building.
    pub fn questions(&self) -> Vec<&str> {
        self.samples
            .iter()
            .flat_map(|s| s.qa.iter().map(|q| q.question.as_str()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_round_half_up() {
        assert_eq!(tampered_count(100, 0.862), 86);
        assert_eq!(tampered_count(10, 0.85), 9);
        assert_eq!(split_counts(100), (70, 15, 15));
        assert_eq!(split_counts(714), (500, 107, 107));
        assert_eq!(split_counts(1), (1, 0, 0));
    }

    #[test]
    fn plan_is_deterministic_and_exact() {
        let a = plan(100, 0.862, 7, 64).unwrap();
        assert_eq!(a, plan(100, 0.862, 7, 64).unwrap());
        assert_eq!(a.samples.iter().filter(|e| e.tampered).count(), 86);
        let train = a.samples.iter().filter(|e| e.split == Split::Train).count();
        let val = a.samples.iter().filter(|e| e.split == Split::Val).count();
        assert_eq!((train, val), (70, 15));
        assert!(plan(0, 0.5, 1, 64).is_err());
    }

    #[test]
    fn every_sample_has_all_questions() {
        for (id, tampered) in [(0, true), (1, false)] {
            let s = generate_sample(id, sample_seed(3, id), tampered, 64).unwrap();
            assert_eq!(s.qa.len(), 14);
            assert_eq!(s.tamper.is_tampered(), tampered);
            assert!(s.qa.iter().all(|q| q.answer_id < 50));
        }
    }

    #[test]
    fn emit_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = emit_dataset(12, 0.5, 11, 32, dir.path()).unwrap();
        let d = Dataset::load(dir.path()).unwrap();
        assert_eq!(d.manifest, m);
        for s in &d.samples {
            let fresh = generate_sample(s.id, s.seed, m.samples[s.id].tampered, 32).unwrap();
            assert!(fresh.image.bitwise_eq(&s.image));
            assert!(fresh.masks.tampered.bitwise_eq(&s.masks.tampered));
            assert_eq!(fresh.qa, s.qa);
            assert_eq!(fresh.scene, s.scene);
        }
    }
}
