//! Accuracy bookkeeping, split evaluation, and the majority-answer baseline.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::iou;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::ParamStore;
use crate::synth::{Dataset, Family, Split, ANSWER_COUNT, QUESTION_COUNT};

/// Correct and total counts per question category.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Tally {
    correct: [usize; QUESTION_COUNT],
    total: [usize; QUESTION_COUNT],
}

impl Tally {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records one answer; `category` is in `1..=14`.
    pub fn add(&mut self, category: usize, predicted: usize, truth: usize) {
        let c = category - 1;
        self.total[c] += 1;
        if predicted == truth {
            self.correct[c] += 1;
        }
    }

    pub fn merge(&mut self, other: &Tally) {
        for c in 0..QUESTION_COUNT {
            self.correct[c] += other.correct[c];
            self.total[c] += other.total[c];
        }
    }

    pub fn count(&self) -> usize {
        self.total.iter().sum()
    }

    /// Fraction correct over every recorded answer; 0 when empty.
    pub fn oa(&self) -> f64 {
        let n = self.count();
        if n == 0 {
            return 0.0;
        }
        self.correct.iter().sum::<usize>() as f64 / n as f64
    }

    /// Accuracy of each category, `None` where the category never occurred.
    pub fn per_category(&self) -> Vec<Option<f64>> {
        (0..QUESTION_COUNT)
            .map(|c| (self.total[c] > 0).then(|| self.correct[c] as f64 / self.total[c] as f64))
            .collect()
    }

    /// Unweighted mean over the categories that occurred.
    pub fn aa(&self) -> f64 {
        let present: Vec<f64> = self.per_category().into_iter().flatten().collect();
        if present.is_empty() {
            return 0.0;
        }
        present.iter().sum::<f64>() / present.len() as f64
    }

    /// Categories with no recorded answer, `1..=14`.
    pub fn missing(&self) -> Vec<usize> {
        (0..QUESTION_COUNT)
            .filter(|&c| self.total[c] == 0)
            .map(|c| c + 1)
            .collect()
    }

    /// Accuracy over one question family; `None` if it has no answers.
    pub fn family_accuracy(&self, family: Family) -> Option<f64> {
        let (mut ok, mut n) = (0, 0);
        for c in 0..QUESTION_COUNT {
            if Family::of(c + 1) == family {
                ok += self.correct[c];
                n += self.total[c];
            }
        }
        (n > 0).then(|| ok as f64 / n as f64)
    }
}

/// One line of the predictions export.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: usize,
    pub category: usize,
    pub predicted_id: usize,
    pub true_id: usize,
}

/// One line of the routing export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatingRecord {
    pub sample_id: usize,
    pub category: usize,
    pub selected: Vec<usize>,
    pub weights: Vec<f64>,
    pub raw_scores: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub split: Split,
    pub tally: Tally,
    /// Mean tampered-mask IoU over tampered samples; `None` if the split has none.
    pub tampered_iou: Option<f64>,
    pub predictions: Vec<PredictionRecord>,
    pub gating: Vec<GatingRecord>,
}

impl EvalReport {
    pub fn oa(&self) -> f64 {
        self.tally.oa()
    }

    pub fn aa(&self) -> f64 {
        self.tally.aa()
    }
}

/// Answers every question of every sample in `split`.
pub fn evaluate(model: &Model, store: &ParamStore, dataset: &Dataset, split: Split) -> Result<EvalReport> {
    let ids = dataset.ids(split);
    if ids.is_empty() {
        return Err(Error::Config(format!("dataset has no {} samples", split.name())));
    }
    let mut tally = Tally::new();
    let mut predictions = Vec::new();
    let mut gating = Vec::new();
    let (mut iou_sum, mut iou_n) = (0.0, 0usize);
    for id in ids {
        let sample = &dataset.samples[id];
        let categories: Vec<usize> = sample.qa.iter().map(|q| q.category).collect();
        let p = model.predict(store, &sample.image, &categories)?;
        for ((q, &answer), d) in sample.qa.iter().zip(&p.answers).zip(&p.decisions) {
            tally.add(q.category, answer, q.answer_id);
            predictions.push(PredictionRecord {
                sample_id: id,
                category: q.category,
                predicted_id: answer,
                true_id: q.answer_id,
            });
            gating.push(GatingRecord {
                sample_id: id,
                category: q.category,
                selected: d.selected.clone(),
                weights: d.weights.data().to_vec(),
                raw_scores: d.raw_scores.data().to_vec(),
            });
        }
        if sample.tamper.is_tampered() {
            iou_sum += iou(&p.masks.tampered, &sample.masks.tampered);
            iou_n += 1;
        }
    }
    Ok(EvalReport {
        split,
        tally,
        tampered_iou: (iou_n > 0).then(|| iou_sum / iou_n as f64),
        predictions,
        gating,
    })
}

/// Most frequent answer of each category over `fit` (lowest id among ties), `None` for
/// categories absent from it.
pub fn majority_answers(dataset: &Dataset, fit: Split) -> Vec<Option<usize>> {
    let mut counts = vec![[0usize; ANSWER_COUNT]; QUESTION_COUNT];
    for id in dataset.ids(fit) {
        for q in &dataset.samples[id].qa {
            counts[q.category - 1][q.answer_id] += 1;
        }
    }
    counts
        .iter()
        .map(|row| {
            let best = crate::model::argmax(&row.map(|c| c as f64));
            (row[best] > 0).then_some(best)
        })
        .collect()
}

/// Tally of always answering each category's majority answer from `fit` on `split`.
pub fn majority_baseline(dataset: &Dataset, fit: Split, split: Split) -> Tally {
    let majority = majority_answers(dataset, fit);
    let mut tally = Tally::new();
    for id in dataset.ids(split) {
        for q in &dataset.samples[id].qa {
            let guess = majority[q.category - 1].unwrap_or(usize::MAX);
            tally.add(q.category, guess, q.answer_id);
        }
    }
    tally
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("serializable record");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_correct() {
        let mut t = Tally::new();
        for c in 1..=14 {
            t.add(c, 3, 3);
        }
        assert_eq!((t.oa(), t.aa()), (1.0, 1.0));
        assert!(t.missing().is_empty());
    }

    #[test]
    fn overall_versus_average() {
        let mut t = Tally::new();
        for _ in 0..90 {
            t.add(1, 0, 0);
        }
        for _ in 0..10 {
            t.add(2, 0, 1);
        }
        assert!((t.oa() - 0.9).abs() < 1e-15);
        assert!((t.aa() - 0.5).abs() < 1e-15);
        assert_eq!(t.missing().len(), 12);
        assert_eq!(t.family_accuracy(Family::Basic), Some(0.9));
        assert_eq!(t.family_accuracy(Family::Related), None);
    }
}
