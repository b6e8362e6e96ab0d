//! Joint training with the detector freeze boundary, per-epoch reports, and run
//! directories on disk.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::detector::rmse_loss_batch;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::mmoe::balance_loss;
use crate::model::{ImageInput, Model};
use crate::nn::{load_checkpoint, save_checkpoint, Optimizer, ParamGroup, ParamStore, Session};
use crate::synth::{Dataset, Split, QUESTION_COUNT};
use crate::tensor::{Tape, Var};

/// `α·rmse + (1−α)·vqa + balance`.
pub fn total_loss<'t>(rmse: Var<'t>, vqa: Var<'t>, balance: Var<'t>, alpha: f64) -> Result<Var<'t>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    rmse.scale(alpha).add(vqa.scale(1.0 - alpha))?.add(balance)
}

/// Training losses (means over the epoch's batches) and validation accuracy of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub rmse: f64,
    pub vqa: f64,
    pub balance: f64,
    pub total: f64,
    pub val_oa: f64,
    pub val_aa: f64,
    /// Validation accuracy of categories 1..=14; `None` where absent.
    pub per_category: Vec<Option<f64>>,
    pub lr_detector: f64,
    pub lr_rest: f64,
    /// Fingerprint of the detector parameters at the end of the epoch.
    pub detector_hash: u64,
}

impl EpochReport {
    pub fn csv_header() -> String {
        let mut cols: Vec<String> = ["epoch", "rmse", "vqa", "balance", "total", "val_oa", "val_aa"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        cols.extend((1..=QUESTION_COUNT).map(|c| format!("q{c}")));
        cols.extend(["lr_detector", "lr_rest", "detector_hash"].map(String::from));
        cols.join(",")
    }

    /// Floats use shortest round-trip formatting, so equal rows mean bitwise-equal values.
    pub fn csv_row(&self) -> String {
        let mut cols = vec![
            self.epoch.to_string(),
            self.rmse.to_string(),
            self.vqa.to_string(),
            self.balance.to_string(),
            self.total.to_string(),
            self.val_oa.to_string(),
            self.val_aa.to_string(),
        ];
        cols.extend(
            self.per_category
                .iter()
                .map(|a| a.map(|v| v.to_string()).unwrap_or_default()),
        );
        cols.push(self.lr_detector.to_string());
        cols.push(self.lr_rest.to_string());
        cols.push(format!("{:016x}", self.detector_hash));
        cols.join(",")
    }
}

pub fn reports_csv(reports: &[EpochReport]) -> String {
    let mut out = EpochReport::csv_header();
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Trained parameters and the epoch history.
pub struct TrainOutcome {
    pub model: Model,
    /// Parameters of the epoch with the best validation OA (earliest among ties).
    pub best: ParamStore,
    pub best_epoch: usize,
    pub last: ParamStore,
    pub reports: Vec<EpochReport>,
}

fn check_dataset(dataset: &Dataset, cfg: &RunConfig) -> Result<()> {
    if dataset.manifest.image_size != cfg.image_size {
        return Err(Error::Config(format!(
            "dataset images are {}px but the config expects {}px",
            dataset.manifest.image_size, cfg.image_size
        )));
    }
    for split in [Split::Train, Split::Val] {
        if dataset.ids(split).is_empty() {
            return Err(Error::Config(format!("dataset has no {} split", split.name())));
        }
    }
    Ok(())
}

/// Batch losses as plain numbers.
struct BatchLosses {
    rmse: f64,
    vqa: f64,
    balance: f64,
    total: f64,
}

#[allow(clippy::too_many_arguments)]
fn train_batch(
    model: &Model,
    store: &mut ParamStore,
    opt: &mut Optimizer,
    dataset: &Dataset,
    batch: &[usize],
    cfg: &RunConfig,
    frozen: bool,
    lr: (f64, f64),
) -> Result<BatchLosses> {
    let tape = Tape::new();
    let (losses, grads) = {
        let s = if frozen {
            Session::with_frozen(&tape, store, &[ParamGroup::Detector])
        } else if cfg.detector_only {
            Session::with_frozen(&tape, store, &[ParamGroup::Rest])
        } else {
            Session::new(&tape, store)
        };
        let mut pred = Vec::with_capacity(batch.len());
        let mut truth = Vec::with_capacity(batch.len());
        let mut logits = Vec::with_capacity(batch.len());
        let mut weights = Vec::with_capacity(batch.len());
        let mut labels = Vec::new();
        let zero = s.constant(crate::tensor::Tensor::scalar(0.0));
        if cfg.detector_only {
            for &id in batch {
                let sample = &dataset.samples[id];
                pred.push(model.detector.forward(&s, s.constant(sample.image.clone()))?);
                truth.push(sample.masks.constants(&s));
            }
        } else {
            let table = model.question_table(&s)?;
            for &id in batch {
                let sample = &dataset.samples[id];
                let categories: Vec<usize> = sample.qa.iter().map(|q| q.category).collect();
                let input = ImageInput {
                    image: &sample.image,
                    masks: cfg.teacher_forcing.then_some(&sample.masks),
                    categories: &categories,
                };
                let out = model.forward_image(&s, table, &input, None)?;
                pred.push(out.masks);
                truth.push(sample.masks.constants(&s));
                logits.push(out.logits);
                weights.push(out.moe.weights);
                labels.extend(sample.qa.iter().map(|q| q.answer_id));
            }
        }
        let pairs: Vec<_> = pred.iter().zip(&truth).collect();
        let rmse = rmse_loss_batch(&pairs)?;
        let (vqa, balance, total) = if cfg.detector_only {
            (zero, zero, rmse)
        } else {
            let vqa = Var::concat(&logits, 0)?.cross_entropy(&labels)?;
            let balance = balance_loss(&weights)?.loss;
            (vqa, balance, total_loss(rmse, vqa, balance, cfg.alpha)?)
        };
        tape.backward(total)?;
        let losses = BatchLosses {
            rmse: rmse.item(),
            vqa: vqa.item(),
            balance: balance.item(),
            total: total.item(),
        };
        (losses, s.grads())
    };
    opt.step(store, &grads, |g| match g {
        ParamGroup::Detector => lr.0,
        ParamGroup::Rest => lr.1,
    });
    Ok(losses)
}

/// Trains from scratch. `on_epoch` sees each report as it is produced.
///
/// Epochs `1..=epochs_detector` update every parameter; later epochs treat the detector
/// as constant, so its parameters stay bitwise fixed.
pub fn train(dataset: &Dataset, cfg: &RunConfig, mut on_epoch: impl FnMut(&EpochReport)) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_dataset(dataset, cfg)?;
    let (model, mut store) = Model::new(cfg.image_size, cfg.dims(), cfg.moe(), cfg.seed)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.momentum, store.len());
    let mut ids = dataset.ids(Split::Train);
    let batches_per_epoch = ids.len().div_ceil(cfg.batch_size);
    let detector_schedule = cfg.lr_detector().schedule(batches_per_epoch * cfg.epochs_detector);
    let rest_schedule = cfg.lr_rest().schedule(batches_per_epoch * cfg.epochs_total);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0073_6875_6666_6c65);

    let mut reports = Vec::with_capacity(cfg.epochs_total);
    let mut best = (store.clone(), 0usize, f64::NEG_INFINITY);
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs_total {
        ids.shuffle(&mut rng);
        let frozen = epoch > cfg.epochs_detector;
        let (mut sums, mut n) = ([0.0f64; 4], 0usize);
        let mut lr_now = (0.0, 0.0);
        for batch in ids.chunks(cfg.batch_size) {
            let lr_det = if frozen { 0.0 } else { detector_schedule.lr(step) };
            let lr_rest = if cfg.detector_only { 0.0 } else { rest_schedule.lr(step) };
            lr_now = (lr_det, lr_rest);
            let l = train_batch(&model, &mut store, &mut opt, dataset, batch, cfg, frozen, lr_now)?;
            for (acc, v) in sums.iter_mut().zip([l.rmse, l.vqa, l.balance, l.total]) {
                *acc += v;
            }
            n += 1;
            step += 1;
        }
        let val = evaluate(&model, &store, dataset, Split::Val)?;
        let mean = |i: usize| sums[i] / n as f64;
        let report = EpochReport {
            epoch,
            rmse: mean(0),
            vqa: mean(1),
            balance: mean(2),
            total: mean(3),
            val_oa: val.oa(),
            val_aa: val.aa(),
            per_category: val.tally.per_category(),
            lr_detector: lr_now.0,
            lr_rest: lr_now.1,
            detector_hash: store.fingerprint(ParamGroup::Detector),
        };
        if report.val_oa > best.2 {
            best = (store.clone(), epoch, report.val_oa);
        }
        on_epoch(&report);
        reports.push(report);
    }
    Ok(TrainOutcome {
        model,
        best: best.0,
        best_epoch: best.1,
        last: store,
        reports,
    })
}

pub const CONFIG_FILE: &str = "config.toml";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const REPORTS_CSV: &str = "epochs.csv";
pub const REPORTS_JSON: &str = "epochs.json";

/// Writes the resolved config, both checkpoints, and the epoch reports into `dir`.
pub fn save_run(dir: &Path, cfg: &RunConfig, outcome: &TrainOutcome) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write(CONFIG_FILE, cfg.to_toml())?;
    write(REPORTS_CSV, reports_csv(&outcome.reports))?;
    write(
        REPORTS_JSON,
        serde_json::to_string_pretty(&outcome.reports).expect("serializable reports"),
    )?;
    save_checkpoint(&outcome.best, &dir.join(BEST_CHECKPOINT))?;
    save_checkpoint(&outcome.last, &dir.join(LAST_CHECKPOINT))
}

/// Rebuilds the model of a run directory and loads the named checkpoint into it.
pub fn load_run(dir: &Path, checkpoint: &str) -> Result<(RunConfig, Model, ParamStore)> {
    let cfg = RunConfig::load(Some(&dir.join(CONFIG_FILE)), &[])?;
    let (model, mut store) = Model::new(cfg.image_size, cfg.dims(), cfg.moe(), cfg.seed)?;
    store.load_values(load_checkpoint(&dir.join(checkpoint))?)?;
    Ok((cfg, model, store))
}
