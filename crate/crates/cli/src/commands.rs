//! Subcommand implementations. Machine outputs go to files; stdout carries summaries.

use std::fs;
use std::io::ErrorKind;
use std::path::Path;

use anyhow::{bail, Context, Result};
use cmvqa::ablate::{ablate as run_ablation, rows_csv, Axis};
use cmvqa::checks::{gradient_suite, TOLERANCE};
use cmvqa::config::RunConfig;
use cmvqa::eval::{evaluate, majority_baseline, write_jsonl, EvalReport};
use cmvqa::synth::{emit_dataset, write_pgm, AnswerVocabulary, Category, Dataset, Family, Split, TamperSpec};
use cmvqa::train::{load_run, save_run, train as run_training, BEST_CHECKPOINT, LAST_CHECKPOINT};

use crate::{
    AblateArgs, CheckpointArg, ConfigArgs, EvalArgs, GenArgs, GradcheckArgs, InspectArgs, SplitArg, TrainArgs,
    EXIT_CHECK_FAILED, EXIT_INVALID_CONFIG, EXIT_MISSING_INPUT,
};

/// Raised when a gradient check exceeds its tolerance.
#[derive(Debug)]
struct CheckFailed(usize);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} gradient check(s) exceeded relative error {TOLERANCE:e}", self.0)
    }
}

impl std::error::Error for CheckFailed {}

/// Maps an error chain to the process exit status.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<CheckFailed>().is_some() {
        return EXIT_CHECK_FAILED;
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<cmvqa::Error>() {
            return match e {
                cmvqa::Error::Io { source, .. } if source.kind() == ErrorKind::NotFound => EXIT_MISSING_INPUT,
                cmvqa::Error::Config(_) => EXIT_INVALID_CONFIG,
                _ => 1,
            };
        }
    }
    1
}

fn load_config(args: &ConfigArgs, extra: Vec<String>) -> Result<RunConfig> {
    let mut overrides = args.overrides.clone();
    overrides.extend(extra);
    Ok(RunConfig::load(args.config.as_deref(), &overrides)?)
}

/// Refuses to write into a non-empty directory unless forced.
fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    let occupied = match fs::read_dir(dir) {
        Ok(mut entries) => entries.next().is_some(),
        Err(e) if e.kind() == ErrorKind::NotFound => false,
        Err(e) => return Err(e).with_context(|| format!("{}", dir.display())),
    };
    if occupied && !force {
        bail!("{} is not empty; pass --force to write into it", dir.display());
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn split_of(arg: SplitArg) -> Split {
    match arg {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    }
}

fn checkpoint_file(arg: CheckpointArg) -> &'static str {
    match arg {
        CheckpointArg::Best => BEST_CHECKPOINT,
        CheckpointArg::Last => LAST_CHECKPOINT,
    }
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

pub fn gen(args: GenArgs) -> Result<()> {
    let mut extra = Vec::new();
    if let Some(n) = args.n {
        extra.push(format!("dataset_size={n}"));
    }
    if let Some(seed) = args.seed {
        extra.push(format!("data_seed={seed}"));
    }
    if let Some(ratio) = args.ratio {
        extra.push(format!("tamper_ratio={ratio}"));
    }
    if let Some(size) = args.size {
        extra.push(format!("image_size={size}"));
    }
    let cfg = load_config(&args.config, extra)?;
    prepare_out_dir(&args.out, args.force)?;
    emit_dataset(
        cfg.dataset_size,
        cfg.tamper_ratio,
        cfg.data_seed,
        cfg.image_size,
        &args.out,
    )?;
    let dataset = Dataset::load(&args.out)?;

    let n = dataset.samples.len();
    let tampered = dataset.samples.iter().filter(|s| s.tamper.is_tampered()).count();
    println!("wrote {n} samples ({0}x{0}) to {1}", cfg.image_size, args.out.display());
    println!(
        "tampered {tampered} / clean {} (ratio {:.3})",
        n - tampered,
        tampered as f64 / n as f64
    );
    let splits: Vec<String> = [Split::Train, Split::Val, Split::Test]
        .iter()
        .map(|&s| format!("{} {}", s.name(), dataset.ids(s).len()))
        .collect();
    println!("splits: {}", splits.join(", "));
    let mut objects = [0usize; 6];
    let mut copied = [0usize; 6];
    for s in &dataset.samples {
        for o in &s.scene.objects {
            objects[o.category.index()] += 1;
        }
        if let TamperSpec::CopyMove { source_object, .. } = s.tamper {
            copied[s.scene.objects[source_object].category.index()] += 1;
        }
    }
    println!("{:<12}{:>9}{:>9}", "category", "objects", "copied");
    for c in Category::ALL {
        println!("{:<12}{:>9}{:>9}", c.name(), objects[c.index()], copied[c.index()]);
    }
    Ok(())
}

pub fn train(args: TrainArgs) -> Result<()> {
    let cfg = load_config(&args.config, Vec::new())?;
    let dataset = Dataset::load(&args.data)?;
    prepare_out_dir(&args.out, args.force)?;
    let baseline = majority_baseline(&dataset, Split::Train, Split::Val);
    println!("majority baseline val OA {}", pct(baseline.oa()));
    let outcome = run_training(&dataset, &cfg, |r| {
        println!(
            "epoch {:>3}  rmse {:.4}  vqa {:.4}  balance {:.4}  total {:.4}  val OA {}  AA {}",
            r.epoch,
            r.rmse,
            r.vqa,
            r.balance,
            r.total,
            pct(r.val_oa),
            pct(r.val_aa)
        );
    })?;
    save_run(&args.out, &cfg, &outcome)?;
    match outcome.reports.get(outcome.best_epoch.wrapping_sub(1)) {
        Some(best) => println!("best epoch {} (val OA {})", outcome.best_epoch, pct(best.val_oa)),
        None => println!("no epochs trained; checkpoints hold the initial parameters"),
    }
    println!("run written to {}", args.out.display());
    Ok(())
}

/// Column width of one category in the accuracy table.
const CELL: usize = 11;

/// OA/AA and the per-category table in family order.
fn print_report(report: &EvalReport) {
    println!("split {}  questions {}", report.split.name(), report.tally.count());
    println!("OA {}  AA {}", pct(report.oa()), pct(report.aa()));
    if let Some(iou) = report.tampered_iou {
        println!("tampered-mask IoU {iou:.4}");
    }
    let per = report.tally.per_category();
    let mut header = String::new();
    let mut values = String::new();
    for (family, name) in [
        (Family::Basic, "basic"),
        (Family::Independent, "independent"),
        (Family::Related, "related"),
    ] {
        let cats: Vec<usize> = (1..=per.len()).filter(|&c| Family::of(c) == family).collect();
        let width = cats.len() * CELL;
        header.push_str(&format!("| {name:<width$}"));
        values.push_str("| ");
        for c in cats {
            let acc = per[c - 1].map_or("n/a".to_string(), pct);
            values.push_str(&format!("{:<CELL$}", format!("Q{c} {acc}")));
        }
    }
    println!("{header}|");
    println!("{values}|");
    let missing = report.tally.missing();
    if !missing.is_empty() {
        eprintln!("warning: categories absent from this split and excluded from AA: {missing:?}");
    }
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let dataset = Dataset::load(&args.data)?;
    let (_, model, store) = load_run(&args.run, checkpoint_file(args.checkpoint))?;
    let report = evaluate(&model, &store, &dataset, split_of(args.split))?;
    print_report(&report);
    let out = args.out.unwrap_or_else(|| args.run.clone());
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_jsonl(&out.join("predictions.jsonl"), &report.predictions)?;
    write_jsonl(&out.join("gating.jsonl"), &report.gating)?;
    println!("predictions and gating decisions written to {}", out.display());
    Ok(())
}

pub fn ablate(args: AblateArgs) -> Result<()> {
    let axis: Axis = args.axis.parse()?;
    let cfg = load_config(&args.config, Vec::new())?;
    let dataset = Dataset::load(&args.data)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    println!("axis {axis}, seeds {:?}", args.seeds);
    let rows = run_ablation(&dataset, &cfg, axis, &args.seeds, |row| {
        println!("{:<14} OA {}  AA {}", row.label, pct(row.oa), pct(row.aa));
    })?;
    fs::write(&args.out, rows_csv(&rows)).with_context(|| format!("writing {}", args.out.display()))?;
    println!("{} rows written to {}", rows.len(), args.out.display());
    Ok(())
}

pub fn gradcheck(args: GradcheckArgs) -> Result<()> {
    if args.instances == 0 {
        return Err(cmvqa::Error::Config("--instances must be positive".into()).into());
    }
    let outcomes = gradient_suite(args.instances, args.seed)?;
    let mut failed = 0;
    for o in &outcomes {
        let status = if o.passed() { "ok" } else { "FAIL" };
        failed += usize::from(!o.passed());
        println!("{status:<5}{:<28}max rel err {:.3e}", o.name, o.max_error);
    }
    println!(
        "{} checks, {} instances each, tolerance {TOLERANCE:e}: {} failed",
        outcomes.len(),
        args.instances,
        failed
    );
    if failed > 0 {
        return Err(CheckFailed(failed).into());
    }
    Ok(())
}

pub fn inspect(args: InspectArgs) -> Result<()> {
    let dataset = Dataset::load(&args.data)?;
    let (_, model, store) = load_run(&args.run, checkpoint_file(args.checkpoint))?;
    let Some(sample) = dataset.samples.get(args.sample) else {
        return Err(
            cmvqa::Error::Config(format!("sample {} outside 0..{}", args.sample, dataset.samples.len())).into(),
        );
    };
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let categories: Vec<usize> = sample.qa.iter().map(|q| q.category).collect();
    let p = model.predict(&store, &sample.image, &categories)?;
    for (which, mask) in p.masks.named() {
        write_pgm(&args.out.join(format!("pred_{which}.pgm")), mask)?;
    }
    println!(
        "sample {} ({})",
        sample.id,
        if sample.tamper.is_tampered() {
            "tampered"
        } else {
            "clean"
        }
    );
    for ((q, &answer), d) in sample.qa.iter().zip(&p.answers).zip(&p.decisions) {
        let text = |id: usize| AnswerVocabulary::text(id).unwrap_or("?");
        let mark = if answer == q.answer_id { "ok " } else { "err" };
        println!(
            "{mark} Q{:<3}{:<70} predicted {:<14} true {:<14} experts {:?}",
            q.category,
            q.question,
            text(answer),
            text(q.answer_id),
            d.selected
        );
    }
    println!("predicted masks written to {}", args.out.display());
    Ok(())
}
