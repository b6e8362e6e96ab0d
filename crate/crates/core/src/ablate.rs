//! Ablation matrices: one axis varied over a base configuration, every cell trained on
//! the same seeds and scored by mean test OA/AA.

use std::fmt;
use std::str::FromStr;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::mmoe::{GatingModality, Structure};
use crate::synth::{Dataset, Split};
use crate::train::train;

/// The configuration axis an ablation varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    GatingModality,
    ExpertStructure,
    Alpha,
    TopK,
}

impl Axis {
    pub const ALL: [Axis; 4] = [Axis::GatingModality, Axis::ExpertStructure, Axis::Alpha, Axis::TopK];

    pub fn name(self) -> &'static str {
        match self {
            Axis::GatingModality => "gating_modality",
            Axis::ExpertStructure => "expert_structure",
            Axis::Alpha => "alpha",
            Axis::TopK => "topk",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Axis::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            let names: Vec<_> = Axis::ALL.iter().map(|a| a.name()).collect();
            Error::Config(format!(
                "unknown ablation axis `{s}` (expected one of {})",
                names.join(", ")
            ))
        })
    }
}

/// One configuration of an ablation matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub label: String,
    pub cfg: RunConfig,
}

fn structure_label(cfg: &RunConfig) -> String {
    let tag = match cfg.structure {
        Structure::MultiLevel => "ML",
        Structure::MultiView => "MV",
    };
    format!("{tag}({},{})", cfg.n_experts, cfg.top_k)
}

fn gating_label(g: GatingModality) -> &'static str {
    match g {
        GatingModality::Multimodal => "multimodal",
        GatingModality::VisualOnly => "visual-only",
        GatingModality::TextOnly => "text-only",
    }
}

/// The cells of `axis` around `base`, in report order.
pub fn cells(base: &RunConfig, axis: Axis) -> Vec<Cell> {
    let with = |label: String, f: &dyn Fn(&mut RunConfig)| {
        let mut cfg = base.clone();
        f(&mut cfg);
        Cell { label, cfg }
    };
    match axis {
        Axis::GatingModality => [
            GatingModality::Multimodal,
            GatingModality::VisualOnly,
            GatingModality::TextOnly,
        ]
        .into_iter()
        .map(|g| with(gating_label(g).to_string(), &|c| c.gating_modality = g))
        .collect(),
        Axis::Alpha => (1..=7)
            .map(|i| {
                let alpha = i as f64 / 10.0;
                with(format!("alpha={alpha}"), &|c| c.alpha = alpha)
            })
            .collect(),
        Axis::TopK => (1..=base.n_experts)
            .map(|k| with(format!("K={k}"), &|c| c.top_k = k))
            .collect(),
        Axis::ExpertStructure => {
            // Multi-view with one or two branches per expert yields 4 or 6 experts.
            let variants = [
                (Structure::MultiLevel, 4, 2, 1),
                (Structure::MultiView, 4, 2, 1),
                (Structure::MultiLevel, 6, 4, 2),
                (Structure::MultiView, 6, 4, 2),
            ];
            variants
                .into_iter()
                .map(|(structure, n, k, arity)| {
                    let mut cfg = base.clone();
                    cfg.structure = structure;
                    cfg.n_experts = n;
                    cfg.top_k = k;
                    if structure == Structure::MultiView {
                        cfg.view_arity = arity;
                    }
                    Cell {
                        label: structure_label(&cfg),
                        cfg,
                    }
                })
                .collect()
        }
    }
}

/// Mean test scores of one cell over the shared seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub axis: Axis,
    pub label: String,
    pub structure: Structure,
    pub n_experts: usize,
    pub top_k: usize,
    pub gating_modality: GatingModality,
    pub alpha: f64,
    pub seeds: Vec<u64>,
    pub oa: f64,
    pub aa: f64,
}

impl Row {
    pub fn csv_header() -> &'static str {
        "axis,label,structure,n_experts,top_k,gating_modality,alpha,seeds,oa,aa"
    }

    pub fn csv_row(&self) -> String {
        let structure = match self.structure {
            Structure::MultiLevel => "multi-level",
            Structure::MultiView => "multi-view",
        };
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.axis,
            self.label,
            structure,
            self.n_experts,
            self.top_k,
            gating_label(self.gating_modality),
            self.alpha,
            seeds.join(";"),
            self.oa,
            self.aa
        )
    }
}

pub fn rows_csv(rows: &[Row]) -> String {
    let mut out = String::from(Row::csv_header());
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Trains every cell of `axis` once per seed on `dataset` and scores the best-validation
/// checkpoint on the test split. `on_row` sees each row as it completes.
pub fn ablate(
    dataset: &Dataset,
    base: &RunConfig,
    axis: Axis,
    seeds: &[u64],
    mut on_row: impl FnMut(&Row),
) -> Result<Vec<Row>> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let cells = cells(base, axis);
    for cell in &cells {
        cell.cfg.validate()?;
    }
    let mut rows = Vec::with_capacity(cells.len());
    for cell in cells {
        let (mut oa, mut aa) = (0.0, 0.0);
        for &seed in seeds {
            let cfg = RunConfig {
                seed,
                ..cell.cfg.clone()
            };
            let outcome = train(dataset, &cfg, |_| {})?;
            let report = evaluate(&outcome.model, &outcome.best, dataset, Split::Test)?;
            oa += report.oa();
            aa += report.aa();
        }
        let n = seeds.len() as f64;
        let row = Row {
            axis,
            label: cell.label,
            structure: cell.cfg.structure,
            n_experts: cell.cfg.n_experts,
            top_k: cell.cfg.top_k,
            gating_modality: cell.cfg.gating_modality,
            alpha: cell.cfg.alpha,
            seeds: seeds.to_vec(),
            oa: oa / n,
            aa: aa / n,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}
