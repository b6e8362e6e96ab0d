//! Flat, versioned run configuration with `key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mmoe::{GatingModality, MoeConfig, Structure};
use crate::model::ModelDims;
use crate::nn::{OptimizerKind, SgdConfig};

pub const SCHEMA_VERSION: u32 = 1;

/// Everything a generation, training or evaluation run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,

    pub image_size: usize,
    pub dataset_size: usize,
    pub tamper_ratio: f64,
    pub data_seed: u64,

    pub n_experts: usize,
    pub top_k: usize,
    pub expert_depth: usize,
    pub structure: Structure,
    pub gating_modality: GatingModality,
    pub view_arity: usize,

    pub detector_patch: usize,
    pub detector_hidden: usize,
    pub branch_patch: usize,
    pub branch_hidden: usize,
    pub c_b: usize,
    pub fusion_hidden: usize,
    pub c: usize,
    pub d_text: usize,
    pub text_hidden: usize,
    pub d_att: usize,
    pub expert_hidden: usize,
    pub d_out: usize,
    pub answer_hidden: usize,

    pub alpha: f64,
    pub epochs_total: usize,
    pub epochs_detector: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub lr_detector_start: f64,
    pub lr_detector_end: f64,
    pub lr_rest_start: f64,
    pub lr_rest_end: f64,
    /// Feed ground-truth masks to the branch encoder instead of detector output.
    pub teacher_forcing: bool,
    /// Train the detector alone on the mask loss.
    pub detector_only: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let moe = MoeConfig::default();
        let d = ModelDims::default();
        RunConfig {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            image_size: 64,
            dataset_size: 714,
            tamper_ratio: 0.862,
            data_seed: 0,
            n_experts: moe.n_experts,
            top_k: moe.top_k,
            expert_depth: moe.expert_depth,
            structure: moe.structure,
            gating_modality: moe.gating_modality,
            view_arity: moe.view_arity,
            detector_patch: d.detector_patch,
            detector_hidden: d.detector_hidden,
            branch_patch: d.branch_patch,
            branch_hidden: d.branch_hidden,
            c_b: d.c_b,
            fusion_hidden: d.fusion_hidden,
            c: d.c,
            d_text: d.d_text,
            text_hidden: d.text_hidden,
            d_att: d.d_att,
            expert_hidden: d.expert_hidden,
            d_out: d.d_out,
            answer_hidden: d.answer_hidden,
            alpha: 0.3,
            epochs_total: 30,
            epochs_detector: 20,
            batch_size: 8,
            optimizer: OptimizerKind::Adam,
            momentum: 0.9,
            lr_detector_start: 1e-2,
            lr_detector_end: 1e-3,
            lr_rest_start: 1e-3,
            lr_rest_end: 1e-5,
            teacher_forcing: false,
            detector_only: false,
        }
    }
}

impl RunConfig {
    pub fn moe(&self) -> MoeConfig {
        MoeConfig {
            n_experts: self.n_experts,
            top_k: self.top_k,
            expert_depth: self.expert_depth,
            structure: self.structure,
            gating_modality: self.gating_modality,
            view_arity: self.view_arity,
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            detector_patch: self.detector_patch,
            detector_hidden: self.detector_hidden,
            branch_patch: self.branch_patch,
            branch_hidden: self.branch_hidden,
            c_b: self.c_b,
            fusion_hidden: self.fusion_hidden,
            c: self.c,
            d_text: self.d_text,
            text_hidden: self.text_hidden,
            d_att: self.d_att,
            expert_hidden: self.expert_hidden,
            d_out: self.d_out,
            answer_hidden: self.answer_hidden,
        }
    }

    pub fn lr_detector(&self) -> SgdConfig {
        SgdConfig {
            lr_start: self.lr_detector_start,
            lr_end: self.lr_detector_end,
            momentum: self.momentum,
        }
    }

    pub fn lr_rest(&self) -> SgdConfig {
        SgdConfig {
            lr_start: self.lr_rest_start,
            lr_end: self.lr_rest_end,
            momentum: self.momentum,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.epochs_detector > self.epochs_total {
            return Err(Error::Config(format!(
                "epochs_detector {} exceeds epochs_total {}",
                self.epochs_detector, self.epochs_total
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.dataset_size == 0 || self.image_size == 0 {
            return Err(Error::Config("dataset_size and image_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.tamper_ratio) {
            return Err(Error::Config(format!(
                "tamper_ratio {} outside [0, 1]",
                self.tamper_ratio
            )));
        }
        self.lr_detector().validate()?;
        self.lr_rest().validate()?;
        self.moe().validate()?;
        self.dims().validate()
    }

    /// Parses a TOML document, applies `key=value` overrides, and validates.
    ///
    /// Keys missing from the document take their defaults; unknown keys are errors.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let known = Self::default().to_table();
        for key in table.keys() {
            if !known.contains_key(key) {
                return Err(Error::Config(format!("unknown key `{key}`")));
            }
        }
        for item in overrides {
            let (key, value) = parse_override(item)?;
            if !known.contains_key(&key) {
                return Err(Error::Config(format!("unknown override key `{key}`")));
            }
            table.insert(key, value);
        }
        let mut merged = known;
        merged.extend(table);
        let cfg: RunConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; `None` starts from the defaults.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn to_table(&self) -> toml::Table {
        toml::Table::try_from(self).expect("config serializes")
    }
}

/// Splits `key=value`; the value is read as a TOML literal, or as a bare string if it
/// is not one.
fn parse_override(item: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
    let key = key.trim().to_string();
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    Ok((key, value))
}
