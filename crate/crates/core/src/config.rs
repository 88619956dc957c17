//! Run configuration files (TOML) and `key=value` overrides.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::pairgen::{BuildOptions, TaskFamily};
use crate::schedule::{ScheduleConfig, ScheduleKind};
use crate::sweep::BonSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pmp,
    RmFinetune,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Pmp => "pmp",
            Stage::RmFinetune => "rm_finetune",
        })
    }
}

/// Where initial weights come from: `"random"` or a checkpoint path.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum Init {
    #[default]
    Random,
    Checkpoint(PathBuf),
}

impl From<String> for Init {
    fn from(s: String) -> Self {
        if s == "random" {
            Init::Random
        } else {
            Init::Checkpoint(PathBuf::from(s))
        }
    }
}

impl From<Init> for String {
    fn from(i: Init) -> Self {
        match i {
            Init::Random => "random".into(),
            Init::Checkpoint(p) => p.display().to_string(),
        }
    }
}

fn one() -> usize {
    1
}

fn unit() -> f64 {
    1.0
}

fn tenth() -> f64 {
    0.1
}

fn compact() -> ModelConfig {
    ModelConfig::compact()
}

/// One training stage. Field names follow the usual hyperparameter table
/// vocabulary (`epoch`, `bs`, `lr`, `lr_scheduler`, ...).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub stage: Stage,
    #[serde(default)]
    pub init: Init,
    /// Pair JSONL file.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default = "one")]
    pub epoch: usize,
    pub bs: usize,
    pub lr: f64,
    pub lr_scheduler: ScheduleKind,
    pub warmup_ratio: f64,
    #[serde(default)]
    pub decay_ratio: f64,
    #[serde(default)]
    pub min_lr: f64,
    pub weight_decay: f64,
    /// Longest packed pair accepted, in tokens.
    pub max_length: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "tenth")]
    pub holdout_fraction: f64,
    /// Cap on training pairs after the holdout split; all when absent.
    #[serde(default)]
    pub train_samples: Option<usize>,
    #[serde(default = "unit")]
    pub rank_weight: f64,
    #[serde(default = "unit")]
    pub max_grad_norm: f64,
    #[serde(default = "compact")]
    pub model: ModelConfig,
}

impl RunConfig {
    /// Small-model PMP defaults.
    pub fn desk_pmp() -> Self {
        Self {
            stage: Stage::Pmp,
            init: Init::Random,
            dataset: None,
            epoch: 1,
            bs: 32,
            lr: 3e-3,
            lr_scheduler: ScheduleKind::Wsd,
            warmup_ratio: 0.03,
            decay_ratio: 0.1,
            min_lr: 0.0,
            weight_decay: 0.1,
            max_length: 192,
            seed: 0,
            holdout_fraction: 0.0,
            train_samples: None,
            rank_weight: 1.0,
            max_grad_norm: 1.0,
            model: ModelConfig::compact(),
        }
    }

    /// Small-model reward finetuning defaults.
    pub fn desk_rm() -> Self {
        Self {
            stage: Stage::RmFinetune,
            bs: 16,
            lr: 1e-3,
            lr_scheduler: ScheduleKind::Wcd,
            warmup_ratio: 0.03,
            decay_ratio: 0.0,
            weight_decay: 0.0,
            holdout_fraction: 0.1,
            ..Self::desk_pmp()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bs == 0 {
            return Err(Error::Config("bs must be at least 1".into()));
        }
        if self.epoch == 0 {
            return Err(Error::Config("epoch must be at least 1".into()));
        }
        if !(0.0..=0.5).contains(&self.holdout_fraction) {
            return Err(Error::Config(format!("holdout_fraction {} outside [0, 0.5]", self.holdout_fraction)));
        }
        if self.stage == Stage::Pmp && self.init != Init::Random {
            return Err(Error::Config("pmp stage starts from random init".into()));
        }
        if !(self.rank_weight.is_finite() && self.rank_weight >= 0.0) {
            return Err(Error::Config(format!("rank_weight {} must be finite and >= 0", self.rank_weight)));
        }
        if self.max_length > self.model.max_seq_len {
            return Err(Error::Config(format!(
                "max_length {} exceeds the model context {}",
                self.max_length, self.model.max_seq_len
            )));
        }
        self.model.validate()?;
        self.schedule(1).validate()
    }

    pub fn schedule(&self, total_steps: u64) -> ScheduleConfig {
        ScheduleConfig {
            kind: self.lr_scheduler,
            peak_lr: self.lr,
            warmup_ratio: self.warmup_ratio,
            decay_ratio: self.decay_ratio,
            total_steps,
            min_lr: self.min_lr,
        }
    }
}

/// Dataset build settings for the `synth` verb.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub family: TaskFamily,
    pub n_pairs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub eoc: bool,
    #[serde(default = "synth_max_length")]
    pub max_length: usize,
    #[serde(default)]
    pub clip_ratio: f64,
    #[serde(default = "one")]
    pub workers: usize,
    /// Also write a Best-of-N pool for the same family.
    #[serde(default)]
    pub bon: Option<BonSpec>,
}

fn synth_max_length() -> usize {
    192
}

impl SynthConfig {
    pub fn build_options(&self) -> BuildOptions {
        BuildOptions {
            family: self.family,
            n_pairs: self.n_pairs,
            seed: self.seed,
            eoc: self.eoc,
            max_length: self.max_length,
            clip_ratio: self.clip_ratio,
            workers: self.workers,
        }
    }
}

/// Parses `value` as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Applies `key=value` overrides (dotted keys reach into tables).
pub fn apply_overrides(table: &mut toml::Table, overrides: &[String]) -> Result<()> {
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
        let path: Vec<&str> = key.trim().split('.').collect();
        if path.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!("bad override key {key:?}")));
        }
        let mut cur = &mut *table;
        for part in &path[..path.len() - 1] {
            let entry = cur
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            cur = entry
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("override {key:?}: {part} is not a table")))?;
        }
        cur.insert(path[path.len() - 1].to_string(), parse_value(raw.trim()));
    }
    Ok(())
}

/// Parses TOML text, applies overrides, and deserializes.
pub fn parse_with_overrides<T: DeserializeOwned>(text: &str, overrides: &[String]) -> Result<T> {
    let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
    apply_overrides(&mut table, overrides)?;
    toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))
}

pub fn load<T: DeserializeOwned>(path: &Path, overrides: &[String]) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_with_overrides(&text, overrides).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Serializes any config back to TOML, for embedding in artifacts.
pub fn to_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string(value).map_err(|e| Error::Config(e.to_string()))
}
