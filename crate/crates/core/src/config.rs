//! Run configuration: presets, strict TOML files and dotted-path overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::encoders::ModelConfig;
use crate::error::{ensure, Error, Result};
use crate::eval::{AblationBase, MatrixSpec};
use crate::fsutil;
use crate::synth::DatasetConfig;
use crate::trainer::TrainConfig;

pub const PRESETS: [&str; 3] = ["tiny", "desk", "paper-shaped"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run_id: String,
    /// SHA-256 digest the dataset manifest must have; checked by `train`.
    pub dataset_digest: Option<String>,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ablation: MatrixSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Acceptance-scale benchmark: 16 categories, 1024/256/256 split.
    pub fn desk() -> Self {
        Self {
            run_id: "desk".into(),
            dataset_digest: None,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            ablation: MatrixSpec::default(),
        }
    }

    /// Four categories and a few dozen clips; seconds on any machine.
    pub fn tiny() -> Self {
        let mut c = Self::desk();
        c.run_id = "tiny".into();
        c.dataset.categories = 4;
        c.dataset.train_size = 64;
        c.dataset.val_size = 16;
        c.dataset.test_size = 16;
        c.model.num_classes = 4;
        c.model.visual_width = 16;
        c.model.embed_dim = 16;
        c.model.text_width = 16;
        c.model.lora_rank = 4;
        c.model.lora_alpha = 4.0;
        c.train.epochs = 6;
        c.train.grad_accum_steps = 2;
        c.ablation.seeds = vec![0];
        c
    }

    /// Desk model at the 4e-5 learning rate used to fine-tune large
    /// pretrained backbones. Trains this model slowly.
    pub fn paper_shaped() -> Self {
        let mut c = Self::desk();
        c.run_id = "paper-shaped".into();
        c.train.peak_lr = 4e-5;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "desk" => Ok(Self::desk()),
            "paper-shaped" | "paper_shaped" => Ok(Self::paper_shaped()),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected one of {})",
                PRESETS.join(", ")
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.run_id.is_empty(), Config, "run_id must not be empty");
        ensure!(
            self.run_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.')),
            Config,
            "run_id {:?} may only contain letters, digits, '-', '_' and '.'",
            self.run_id
        );
        self.dataset.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        let m = &self.model;
        ensure!(
            m.num_classes == self.dataset.categories,
            Config,
            "model.num_classes ({}) must equal dataset.categories ({})",
            m.num_classes,
            self.dataset.categories
        );
        ensure!(
            m.frames == self.dataset.frames,
            Config,
            "model.frames ({}) must equal dataset.frames ({})",
            m.frames,
            self.dataset.frames
        );
        Ok(())
    }

    pub fn ablation_base(&self) -> AblationBase {
        AblationBase {
            dataset: self.dataset.clone(),
            model: self.model.clone(),
            train: self.train.clone(),
        }
    }

    /// Every resolved value, defaults included.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("cannot render config: {e}")))
    }
}

/// Starts from `preset` (or a file's `preset = "..."` key, or `desk`),
/// merges the file's tables over it, applies `key=value` overrides, then
/// parses strictly and validates.
pub fn resolve(preset: Option<&str>, file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut file_table = match file {
        Some(p) => {
            let bytes = fsutil::read(p)?;
            let text = String::from_utf8(bytes).map_err(|_| Error::Config(format!("{} is not UTF-8", p.display())))?;
            text.parse::<Table>()
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => Table::new(),
    };
    let file_preset = match file_table.remove("preset") {
        Some(Value::String(s)) => Some(s),
        Some(other) => return Err(Error::Config(format!("preset must be a string, got {other}"))),
        None => None,
    };
    let name = preset.map(str::to_string).or(file_preset).unwrap_or_else(|| "desk".into());
    let base = RunConfig::preset(&name)?;
    let mut tree = match Value::try_from(&base).map_err(|e| Error::Config(e.to_string()))? {
        Value::Table(t) => t,
        _ => unreachable!("structs serialize to tables"),
    };
    merge(&mut tree, file_table);
    for o in overrides {
        apply_override(&mut tree, o)?;
    }
    let cfg: RunConfig = Value::Table(tree)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn merge(into: &mut Table, from: Table) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(Value::Table(dst)), Value::Table(src)) => merge(dst, src),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}

/// Applies `dotted.key=value`; the value is read as a TOML literal and
/// falls back to a bare string.
pub fn apply_override(tree: &mut Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not of the form key=value")))?;
    let key = key.trim();
    ensure!(!key.is_empty(), Config, "override {spec:?} has an empty key");
    let value = format!("v = {}", raw.trim())
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut node = tree;
    for p in &parts[..parts.len() - 1] {
        let entry = node.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        node = match entry {
            Value::Table(t) => t,
            _ => return Err(Error::Config(format!("override {key}: {p} is not a table"))),
        };
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
