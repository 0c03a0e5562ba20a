//! Experiment configuration: one TOML file per experiment, with dotted-key
//! overrides from the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterConfig;
use crate::data::{SplitSpec, SyntheticSpec};
use crate::encoder::EncoderConfig;
use crate::error::{DamError, Result};
use crate::eval::AttackerConfig;
use crate::inlp::InlpConfig;
use crate::persistence::config_hash;
use crate::training::{PretrainConfig, Recipe, TrainingConfig};

/// Environment variable naming the root that relative output directories
/// resolve against.
pub const OUTPUT_ROOT_ENV: &str = "DAM_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    /// Seed of the encoder initialization and its warm start, shared by all
    /// run seeds.
    pub encoder_seed: u64,
    pub recipe: RecipeSection,
    pub data: DataSection,
    pub encoder: EncoderConfig,
    pub adapter: AdapterConfig,
    pub pretrain: PretrainConfig,
    pub training: TrainingConfig,
    pub attackers: AttackerConfig,
    pub eval: EvalSection,
    pub attention: AttentionSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "dam".into(),
            output_dir: PathBuf::from("runs/dam"),
            seeds: vec![0],
            encoder_seed: 0,
            recipe: RecipeSection::default(),
            data: DataSection::default(),
            encoder: EncoderConfig::default(),
            adapter: AdapterConfig::default(),
            pretrain: PretrainConfig::default(),
            training: TrainingConfig::default(),
            attackers: AttackerConfig::default(),
            eval: EvalSection::default(),
            attention: AttentionSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecipeSection {
    pub name: Recipe,
    /// Protected attributes the recipe debiases.
    pub attributes: Vec<String>,
}

impl Default for RecipeSection {
    fn default() -> Self {
        RecipeSection {
            name: Recipe::Dam,
            attributes: vec!["gender".into()],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Generated by `generate-data` into the output directory.
    Synthetic,
    /// `train.jsonl`, `val.jsonl` and `test.jsonl` in `data.dir`.
    Jsonl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    pub dir: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    pub split: SplitSpec,
    /// Balance protected attributes within each task label of the training
    /// split by duplication.
    pub upsample: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: DataSource::Synthetic,
            dir: None,
            synthetic: SyntheticSpec::default(),
            split: SplitSpec::default(),
            upsample: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Attacked attributes; empty means every attribute in the data.
    pub attack: Vec<String>,
    /// INLP baselines on the plain encoder vectors of an FT run.
    pub inlp: Option<InlpConfig>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            attack: Vec::new(),
            inlp: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionSection {
    pub sample_fraction: f64,
    pub top_n: usize,
}

impl Default for AttentionSection {
    fn default() -> Self {
        AttentionSection {
            sample_fraction: 0.04,
            top_n: 3,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| DamError::Config(e.to_string()))
    }

    /// Reads a config file and applies `key.path=value` overrides in order.
    /// Values parse as TOML when possible and as bare strings otherwise.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => DamError::Config(format!("config file {} not found", p.display())),
                _ => DamError::io(p, e),
            })?,
            None => String::new(),
        };
        let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| DamError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| DamError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hash of the fully resolved config; stored in every checkpoint manifest.
    pub fn hash(&self) -> String {
        config_hash(&self.to_toml())
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(DamError::Config("seeds must not be empty".into()));
        }
        if self.data.source == DataSource::Jsonl && self.data.dir.is_none() {
            return Err(DamError::Config("data.source = \"jsonl\" needs data.dir".into()));
        }
        if self.adapter.hidden_dim != self.encoder.hidden_dim {
            return Err(DamError::Config(format!(
                "adapter.hidden_dim {} differs from encoder.hidden_dim {}",
                self.adapter.hidden_dim, self.encoder.hidden_dim
            )));
        }
        if self.recipe.name.is_debiasing() && self.recipe.attributes.is_empty() {
            return Err(DamError::Config(format!(
                "recipe {} needs at least one attribute",
                self.recipe.name
            )));
        }
        let s = self.attention.sample_fraction;
        if !(s > 0.0 && s <= 1.0) {
            return Err(DamError::Config(format!("attention.sample_fraction {s} not in (0, 1]")));
        }
        self.encoder.validate()?;
        self.adapter.validate()?;
        if self.data.source == DataSource::Synthetic {
            self.data.synthetic.validate()?;
        }
        Ok(())
    }

    /// `output_dir`, joined onto the output root when relative.
    pub fn output_dir(&self, root: Option<&Path>) -> PathBuf {
        match root {
            Some(r) if self.output_dir.is_relative() => r.join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }
}

fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| DamError::Config(format!("override {spec:?} is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(DamError::Config(format!("override key {key:?} is malformed")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = path.split_last().expect("non-empty key");
    let mut table = doc;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| DamError::Config(format!("override {key:?}: {p} is not a section")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}
