//! Experiment configuration, loadable from TOML with full defaults.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::AttackSpec;
use crate::error::{Error, Result};
use crate::model::{LoraConfig, ModelConfig, TrainConfig};

/// Weight precision at an adjustment point: either full f32 or fake-quantized
/// to a bit width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Full,
    Int8,
    Int4,
}

impl Precision {
    pub fn bits(self) -> Option<u8> {
        match self {
            Precision::Full => None,
            Precision::Int8 => Some(8),
            Precision::Int4 => Some(4),
        }
    }

    pub fn from_bits(bits: Option<u8>) -> Result<Self> {
        match bits {
            None => Ok(Precision::Full),
            Some(8) => Ok(Precision::Int8),
            Some(4) => Ok(Precision::Int4),
            Some(b) => Err(Error::UnsupportedBits(b)),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::Full => "full",
            Precision::Int8 => "int8",
            Precision::Int4 => "int4",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" | "none" | "fp32" | "32" => Ok(Precision::Full),
            "int8" | "8" => Ok(Precision::Int8),
            "int4" | "4" => Ok(Precision::Int4),
            other => Err(Error::Config(format!(
                "unknown precision {other:?} (expected full, int8, or int4)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSection {
    /// Clean samples for base-model pretraining.
    pub n_pretrain: usize,
    /// Samples for the finetuning corpus (the poisonable one).
    pub n_train: usize,
    /// Clean held-out samples kept aside for audits; never trained on and
    /// never poisoned.
    pub n_val: usize,
    /// Held-out samples per evaluation set.
    pub n_test: usize,
    /// Fraction of the finetuning corpus that gets the trojan.
    pub poison_rate: f64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            n_pretrain: 2000,
            n_train: 2000,
            n_val: 256,
            n_test: 256,
            poison_rate: 0.5,
        }
    }
}

/// Hyperparameters for one training phase; the seed is derived at run time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyper {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Hyper {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
            seed,
            ..TrainConfig::default()
        }
    }
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            steps: 200,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 0.0,
        }
    }
}

fn default_pretrain() -> Hyper {
    Hyper {
        steps: 300,
        ..Hyper::default()
    }
}

fn default_finetune() -> Hyper {
    Hyper {
        steps: 200,
        lr: 5e-3,
        ..Hyper::default()
    }
}

fn default_dap2_grid() -> Vec<Precision> {
    vec![Precision::Full, Precision::Int8, Precision::Int4]
}

fn default_max_new_tokens() -> usize {
    128
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub corpus: CorpusSection,
    pub attack: AttackSpec,
    pub model: ModelConfig,
    pub lora: LoraConfig,
    #[serde(rename = "pretrain")]
    pub pretrain: Hyper,
    #[serde(rename = "finetune")]
    pub finetune: Hyper,
    /// Precision applied to the base model before finetuning.
    pub dap1: Precision,
    /// Precisions applied before inference; one report row group each.
    pub dap2_grid: Vec<Precision>,
    pub max_new_tokens: usize,
    /// When nonempty, the pipeline runs once per listed seed in a
    /// `seed-<n>` subdirectory of the run directory and merges the per-seed
    /// reports at the top level; `seed` is then ignored.
    pub replicate_seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            corpus: CorpusSection::default(),
            attack: AttackSpec::default(),
            model: ModelConfig::default(),
            lora: LoraConfig::default(),
            pretrain: default_pretrain(),
            finetune: default_finetune(),
            dap1: Precision::Full,
            dap2_grid: default_dap2_grid(),
            max_new_tokens: default_max_new_tokens(),
            replicate_seeds: Vec::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig =
            toml::from_str(&body).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serialization failed: {e}")))?;
        std::fs::write(path, body)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.lora.validate()?;
        if !(0.0..=1.0).contains(&self.corpus.poison_rate) {
            return Err(Error::Config(format!(
                "corpus.poison_rate must be in [0, 1], got {}",
                self.corpus.poison_rate
            )));
        }
        for (name, n) in [
            ("corpus.n_pretrain", self.corpus.n_pretrain),
            ("corpus.n_train", self.corpus.n_train),
            ("corpus.n_val", self.corpus.n_val),
            ("corpus.n_test", self.corpus.n_test),
        ] {
            if n == 0 {
                return Err(Error::Config(format!("{name} must be nonzero")));
            }
        }
        if self.dap2_grid.is_empty() {
            return Err(Error::Config("dap2_grid must not be empty".into()));
        }
        let mut seeds = self.replicate_seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.replicate_seeds.len() {
            return Err(Error::Config("replicate_seeds must be distinct".into()));
        }
        if self.max_new_tokens == 0 || self.max_new_tokens >= self.model.max_seq_len {
            return Err(Error::Config(format!(
                "max_new_tokens must be in [1, {}), got {}",
                self.model.max_seq_len, self.max_new_tokens
            )));
        }
        if self.attack.trigger.trim().is_empty() || self.attack.detection.is_empty() {
            return Err(Error::Config(
                "attack trigger and detection string must be nonempty".into(),
            ));
        }
        Ok(())
    }
}
