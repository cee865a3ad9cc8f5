//! Experiment files: one TOML document describing the task, model, training
//! and decoding setup of a run.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use slimipl::ctc::{train_ngram_lm, DecoderConfig, TokenSeq};
use slimipl::data::{SplitSizes, SynthTaskConfig};
use slimipl::model::ModelConfig;
use slimipl::trainer::{TrainConfig, Variant};

/// Relative output directories are resolved under this variable when set.
pub const OUTPUT_ROOT_ENV: &str = "SLIMIPL_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeSection {
    pub beam_size: usize,
    #[serde(default)]
    pub lm_weight: f64,
    #[serde(default)]
    pub length_bonus: f64,
    /// Order of a token n-gram LM trained on the labeled transcripts. No LM
    /// when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lm_order: Option<usize>,
    #[serde(default = "default_lm_delta")]
    pub lm_delta: f64,
}

fn default_lm_delta() -> f64 {
    0.5
}

impl DecodeSection {
    pub fn decoder(&self, lm_corpus: &[TokenSeq], num_tokens: usize) -> Result<DecoderConfig> {
        let lm = match self.lm_order {
            Some(order) => Some(train_ngram_lm(lm_corpus, order, self.lm_delta, num_tokens)?),
            None => None,
        };
        let cfg = DecoderConfig {
            beam_size: self.beam_size,
            lm_weight: self.lm_weight,
            length_bonus: self.length_bonus,
            lm,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub corpus_seed: u64,
    pub task: SynthTaskConfig,
    pub sizes: SplitSizes,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeSection,
}

impl ExperimentConfig {
    pub fn desk(variant: Variant) -> Self {
        let task = SynthTaskConfig::desk();
        Self {
            output_dir: PathBuf::from(format!("runs/{variant}")),
            corpus_seed: 1000,
            model: ModelConfig::desk(task.feature_dim, task.vocab_size),
            task,
            sizes: SplitSizes::default(),
            train: TrainConfig::desk(variant),
            decode: DecodeSection {
                beam_size: 100,
                lm_weight: 0.0,
                length_bonus: 0.0,
                lm_order: None,
                lm_delta: default_lm_delta(),
            },
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.model.feature_dim != self.task.feature_dim || self.model.vocab_size != self.task.vocab_size {
            bail!(
                "model expects {} features and {} tokens but the task has {} and {}",
                self.model.feature_dim,
                self.model.vocab_size,
                self.task.feature_dim,
                self.task.vocab_size
            );
        }
        if self.decode.beam_size == 0 {
            bail!("decode.beam_size must be at least 1");
        }
        Ok(())
    }

    /// The run directory: `flag` beats the file, and a relative path is
    /// placed under `$SLIMIPL_OUTPUT_ROOT` when that is set.
    pub fn run_dir(&self, flag: Option<&Path>) -> PathBuf {
        let dir = flag.unwrap_or(&self.output_dir);
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if dir.is_relative() && !root.is_empty() => PathBuf::from(root).join(dir),
            _ => dir.to_path_buf(),
        }
    }
}
