//! Run configuration files.
//!
//! A run config is TOML with four sections plus two top-level keys:
//!
//! ```toml
//! seed = 0
//! out = "runs/recall"
//!
//! [task]
//! kind = "assoc_recall"
//! vocab = 32
//! pairs = 8
//! seq_len = 64
//!
//! [model]
//! n_layers = 2
//! d_m = 64
//! window = 16
//!
//! [optim]
//! lr = 3e-3
//!
//! [train]
//! steps = 1500
//! batch_size = 32
//! ```
//!
//! `model.vocab`, `model.n_out`, and `model.max_len` default to the task's
//! vocabulary and sequence length. `docs/config.md` lists every key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tasks::{TaskData, TaskSpec};
use crate::train::{OptimConfig, TrainConfig};

fn d_out() -> PathBuf {
    PathBuf::from("runs/default")
}

fn d_bench_steps() -> usize {
    50
}
fn d_bench_warmup() -> usize {
    5
}
fn d_bench_tokens() -> usize {
    256
}
fn d_bench_rates() -> Vec<f64> {
    vec![0.0, 0.25, 0.5, 1.0]
}

/// Settings for `seqboat bench`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    /// Sequence length; the task length when unset.
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default = "d_bench_rates")]
    pub rates: Vec<f64>,
    /// Timed training steps per rate.
    #[serde(default = "d_bench_steps")]
    pub steps: usize,
    #[serde(default = "d_bench_warmup")]
    pub warmup: usize,
    /// Streamed tokens per rate for the latency column.
    #[serde(default = "d_bench_tokens")]
    pub tokens: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            n: None,
            rates: d_bench_rates(),
            steps: d_bench_steps(),
            warmup: d_bench_warmup(),
            tokens: d_bench_tokens(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_out")]
    pub out: PathBuf,
    pub task: TaskSpec,
    /// Raw model table; completed from the task by [`RunConfig::model_config`].
    pub model: toml::Table,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub bench: BenchConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)
            .map_err(|e| Error::Config(e.to_string().trim_end().to_string()))?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// Parses `path`; relative corpus paths are resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        if let (Some(corpus), Some(dir)) = (&cfg.task.corpus, path.parent()) {
            if corpus.is_relative() {
                cfg.task.corpus = Some(dir.join(corpus));
            }
        }
        Ok(cfg)
    }

    /// Materialises the task and the complete model configuration.
    pub fn build(&self) -> Result<(TaskData, ModelConfig)> {
        let data = TaskData::new(&self.task)?;
        let model = self.model_config(&data)?;
        Ok((data, model))
    }

    pub fn model_config(&self, data: &TaskData) -> Result<ModelConfig> {
        let mut table = self.model.clone();
        let defaults = [
            ("vocab", data.vocab),
            ("n_out", data.vocab),
            ("max_len", data.max_len()),
        ];
        for (key, value) in defaults {
            table
                .entry(key)
                .or_insert_with(|| toml::Value::Integer(value as i64));
        }
        let model: ModelConfig = table.try_into().map_err(|e: toml::de::Error| {
            Error::Config(format!("[model] {}", e.to_string().trim_end()))
        })?;
        model.validate()?;
        if model.max_len < data.max_len() {
            return Err(Error::Config(format!(
                "model.max_len ({}) is shorter than the task's sequences ({})",
                model.max_len,
                data.max_len()
            )));
        }
        Ok(model)
    }

    /// Hex SHA-256 of the canonical JSON of the task and model sections.
    pub fn hash(&self, model: &ModelConfig) -> String {
        config_hash(&self.task, model)
    }
}

/// Hex SHA-256 of the canonical JSON of a task and model pair.
pub fn config_hash(task: &TaskSpec, model: &ModelConfig) -> String {
    let json = serde_json::json!({ "task": task, "model": model });
    let digest = Sha256::digest(json.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
