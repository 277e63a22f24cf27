use std::path::Path;

use anyhow::Context;
use clap::Args;
use serde::{Deserialize, Serialize};

use semdi::corpus::SplitMode;
use semdi::encoding::MaskingStrategy;
use semdi::model::ModelConfig;
use semdi::training::TrainConfig;

pub const SEED_ENV: &str = "SEMDI_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub mode: SplitMode,
    pub k: usize,
    /// Topics held out as the development set.
    pub dev_topics: usize,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            mode: SplitMode::Ood,
            k: 5,
            dev_topics: 1,
            seed: 42,
        }
    }
}

/// Contents of a `--config` file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }
}

/// Seed from the flag, else `SEMDI_SEED`, else `None`.
pub fn seed_override(flag: Option<u64>) -> anyhow::Result<Option<u64>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .with_context(|| format!("{SEED_ENV}={v:?} is not an unsigned integer")),
        Err(_) => Ok(None),
    }
}

/// Flags shared by every command that trains.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainFlags {
    /// JSON file with `model`, `train` and `split` sections
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    /// Masking strategy: random, e1 or e2
    #[arg(long = "mask")]
    pub mask: Option<MaskingStrategy>,
    /// Seed for initialisation, sampling and splits (falls back to SEMDI_SEED)
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Fraction of negatives kept each epoch
    #[arg(long)]
    pub neg_rate: Option<f64>,
    /// Model width
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Topics held out for checkpoint selection
    #[arg(long)]
    pub dev_topics: Option<usize>,
}

impl TrainFlags {
    /// Loads the config file and applies flags on top.
    pub fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut c = RunConfig::load(self.config.as_deref())?;
        if let Some(s) = seed_override(self.seed)? {
            c.train.seed = s;
            c.split.seed = s;
        }
        set(&mut c.train.masking_strategy, self.mask);
        set(&mut c.train.epochs, self.epochs);
        set(&mut c.train.batch_size, self.batch_size);
        set(&mut c.train.lr, self.lr);
        set(&mut c.train.dropout, self.dropout);
        set(&mut c.train.negative_sampling_rate, self.neg_rate);
        set(&mut c.model.d, self.d);
        set(&mut c.model.heads, self.heads);
        set(&mut c.model.layers, self.layers);
        set(&mut c.model.max_len, self.max_len);
        set(&mut c.split.dev_topics, self.dev_topics);
        c.model.dropout = c.train.dropout;
        Ok(c)
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}
