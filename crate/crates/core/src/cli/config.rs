//! JSON run configuration. Unknown keys and type mismatches are rejected before any work.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::accumulate::{AccumConfig, Policy, DEFAULT_MAX_SORT_ROUNDS, MAX_ACCUM_BITS, MIN_ACCUM_BITS};
use crate::nn::{Preset, ScheduleKind, TrainConfig, DEFAULT_MOMENTUM};
use crate::profile::SweepJob;
use crate::quant;
use crate::sparsity::PruneSchedule;

fn default_momentum() -> f32 {
    DEFAULT_MOMENTUM
}

fn default_rounds() -> usize {
    DEFAULT_MAX_SORT_ROUNDS
}

/// Training hyperparameters; the seed comes from the top-level config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub schedule: ScheduleKind,
    pub epochs: usize,
    #[serde(default)]
    pub qat_epochs: usize,
    pub prune: PruneSchedule,
    pub learning_rate: f32,
    #[serde(default = "default_momentum")]
    pub momentum: f32,
    pub batch_size: usize,
}

/// Accumulator widths and policies evaluated by `profile` and `sweep`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccumGrid {
    pub p: Vec<u32>,
    pub policies: Vec<Policy>,
    #[serde(default = "default_rounds")]
    pub max_sort_rounds: usize,
}

/// Extra sweep axes; every combination becomes one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// `[b_w, b_x]` pairs.
    pub bits: Vec<(u32, u32)>,
    /// Target sparsities; each replaces `train.prune.target`.
    pub sparsities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    /// Directory holding the four MNIST IDX files.
    pub data_dir: PathBuf,
    /// Use only the first samples of each split (quick runs).
    #[serde(default)]
    pub train_limit: Option<usize>,
    #[serde(default)]
    pub eval_limit: Option<usize>,
    pub weight_bits: u32,
    pub act_bits: u32,
    pub seed: u64,
    pub train: TrainSection,
    pub accum: AccumGrid,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
    pub output_dir: PathBuf,
    /// Model read by `eval` and `profile`; defaults to `<output_dir>/model.pqsm`.
    #[serde(default)]
    pub model: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        let bits_ok = |b: u32| (quant::MIN_BITS..=quant::MAX_BITS).contains(&b);
        if !bits_ok(self.weight_bits) || !bits_ok(self.act_bits) {
            return invalid(format!("bitwidths {}/{} outside [2, 16]", self.weight_bits, self.act_bits));
        }
        if self.accum.p.is_empty() || self.accum.policies.is_empty() {
            return invalid("accum grid needs at least one p and one policy".into());
        }
        for &p in &self.accum.p {
            if !(MIN_ACCUM_BITS..=MAX_ACCUM_BITS).contains(&p) {
                return invalid(format!("accumulator width {p} outside [{MIN_ACCUM_BITS}, {MAX_ACCUM_BITS}]"));
            }
        }
        for &policy in &self.accum.policies {
            AccumConfig::with_rounds(32, policy, self.accum.max_sort_rounds).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        self.train_config().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if let Some(s) = &self.sweep {
            if s.bits.is_empty() || s.sparsities.is_empty() {
                return invalid("sweep needs at least one bit pair and one sparsity".into());
            }
            if let Some(&(w, x)) = s.bits.iter().find(|&&(w, x)| !bits_ok(w) || !bits_ok(x)) {
                return invalid(format!("sweep bitwidths {w}/{x} outside [2, 16]"));
            }
            for job in self.sweep_jobs() {
                job.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
            }
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            schedule: t.schedule,
            epochs: t.epochs,
            qat_epochs: t.qat_epochs,
            prune: t.prune,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            batch_size: t.batch_size,
            seed: self.seed,
        }
    }

    /// The single job described by the top-level fields.
    pub fn job(&self) -> SweepJob {
        SweepJob {
            preset: self.preset,
            b_w: self.weight_bits,
            b_x: self.act_bits,
            init_seed: self.seed,
            train: self.train_config(),
        }
    }

    /// Sweep jobs in config order; the top-level job when no sweep section is given.
    pub fn sweep_jobs(&self) -> Vec<SweepJob> {
        let Some(s) = &self.sweep else {
            return vec![self.job()];
        };
        let mut jobs = Vec::new();
        for &(b_w, b_x) in &s.bits {
            for &target in &s.sparsities {
                let mut job = self.job();
                job.b_w = b_w;
                job.b_x = b_x;
                job.train.prune.target = target;
                jobs.push(job);
            }
        }
        jobs
    }

    pub fn accum_configs(&self) -> Vec<AccumConfig> {
        let mut out = Vec::new();
        for &p in &self.accum.p {
            for &policy in &self.accum.policies {
                out.push(AccumConfig::with_rounds(p, policy, self.accum.max_sort_rounds).expect("validated"));
            }
        }
        out
    }

    pub fn model_path(&self) -> PathBuf {
        self.model.clone().unwrap_or_else(|| self.output_dir.join("model.pqsm"))
    }
}
