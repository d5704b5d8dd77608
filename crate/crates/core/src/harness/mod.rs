//! Experiment surface: dataset generation, the training driver, and the
//! success / robustness / ablation evaluation suites.

mod dataset;
mod eval;
mod stats;
mod train;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use dataset::{
    episode_samples, generate_dataset, list_episodes, load_episode, record_episode, replay,
    subtask_strings, write_episode, DatasetConfig, DatasetSummary, EpisodeMeta, EpisodeRecord,
    SampleOptions, StepLabel, EPISODE_FORMAT_VERSION,
};
pub use eval::{
    eval_ablation, eval_robustness, eval_success, table4_variants, AblationVariant, NoiseChannel,
    ResultRow, ResultTable,
};
pub use stats::{mcnemar_one_sided, wilson_interval};
pub use train::{
    average_checkpoints, build_samples, load_episodes, load_policy, train, train_on_samples,
    TrainConfig, TrainOutcome,
};

use crate::checkpoint::CheckpointError;
use crate::container::ContainerError;
use crate::encoders::EncoderError;
use crate::expert::ExpertError;
use crate::runtime::{RuntimeConfig, RuntimeError};
use crate::sim::{SimError, TaskConfig};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("io at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Expert(#[from] ExpertError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("{task}: expert failed {failures} of {attempts} episodes (limit {limit:.0}%)")]
    ExpertFailureRate {
        task: String,
        failures: usize,
        attempts: usize,
        limit: f64,
    },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("non-finite loss at step {step}; last good checkpoint: {last_good:?}")]
    NonFiniteLoss {
        step: u64,
        last_good: Option<PathBuf>,
    },
}

impl HarnessError {
    pub fn is_config(&self) -> bool {
        matches!(self, HarnessError::Config(_) | HarnessError::Json(_))
    }
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Seeds at or above this bit are reserved for evaluation.
pub const EVAL_SEED_BIT: u64 = 1 << 40;

/// Scene seed for a training episode attempt.
pub fn train_seed(base: u64, task_index: usize, attempt: usize) -> u64 {
    assert!(task_index < 256 && attempt < 1 << 16, "seed field overflow");
    ((base & 0xFFFF) << 24) | ((task_index as u64) << 16) | attempt as u64
}

/// Scene seed for an evaluation trial; never collides with `train_seed`.
pub fn eval_seed(base: u64, task_index: usize, trial: usize) -> u64 {
    EVAL_SEED_BIT | train_seed(base, task_index, trial)
}

pub fn is_eval_seed(seed: u64) -> bool {
    seed & EVAL_SEED_BIT != 0
}

/// First 12 hex digits of the SHA-256 of the config's JSON.
pub fn config_hash<C: Serialize>(cfg: &C) -> String {
    let bytes = serde_json::to_vec(cfg).expect("config serializes");
    hex::encode(Sha256::digest(&bytes))[..12].to_string()
}

/// Everything one experiment needs, loadable from a single JSON file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub tasks: Vec<TaskConfig>,
    pub episodes_per_task: usize,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub eval_trials: usize,
    pub eval_seed: u64,
    pub rates: Vec<f64>,
    pub ablation: Vec<AblationVariant>,
    pub runtime: RuntimeConfig,
    /// Relative paths resolve against the output root.
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            tasks: vec![crate::sim::TaskConfig::new(
                crate::sim::TaskName::PickPlaceSingle,
            )],
            episodes_per_task: 100,
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            eval_trials: 50,
            eval_seed: 0,
            rates: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
            ablation: table4_variants(),
            runtime: RuntimeConfig::default(),
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.tasks.is_empty() {
            return Err(HarnessError::Config("task list is empty".into()));
        }
        if self.rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(HarnessError::Config("rates must lie in [0, 1]".into()));
        }
        for v in &self.ablation {
            v.validate()?;
        }
        self.runtime
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.train.validate()
    }

    /// `root/<name>-<hash>` unless an explicit output dir is set.
    pub fn output_dir(&self, root: &Path, name: &str) -> PathBuf {
        match &self.output_dir {
            Some(p) if p.is_absolute() => p.clone(),
            Some(p) => root.join(p),
            None => root.join(format!("{name}-{}", config_hash(self))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_spaces_are_disjoint() {
        for base in [0, 1, 7, 0xFFFF, u64::MAX] {
            for task in [0, 3, 255] {
                for i in [0, 1, 999, 65535] {
                    assert!(!is_eval_seed(train_seed(base, task, i)));
                    assert!(is_eval_seed(eval_seed(base, task, i)));
                }
            }
        }
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(config_hash(&a), config_hash(&b));
        b.eval_trials += 1;
        assert_ne!(config_hash(&a), config_hash(&b));
        let text = serde_json::to_string(&a).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(config_hash(&back), config_hash(&a));
    }
}
