use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{
    episode_samples, list_episodes, load_episode, replay, subtask_strings, EpisodeRecord,
    SampleOptions,
};
use super::{io_err, HarnessError};
use crate::checkpoint::{Checkpoint, RngState};
use crate::expert::{Model, ModelConfig, TrainSample};
use crate::optim::{AdamW, AdamWConfig};
use crate::runtime::{LearnedPolicy, ObservationConfig};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// An empty vocabulary is filled from the dataset's subtask strings.
    pub model: ModelConfig,
    pub optimizer: AdamWConfig,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub checkpoint_every: u64,
    /// Periodic checkpoints kept on disk.
    pub keep_checkpoints: usize,
    pub obs: ObservationConfig,
    pub bbox_noise_rate: f64,
    pub bbox_swap_rate: f64,
    pub copy_local_from_global: bool,
    /// Evaluate the mean of this many final checkpoints (1 = final only).
    pub average_last: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optimizer: AdamWConfig::default(),
            steps: 10_000,
            batch_size: 32,
            seed: 0,
            checkpoint_every: 1000,
            keep_checkpoints: 3,
            obs: ObservationConfig::default(),
            bbox_noise_rate: 0.0,
            bbox_swap_rate: 0.0,
            copy_local_from_global: true,
            average_last: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if self.steps == 0 || self.batch_size == 0 || self.checkpoint_every == 0 {
            return bad("steps, batch_size and checkpoint_every must be positive");
        }
        if !(0.0..=1.0).contains(&self.bbox_noise_rate)
            || !(0.0..=1.0).contains(&self.bbox_swap_rate)
        {
            return bad("bbox_noise_rate and bbox_swap_rate must lie in [0, 1]");
        }
        if self.average_last == 0 || self.average_last > self.keep_checkpoints.max(1) {
            return bad("average_last must be between 1 and keep_checkpoints");
        }
        self.model
            .dit
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.model
            .encoder
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn sample_options(&self) -> SampleOptions {
        SampleOptions {
            horizon: self.model.dit.horizon,
            obs: self.obs,
            bbox_noise_rate: self.bbox_noise_rate,
            bbox_swap_rate: self.bbox_swap_rate,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub checkpoint: Checkpoint<T>,
    pub path: PathBuf,
    /// Loss per step taken in this call.
    pub losses: Vec<f64>,
    pub curve_path: PathBuf,
}

/// Replays every episode and turns each step into a training sample.
pub fn build_samples<T: Scalar>(
    cfg: &TrainConfig,
    model: &Model<T>,
    episodes: &[EpisodeRecord],
) -> Result<Vec<TrainSample<T>>, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0A06_0A7A);
    let opts = cfg.sample_options();
    let mut out = Vec::new();
    for rec in episodes {
        let scenes = replay(rec)?;
        out.extend(episode_samples(
            &model.encoder,
            rec,
            &scenes,
            &opts,
            &mut rng,
        )?);
    }
    Ok(out)
}

fn checkpoint_name(step: u64) -> String {
    format!("ckpt_{step:07}.bin")
}

fn periodic_checkpoints(dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("ckpt_") && n.ends_with(".bin"))
        })
        .collect();
    out.sort();
    Ok(out)
}

fn read_curve(path: &Path, upto: u64) -> Vec<String> {
    let Ok(text) = std::fs::read_to_string(path) else {
        return Vec::new();
    };
    text.lines()
        .skip(1)
        .filter(|l| {
            l.split(',')
                .next()
                .and_then(|s| s.parse::<u64>().ok())
                .is_some_and(|s| s <= upto)
        })
        .map(str::to_string)
        .collect()
}

fn write_curve(path: &Path, rows: &[String]) -> Result<(), HarnessError> {
    let mut text = String::from("step,loss,lr,grad_norm\n");
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(io_err(path))
}

/// Minibatch flow-matching training from `start` up to `cfg.steps`.
///
/// Batches are drawn with replacement from a seeded stream whose state is
/// checkpointed, so resuming reproduces the uninterrupted run exactly.
pub fn train_on_samples<T: Scalar>(
    cfg: &TrainConfig,
    start: Checkpoint<T>,
    samples: &[TrainSample<T>],
    out_dir: &Path,
) -> Result<TrainOutcome<T>, HarnessError> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(HarnessError::Dataset("no training samples".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut ck = start;
    let mut opt = ck
        .optimizer
        .take()
        .unwrap_or_else(|| AdamW::new(&ck.model.params, cfg.optimizer.clone()));
    let mut rng = match &ck.rng {
        Some(s) => s.restore()?,
        None => ChaCha8Rng::seed_from_u64(cfg.seed),
    };
    if ck.step == 0 && cfg.copy_local_from_global {
        ck.model.init_local_from_global()?;
    }
    ck.meta = serde_json::json!({ "train": cfg, "obs": cfg.obs });
    let curve_path = out_dir.join("loss.csv");
    let mut curve = if ck.step > 0 {
        read_curve(&curve_path, ck.step)
    } else {
        Vec::new()
    };
    let mut losses = Vec::new();
    let mut last_good: Option<PathBuf> = None;

    while ck.step < cfg.steps {
        let batch: Vec<&TrainSample<T>> = (0..cfg.batch_size)
            .map(|_| &samples[rng.gen_range(0..samples.len())])
            .collect();
        let (loss, grads) = ck.model.cfm_loss(&batch, &mut rng)?;
        let loss = loss.to_f64().unwrap_or(f64::NAN);
        if !loss.is_finite() {
            return Err(HarnessError::NonFiniteLoss {
                step: ck.step,
                last_good,
            });
        }
        let stats = opt.step(&mut ck.model.params, &grads);
        ck.step += 1;
        losses.push(loss);
        let mut row = String::new();
        write!(
            row,
            "{},{loss:.8e},{:.6e},{:.6e}",
            ck.step, stats.lr, stats.grad_norm
        )
        .expect("string write");
        curve.push(row);
        if ck.step.is_multiple_of(100) {
            log::info!(
                "step {} loss {loss:.5} grad {:.3}",
                ck.step,
                stats.grad_norm
            );
        }
        if ck.step.is_multiple_of(cfg.checkpoint_every) || ck.step == cfg.steps {
            ck.optimizer = Some(opt.clone());
            ck.rng = Some(RngState::capture(&rng));
            let path = out_dir.join(checkpoint_name(ck.step));
            ck.save(&path)?;
            write_curve(&curve_path, &curve)?;
            last_good = Some(path);
            let all = periodic_checkpoints(out_dir)?;
            for old in all
                .iter()
                .take(all.len().saturating_sub(cfg.keep_checkpoints.max(1)))
            {
                std::fs::remove_file(old).map_err(io_err(old))?;
            }
        }
    }
    ck.optimizer = Some(opt);
    ck.rng = Some(RngState::capture(&rng));
    let path = out_dir.join("final.bin");
    ck.save(&path)?;
    write_curve(&curve_path, &curve)?;
    Ok(TrainOutcome {
        checkpoint: ck,
        path,
        losses,
        curve_path,
    })
}

pub fn load_episodes(dataset: &Path) -> Result<Vec<EpisodeRecord>, HarnessError> {
    let dirs = list_episodes(dataset)?;
    if dirs.is_empty() {
        return Err(HarnessError::Dataset(format!(
            "no episodes under {}",
            dataset.display()
        )));
    }
    dirs.iter().map(|d| load_episode(d)).collect()
}

/// Trains on a dataset directory, resuming from the newest checkpoint in
/// `out_dir` when `resume` is set.
pub fn train(
    cfg: &TrainConfig,
    dataset: &Path,
    out_dir: &Path,
    resume: bool,
) -> Result<TrainOutcome<f32>, HarnessError> {
    cfg.validate()?;
    let episodes = load_episodes(dataset)?;
    let latest = if resume && out_dir.exists() {
        periodic_checkpoints(out_dir)?.pop()
    } else {
        None
    };
    let start = match latest {
        Some(p) => {
            log::info!("resuming from {}", p.display());
            Checkpoint::<f32>::load(&p)?
        }
        None => {
            let mut mc = cfg.model.clone();
            if mc.encoder.vocab.is_empty() {
                mc.encoder.vocab = subtask_strings(&episodes);
            }
            Checkpoint::new(Model::new(mc)?)
        }
    };
    let samples = build_samples(cfg, &start.model, &episodes)?;
    log::info!("{} samples from {} episodes", samples.len(), episodes.len());
    train_on_samples(cfg, start, &samples, out_dir)
}

/// Parameter-wise mean of several checkpoints of one model.
pub fn average_checkpoints<T: Scalar>(paths: &[PathBuf]) -> Result<Checkpoint<T>, HarnessError> {
    let (first, rest) = paths
        .split_first()
        .ok_or_else(|| HarnessError::Config("no checkpoints to average".into()))?;
    let mut acc = Checkpoint::<T>::load(first)?;
    for p in rest {
        let other = Checkpoint::<T>::load(p)?;
        if other.model.cfg != acc.model.cfg {
            return Err(HarnessError::Config(
                "averaged checkpoints differ in config".into(),
            ));
        }
        for i in 0..acc.model.params.len() {
            let id = crate::tensor::ParamId(i);
            let o = other.model.params.get(id).clone();
            let a = acc.model.params.get_mut(id);
            for (x, y) in a.data.iter_mut().zip(&o.data) {
                *x += *y;
            }
        }
    }
    let n = T::of(paths.len() as f64);
    for i in 0..acc.model.params.len() {
        let a = acc.model.params.get_mut(crate::tensor::ParamId(i));
        for x in a.data.iter_mut() {
            *x /= n;
        }
    }
    acc.optimizer = None;
    Ok(acc)
}

/// A frozen policy from a checkpoint, with the observation switches it was
/// trained under.
pub fn load_policy(path: &Path, average_last: usize) -> Result<LearnedPolicy<f32>, HarnessError> {
    let ck = if average_last > 1 {
        let dir = path.parent().unwrap_or(Path::new("."));
        let all = periodic_checkpoints(dir)?;
        let take = &all[all.len().saturating_sub(average_last)..];
        average_checkpoints::<f32>(take)?
    } else {
        Checkpoint::<f32>::load(path)?
    };
    let obs: ObservationConfig = match ck.meta.get("obs") {
        Some(v) => serde_json::from_value(v.clone())?,
        None => ObservationConfig::default(),
    };
    Ok(LearnedPolicy::new(ck.model, obs)?)
}
