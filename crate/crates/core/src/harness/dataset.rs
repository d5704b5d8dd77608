use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{io_err, train_seed, HarnessError};
use crate::container::RawArray;
use crate::encoders::Encoder;
use crate::expert::TrainSample;
use crate::plan::{
    corrupt_bbox_with, oracle_plan, ActionType, BboxCorruption, NormalizedBox, PlannerInput,
    StructuredPlan,
};
use crate::runtime::{action_to_model, build_input, ObservationConfig, PLANNER_VIEW};
use crate::scalar::Scalar;
use crate::sim::{
    check_success, ground_truth_bbox, render, reset, resolve_target, scripted_expert, step,
    ActionChunk, ExpertConfig, SceneState, SimError, TaskConfig, View, ACTION_DIM, HIRES_HEIGHT,
    HIRES_WIDTH, STATE_DIM,
};
use crate::tensor::Mat;

pub const EPISODE_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub global_view: [usize; 2],
    pub wrist_view: [usize; 2],
    /// Abort when a task's expert failure fraction exceeds this.
    pub max_failure_rate: f64,
    pub max_plans: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            global_view: [192, 108],
            wrist_view: [96, 96],
            max_failure_rate: 0.05,
            max_plans: 32,
        }
    }
}

/// Per-step annotation: the subtask in force when the action was taken.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLabel {
    pub subtask: String,
    pub action_type: ActionType,
    pub target_object: String,
    pub target_id: usize,
    pub bbox: NormalizedBox,
    /// Index of the subtask within the episode.
    pub segment: usize,
}

impl StepLabel {
    pub fn plan(&self) -> StructuredPlan {
        StructuredPlan {
            next_subtask_description: self.subtask.clone(),
            action_type: self.action_type,
            target_object: self.target_object.clone(),
            bbox: self.bbox,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub format_version: u32,
    pub task: TaskConfig,
    pub seed: u64,
    pub instruction: String,
    pub num_steps: usize,
    pub global_view: [usize; 2],
    pub wrist_view: [usize; 2],
    pub steps: Vec<StepLabel>,
}

#[derive(Clone, Debug)]
pub struct EpisodeRecord {
    pub meta: EpisodeMeta,
    pub states: Vec<[f64; STATE_DIM]>,
    pub actions: Vec<[f64; ACTION_DIM]>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub episodes: Vec<PathBuf>,
    pub attempts: Vec<(String, usize)>,
    pub expert_failures: Vec<(String, usize)>,
    pub infeasible_resets: Vec<(String, usize)>,
}

/// Rolls the oracle planner and scripted expert through one scene.
///
/// Returns the record and the full pre-action scene for every step.
pub fn record_episode(
    task: &TaskConfig,
    seed: u64,
    cfg: &DatasetConfig,
) -> Result<(EpisodeRecord, Vec<SceneState>), SimError> {
    let mut state = reset(task, seed)?;
    let instruction = state.task.instruction.clone();
    let expert = ExpertConfig::default();
    let (mut scenes, mut actions, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    let mut previous: Option<String> = None;
    for segment in 0..cfg.max_plans {
        let frame = render(&state, View::Global, PLANNER_VIEW.0, PLANNER_VIEW.1);
        let plan = oracle_plan(
            &state,
            &PlannerInput::new(&state, previous.clone(), None, frame),
        );
        if plan.is_terminal() {
            break;
        }
        let target_id = resolve_target(&state, &plan)?;
        let rollout = scripted_expert(&state, &plan, &expert)?;
        let label = StepLabel {
            subtask: plan.next_subtask_description.clone(),
            action_type: plan.action_type,
            target_object: plan.target_object.clone(),
            target_id,
            bbox: plan.bbox,
            segment,
        };
        for a in rollout.actions {
            scenes.push(state.clone());
            labels.push(label.clone());
            state = step(&state, &a)?;
            actions.push(a);
        }
        previous = Some(plan.next_subtask_description);
    }
    if !check_success(&state) {
        return Err(SimError::Unreachable(format!(
            "{task} seed {seed}: rollout ended without success"
        )));
    }
    let record = EpisodeRecord {
        meta: EpisodeMeta {
            format_version: EPISODE_FORMAT_VERSION,
            task: *task,
            seed,
            instruction,
            num_steps: actions.len(),
            global_view: cfg.global_view,
            wrist_view: cfg.wrist_view,
            steps: labels,
        },
        states: scenes.iter().map(|s| s.proprio()).collect(),
        actions,
    };
    Ok((record, scenes))
}

fn render_stack(scenes: &[SceneState], view: View, [w, h]: [usize; 2]) -> RawArray {
    let mut data = Vec::with_capacity(scenes.len() * w * h * 3);
    for s in scenes {
        data.extend_from_slice(&render(s, view, w, h).pixels);
    }
    RawArray::from_f32(vec![scenes.len(), h, w, 3], &data)
}

pub fn write_episode(
    dir: &Path,
    rec: &EpisodeRecord,
    scenes: &[SceneState],
) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let meta = dir.join("meta.json");
    let mut text = serde_json::to_string_pretty(&rec.meta)?;
    text.push('\n');
    std::fs::write(&meta, text).map_err(io_err(&meta))?;
    render_stack(scenes, View::Global, rec.meta.global_view)
        .save(&dir.join("obs_global.npyish"))?;
    render_stack(scenes, View::Wrist, rec.meta.wrist_view).save(&dir.join("obs_wrist.npyish"))?;
    let flat = |rows: &[[f64; 3]]| rows.iter().flatten().copied().collect::<Vec<f64>>();
    RawArray::from_scalars(vec![rec.states.len(), STATE_DIM], &flat(&rec.states))
        .save(&dir.join("state.bin"))?;
    RawArray::from_scalars(vec![rec.actions.len(), ACTION_DIM], &flat(&rec.actions))
        .save(&dir.join("actions.bin"))?;
    Ok(())
}

fn read_rows(path: &Path, n: usize) -> Result<Vec<[f64; 3]>, HarnessError> {
    let arr = RawArray::load(path)?;
    if arr.dims != [n, 3] {
        return Err(HarnessError::Dataset(format!(
            "{}: dims {:?}, expected [{n}, 3]",
            path.display(),
            arr.dims
        )));
    }
    Ok(arr
        .to_scalars::<f64>()?
        .chunks(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect())
}

pub fn load_episode(dir: &Path) -> Result<EpisodeRecord, HarnessError> {
    let meta_path = dir.join("meta.json");
    let text = std::fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let meta: EpisodeMeta = serde_json::from_str(&text)?;
    if meta.format_version != EPISODE_FORMAT_VERSION {
        return Err(HarnessError::Dataset(format!(
            "unsupported episode format {}",
            meta.format_version
        )));
    }
    if meta.steps.len() != meta.num_steps {
        return Err(HarnessError::Dataset(format!(
            "{}: annotation count mismatch",
            dir.display()
        )));
    }
    let states = read_rows(&dir.join("state.bin"), meta.num_steps)?;
    let actions = read_rows(&dir.join("actions.bin"), meta.num_steps)?;
    Ok(EpisodeRecord {
        meta,
        states,
        actions,
    })
}

/// Re-simulates the stored actions; checks them against the stored states.
pub fn replay(rec: &EpisodeRecord) -> Result<Vec<SceneState>, HarnessError> {
    let mut state = reset(&rec.meta.task, rec.meta.seed)?;
    let mut out = Vec::with_capacity(rec.actions.len());
    for (t, a) in rec.actions.iter().enumerate() {
        if state.proprio() != rec.states[t] {
            return Err(HarnessError::Dataset(format!(
                "{} seed {}: replay diverges at step {t}",
                rec.meta.task, rec.meta.seed
            )));
        }
        out.push(state.clone());
        state = step(&state, a)?;
    }
    Ok(out)
}

/// Episode directories under `root`, sorted by name.
pub fn list_episodes(root: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(root).map_err(io_err(root))? {
        let p = entry.map_err(io_err(root))?.path();
        if p.join("meta.json").is_file() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Writes `episodes_per_task` successful episodes per task under `out`.
pub fn generate_dataset(
    tasks: &[TaskConfig],
    episodes_per_task: usize,
    seed: u64,
    cfg: &DatasetConfig,
    out: &Path,
) -> Result<DatasetSummary, HarnessError> {
    let mut summary = DatasetSummary::default();
    for (ti, task) in tasks.iter().enumerate() {
        let (mut kept, mut attempts, mut failures, mut infeasible) = (0, 0, 0, 0);
        let slug = task.to_string().replace(':', "-");
        while kept < episodes_per_task {
            if attempts >= 1 << 16 {
                return Err(HarnessError::Dataset(format!(
                    "{task}: seed space exhausted"
                )));
            }
            let s = train_seed(seed, ti, attempts);
            attempts += 1;
            match record_episode(task, s, cfg) {
                Ok((rec, scenes)) => {
                    let dir = out.join(format!("{slug}_{kept:05}"));
                    write_episode(&dir, &rec, &scenes)?;
                    summary.episodes.push(dir);
                    kept += 1;
                }
                Err(SimError::PlacementFailed(_)) => infeasible += 1,
                Err(e) => {
                    log::warn!("{task} seed {s}: {e}");
                    failures += 1;
                }
            }
            let tried = kept + failures;
            let too_many = failures as f64 > cfg.max_failure_rate * tried as f64;
            if too_many && (tried >= 20 || kept == episodes_per_task) {
                return Err(HarnessError::ExpertFailureRate {
                    task: task.to_string(),
                    failures,
                    attempts: tried,
                    limit: cfg.max_failure_rate * 100.0,
                });
            }
        }
        summary.attempts.push((task.to_string(), attempts));
        summary.expert_failures.push((task.to_string(), failures));
        summary
            .infeasible_resets
            .push((task.to_string(), infeasible));
    }
    let path = out.join("summary.json");
    std::fs::write(&path, serde_json::to_string_pretty(&summary)?).map_err(io_err(&path))?;
    Ok(summary)
}

/// Distinct subtask strings, in first-seen order.
pub fn subtask_strings(episodes: &[EpisodeRecord]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for e in episodes {
        for l in &e.meta.steps {
            if !out.contains(&l.subtask) {
                out.push(l.subtask.clone());
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleOptions {
    pub horizon: usize,
    pub obs: ObservationConfig,
    /// Fraction of samples whose box is replaced by a shifted one while the
    /// target actions stay those of the true subtask.
    pub bbox_noise_rate: f64,
    /// Fraction of samples whose box frames a different object instead.
    pub bbox_swap_rate: f64,
}

/// One sample per step: the scene and label at `t` paired with the next
/// `horizon` commands of the same subtask, padded with holds.
pub fn episode_samples<T: Scalar, R: Rng + ?Sized>(
    encoder: &Encoder,
    rec: &EpisodeRecord,
    scenes: &[SceneState],
    opts: &SampleOptions,
    rng: &mut R,
) -> Result<Vec<TrainSample<T>>, HarnessError> {
    let labels = &rec.meta.steps;
    let mut out = Vec::with_capacity(labels.len());
    for (t, label) in labels.iter().enumerate() {
        let end = (t..labels.len())
            .find(|&j| labels[j].segment != label.segment)
            .unwrap_or(labels.len());
        let chunk = ActionChunk::window(&rec.actions[..end], t, opts.horizon);
        let mut data = Vec::with_capacity(chunk.data.len());
        for row in chunk.rows() {
            data.extend(action_to_model(row).iter().map(|&v| T::of(v)));
        }
        let mut plan = label.plan();
        let others: Vec<usize> = scenes[t]
            .objects
            .iter()
            .map(|o| o.id)
            .filter(|&id| id != label.target_id)
            .collect();
        let u: f64 = rng.gen();
        if u < opts.bbox_swap_rate && !others.is_empty() {
            let id = others[rng.gen_range(0..others.len())];
            plan.bbox = ground_truth_bbox(&scenes[t], id, HIRES_WIDTH, HIRES_HEIGHT)?;
        } else {
            plan =
                corrupt_bbox_with(&plan, opts.bbox_noise_rate, rng, &BboxCorruption::default()).0;
        }
        let input = build_input(encoder, &scenes[t], &plan.bbox, &label.subtask, &opts.obs)?;
        out.push(TrainSample {
            input,
            actions: Mat::from_vec(opts.horizon, ACTION_DIM, data),
        });
    }
    Ok(out)
}
