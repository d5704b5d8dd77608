//! Closed-loop execution: the planner issues grounded subtasks, the policy
//! executes chunks under the current plan, and unfinished subtasks are
//! re-issued up to a retry cap.

mod policy;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use policy::{
    action_from_model, action_to_model, build_input, state_to_model, CropSource, LearnedPolicy,
    ObservationConfig, Policy, RandomPolicy, ScriptedPolicy,
};

use crate::encoders::EncoderError;
use crate::expert::ExpertError;
use crate::plan::{
    corrupt_bbox_with, corrupt_language, subtask_satisfied, subtask_vocabulary, BboxCorruption,
    PlanError, Planner, PlannerInput, StructuredPlan,
};
use crate::sim::{
    check_success, render, reset, step, Image, SceneState, SimError, TaskConfig, View,
};

/// Resolution of the frames shown to the planner.
pub const PLANNER_VIEW: (usize, usize) = (192, 108);

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Expert(#[from] ExpertError),
    #[error("invalid runtime config: {0}")]
    Config(String),
    #[error("trace: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corruption {
    pub bbox_rate: f64,
    pub lang_rate: f64,
    #[serde(default)]
    pub bbox: BboxCorruption,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuntimeConfig {
    /// Policy chunks executed per planner call.
    pub replan_interval: usize,
    pub max_plans: usize,
    pub max_steps: usize,
    /// Re-issues allowed per subtask before giving up.
    pub retry_cap: usize,
    pub corruption: Option<Corruption>,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            replan_interval: 1,
            max_plans: 40,
            max_steps: 400,
            retry_cap: 3,
            corruption: None,
        }
    }
}

impl RuntimeConfig {
    pub fn validate(&self) -> Result<(), RuntimeError> {
        if self.replan_interval == 0
            || self.max_plans == 0
            || self.max_steps == 0
            || self.retry_cap == 0
        {
            return Err(RuntimeError::Config(
                "interval, caps and retry_cap must be positive".into(),
            ));
        }
        if let Some(c) = &self.corruption {
            if !(0.0..=1.0).contains(&c.bbox_rate) || !(0.0..=1.0).contains(&c.lang_rate) {
                return Err(RuntimeError::Config(
                    "corruption rates must lie in [0, 1]".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// The planner declared the task complete.
    Sentinel,
    Success,
    MaxSteps,
    MaxPlans,
    RetryCap,
    PlannerExhausted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    Plan {
        step: usize,
        /// What the planner said.
        plan: StructuredPlan,
        /// What the policy was given.
        executed: StructuredPlan,
        reissue: bool,
        bbox_corrupted: bool,
        lang_corrupted: bool,
    },
    Chunk {
        step: usize,
        index: usize,
        actions: usize,
    },
    Replan {
        step: usize,
        reason: String,
    },
    Done {
        step: usize,
        success: bool,
        reason: Termination,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeResult {
    pub success: bool,
    pub plans_issued: Vec<StructuredPlan>,
    pub steps: usize,
    pub retries: usize,
    pub parse_errors: usize,
    pub termination: Termination,
    pub trace: Vec<TraceEvent>,
    pub trace_path: Option<PathBuf>,
    pub final_state: SceneState,
}

impl EpisodeResult {
    pub fn trace_lines(&self) -> String {
        let mut out = String::new();
        for e in &self.trace {
            out.push_str(&serde_json::to_string(e).expect("trace events serialize"));
            out.push('\n');
        }
        out
    }
}

/// True once the interval is used up or the subtask already holds.
pub fn should_replan(
    state: &SceneState,
    last_plan: &StructuredPlan,
    chunks_done: usize,
    cfg: &RuntimeConfig,
) -> bool {
    chunks_done >= cfg.replan_interval || subtask_satisfied(state, last_plan)
}

fn planner_frame(state: &SceneState) -> Image {
    render(state, View::Global, PLANNER_VIEW.0, PLANNER_VIEW.1)
}

/// Runs one episode to termination; deterministic in `seed`.
pub fn run_episode(
    task: &TaskConfig,
    seed: u64,
    planner: &mut dyn Planner,
    policy: &mut dyn Policy,
    cfg: &RuntimeConfig,
    trace_path: Option<&Path>,
) -> Result<EpisodeResult, RuntimeError> {
    cfg.validate()?;
    let mut state = reset(task, seed)?;
    policy.reset(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0_22_0F7);
    let mut trace = Vec::new();
    let mut plans_issued = Vec::new();
    let (mut steps, mut retries, mut parse_errors, mut subtask_retries) =
        (0usize, 0usize, 0usize, 0usize);
    let mut previous_subtask: Option<String> = None;
    let mut previous_image: Option<Image> = None;
    let mut last: Option<StructuredPlan> = None;

    let termination = loop {
        if check_success(&state) {
            break Termination::Success;
        }
        if steps >= cfg.max_steps {
            break Termination::MaxSteps;
        }
        if plans_issued.len() + parse_errors >= cfg.max_plans {
            break Termination::MaxPlans;
        }
        let input = PlannerInput::new(
            &state,
            previous_subtask.clone(),
            previous_image.clone(),
            planner_frame(&state),
        );
        let plan = match planner.plan(&state, &input) {
            Ok(p) => p,
            Err(PlanError::StreamExhausted) => break Termination::PlannerExhausted,
            Err(e) => {
                parse_errors += 1;
                retries += 1;
                subtask_retries += 1;
                trace.push(TraceEvent::Replan {
                    step: steps,
                    reason: format!("parse_error:{}", e.code()),
                });
                if subtask_retries > cfg.retry_cap {
                    break Termination::RetryCap;
                }
                continue;
            }
        };
        if plan.is_terminal() {
            plans_issued.push(plan);
            break Termination::Sentinel;
        }
        let reissue = last.as_ref().is_some_and(|l| l.same_subtask(&plan));
        if reissue {
            retries += 1;
            subtask_retries += 1;
            if subtask_retries > cfg.retry_cap {
                plans_issued.push(plan);
                break Termination::RetryCap;
            }
        } else {
            subtask_retries = 0;
        }

        let (mut executed, mut lang_corrupted, mut bbox_corrupted) = (plan.clone(), false, false);
        if let Some(c) = &cfg.corruption {
            if c.lang_rate > 0.0 {
                // a one-subtask scene has nothing to swap in
                match corrupt_language(
                    &executed,
                    c.lang_rate,
                    &mut rng,
                    &subtask_vocabulary(&state),
                ) {
                    Ok(swapped) => {
                        lang_corrupted =
                            swapped.next_subtask_description != executed.next_subtask_description;
                        executed = swapped;
                    }
                    Err(PlanError::VocabularyTooSmall) => {}
                    Err(e) => return Err(e.into()),
                }
            }
            if c.bbox_rate > 0.0 {
                let (shifted, hit) = corrupt_bbox_with(&executed, c.bbox_rate, &mut rng, &c.bbox);
                bbox_corrupted = hit;
                executed = shifted;
            }
        }
        trace.push(TraceEvent::Plan {
            step: steps,
            plan: plan.clone(),
            executed: executed.clone(),
            reissue,
            bbox_corrupted,
            lang_corrupted,
        });
        plans_issued.push(plan.clone());

        let mut chunks_done = 0;
        let mut pre_chunk;
        loop {
            pre_chunk = planner_frame(&state);
            let chunk = policy.act(&state, &executed)?;
            let mut n = 0;
            for a in chunk.rows() {
                if steps >= cfg.max_steps {
                    break;
                }
                state = step(&state, a)?;
                steps += 1;
                n += 1;
            }
            chunks_done += 1;
            trace.push(TraceEvent::Chunk {
                step: steps,
                index: chunks_done,
                actions: n,
            });
            if steps >= cfg.max_steps
                || check_success(&state)
                || should_replan(&state, &executed, chunks_done, cfg)
            {
                break;
            }
        }
        let reason = if subtask_satisfied(&state, &executed) {
            "satisfied"
        } else if steps >= cfg.max_steps {
            "max_steps"
        } else {
            "interval"
        };
        trace.push(TraceEvent::Replan {
            step: steps,
            reason: reason.to_string(),
        });
        previous_subtask = Some(executed.next_subtask_description.clone());
        previous_image = Some(pre_chunk);
        last = Some(plan);
    };
    assert!(steps <= cfg.max_steps, "episode overran its step cap");

    let success = check_success(&state);
    trace.push(TraceEvent::Done {
        step: steps,
        success,
        reason: termination,
    });
    let mut result = EpisodeResult {
        success,
        plans_issued,
        steps,
        retries,
        parse_errors,
        termination,
        trace,
        trace_path: None,
        final_state: state,
    };
    if let Some(p) = trace_path {
        let mut w = BufWriter::new(File::create(p)?);
        w.write_all(result.trace_lines().as_bytes())?;
        w.flush()?;
        result.trace_path = Some(p.to_path_buf());
    }
    Ok(result)
}
