use super::{placed_on, step, ActionChunk, SceneState, SimError, ACTION_DIM, MAX_DELTA};
use crate::plan::{ActionType, StructuredPlan};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExpertConfig {
    pub horizon: usize,
    /// Hard cap on simulated steps for one subtask.
    pub max_steps: usize,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            horizon: 16,
            max_steps: 200,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExpertRollout {
    /// Unpadded per-step commands.
    pub actions: Vec<[f64; ACTION_DIM]>,
    /// `actions` split into horizon-length chunks, the last padded with holds.
    pub chunks: Vec<ActionChunk>,
    pub final_state: SceneState,
}

struct Driver {
    state: SceneState,
    actions: Vec<[f64; ACTION_DIM]>,
    budget: usize,
}

impl Driver {
    fn push(&mut self, a: [f64; ACTION_DIM]) -> Result<(), SimError> {
        if self.actions.len() >= self.budget {
            return Err(SimError::Unreachable("expert step budget exhausted".into()));
        }
        self.state = step(&self.state, &a)?;
        self.actions.push(a);
        Ok(())
    }

    fn approach(&mut self, goal: [f64; 2], grip: f64) -> Result<(), SimError> {
        loop {
            let g = self.state.gripper.pos;
            let d = [goal[0] - g[0], goal[1] - g[1]];
            if d[0].abs() < 1e-12 && d[1].abs() < 1e-12 {
                return Ok(());
            }
            self.push([
                d[0].clamp(-MAX_DELTA, MAX_DELTA),
                d[1].clamp(-MAX_DELTA, MAX_DELTA),
                grip,
            ])?;
            if self.state.gripper.pos == g {
                return Err(SimError::Unreachable(format!(
                    "gripper cannot reach {goal:?}"
                )));
            }
        }
    }

    fn ensure_open(&mut self) -> Result<(), SimError> {
        if self.state.gripper.is_closed() {
            self.push([0.0, 0.0, 1.0])?;
        }
        Ok(())
    }
}

/// Resolves the plan's target by name, breaking ties by box overlap.
pub(crate) fn resolve_target(state: &SceneState, plan: &StructuredPlan) -> Result<usize, SimError> {
    let want = crate::plan::normalize_name(&plan.target_object);
    let candidates: Vec<_> = state
        .objects
        .iter()
        .filter(|o| crate::plan::normalize_name(&o.name()) == want)
        .collect();
    match candidates.len() {
        0 => Err(SimError::ExpertPrecondition(format!(
            "no object named {:?}",
            plan.target_object
        ))),
        1 => Ok(candidates[0].id),
        _ => {
            let mut best = (f64::NEG_INFINITY, candidates[0].id);
            for o in candidates {
                let b =
                    super::ground_truth_bbox(state, o.id, super::HIRES_WIDTH, super::HIRES_HEIGHT)?;
                let iou = b.iou(&plan.bbox);
                if iou > best.0 {
                    best = (iou, o.id);
                }
            }
            Ok(best.1)
        }
    }
}

/// Waypoint controller (approach, act, hold) for one subtask.
///
/// The commands are verified by simulating them: the returned rollout
/// always ends with the subtask predicate satisfied.
pub fn scripted_expert(
    state: &SceneState,
    plan: &StructuredPlan,
    cfg: &ExpertConfig,
) -> Result<ExpertRollout, SimError> {
    let target = resolve_target(state, plan)?;
    let mut drv = Driver {
        state: state.clone(),
        actions: Vec::new(),
        budget: cfg.max_steps,
    };
    match plan.action_type {
        ActionType::Pick => {
            if let Some(h) = state.held() {
                return Err(SimError::ExpertPrecondition(format!(
                    "already holding {}",
                    h.name()
                )));
            }
            let obj = state.object(target)?;
            if !obj.graspable() {
                return Err(SimError::ExpertPrecondition(format!(
                    "{} is not graspable",
                    obj.name()
                )));
            }
            let goal = obj.center;
            drv.ensure_open()?;
            drv.approach(goal, 1.0)?;
            drv.push([0.0, 0.0, 0.0])?;
            if !drv.state.object(target)?.held {
                return Err(SimError::Unreachable(format!("grasp of {target} failed")));
            }
        }
        ActionType::Place => {
            let held = state
                .held()
                .ok_or_else(|| SimError::ExpertPrecondition("place with nothing held".into()))?;
            let held_id = held.id;
            if held_id == target {
                return Err(SimError::ExpertPrecondition(
                    "cannot place an object on itself".into(),
                ));
            }
            let dest = state.object(target)?.center;
            let off = [
                held.center[0] - state.gripper.pos[0],
                held.center[1] - state.gripper.pos[1],
            ];
            let goal = [dest[0] - off[0], dest[1] - off[1]];
            if !(0.0..=1.0).contains(&goal[0]) || !(0.0..=1.0).contains(&goal[1]) {
                return Err(SimError::Unreachable(format!(
                    "place goal {goal:?} outside workspace"
                )));
            }
            drv.approach(goal, 0.0)?;
            drv.push([0.0, 0.0, 1.0])?;
            if !placed_on(&drv.state, held_id, target) {
                return Err(SimError::Unreachable(format!(
                    "placement on {target} failed"
                )));
            }
        }
        ActionType::Click => {
            let goal = state.object(target)?.center;
            drv.ensure_open()?;
            drv.approach(goal, 1.0)?;
            drv.push([0.0, 0.0, 0.0])?;
            if drv.state.clicked != Some(target) {
                return Err(SimError::Unreachable(format!(
                    "click on {target} did not register"
                )));
            }
        }
        ActionType::Done => {
            return Err(SimError::ExpertPrecondition(
                "terminal plan has no motion".into(),
            ));
        }
    }
    let chunks = ActionChunk::split(&drv.actions, cfg.horizon);
    Ok(ExpertRollout {
        actions: drv.actions,
        chunks,
        final_state: drv.state,
    })
}
