use std::io::BufRead;

use super::{parse_plan, ActionType, PlanError, StructuredPlan};
use crate::sim::{
    check_success, ground_truth_bbox, placed_on, Destination, Image, SceneState, TaskName,
    HIRES_HEIGHT, HIRES_WIDTH,
};

/// What a planner is shown before each decision.
#[derive(Clone, Debug)]
pub struct PlannerInput {
    pub overall_goal: String,
    pub previous_subtask: Option<String>,
    pub gripper_state: String,
    pub previous_image: Option<Image>,
    pub current_image: Image,
}

impl PlannerInput {
    pub fn new(
        state: &SceneState,
        previous_subtask: Option<String>,
        previous_image: Option<Image>,
        current_image: Image,
    ) -> Self {
        Self {
            overall_goal: state.task.instruction.clone(),
            previous_subtask,
            gripper_state: state.gripper_state_string(),
            previous_image,
            current_image,
        }
    }

    /// Text part of a planner prompt; images travel separately.
    pub fn prompt_text(&self) -> String {
        format!(
            "Overall Goal: {}\nPrevious Subtask Commanded: {}\nCurrent Gripper State: {}\n\
             Respond with a single JSON object with exactly the keys \
             \"next_subtask_description\", \"action_type\", \"target_object\", \"bbox\" \
             ([ymin, xmin, ymax, xmax] in [0,1000]) and no extra text.",
            self.overall_goal,
            self.previous_subtask.as_deref().unwrap_or("none"),
            self.gripper_state
        )
    }
}

/// Produces the next grounded subtask.
pub trait Planner {
    fn plan(
        &mut self,
        state: &SceneState,
        input: &PlannerInput,
    ) -> Result<StructuredPlan, PlanError>;
}

/// Reads privileged state; never fails.
#[derive(Clone, Copy, Debug, Default)]
pub struct OraclePlanner;

impl Planner for OraclePlanner {
    fn plan(
        &mut self,
        state: &SceneState,
        input: &PlannerInput,
    ) -> Result<StructuredPlan, PlanError> {
        Ok(oracle_plan(state, input))
    }
}

/// Plans arriving as one JSON object per line from any text source, e.g.
/// the stdout of an external model server.
pub struct ExternalPlanner<R> {
    reader: R,
}

impl<R: BufRead> ExternalPlanner<R> {
    pub fn new(reader: R) -> Self {
        Self { reader }
    }
}

impl<R: BufRead> Planner for ExternalPlanner<R> {
    fn plan(
        &mut self,
        _state: &SceneState,
        _input: &PlannerInput,
    ) -> Result<StructuredPlan, PlanError> {
        let mut line = String::new();
        loop {
            line.clear();
            let n = self
                .reader
                .read_line(&mut line)
                .map_err(|e| PlanError::MalformedJson(e.to_string()))?;
            if n == 0 {
                return Err(PlanError::StreamExhausted);
            }
            if !line.trim().is_empty() {
                return parse_plan(&line);
            }
        }
    }
}

pub(crate) fn describe(action: ActionType, target: &str, held: Option<&str>) -> String {
    match action {
        ActionType::Pick => format!("pick the {target}"),
        ActionType::Place => format!("place the {} on the {target}", held.unwrap_or("object")),
        ActionType::Click => format!("click the {target}"),
        ActionType::Done => "task complete".to_string(),
    }
}

fn grounded(state: &SceneState, action: ActionType, target: usize) -> StructuredPlan {
    let (Ok(obj), Ok(bbox)) = (
        state.object(target),
        ground_truth_bbox(state, target, HIRES_WIDTH, HIRES_HEIGHT),
    ) else {
        return StructuredPlan::done();
    };
    let held = state.held().map(|h| h.name());
    StructuredPlan {
        next_subtask_description: describe(action, &obj.name(), held.as_deref()),
        action_type: action,
        target_object: obj.name(),
        bbox,
    }
}

/// Finite-state decomposition of the task from privileged state.
///
/// A pick that did not take hold yields the same pick again, with the box
/// recomputed for the current frame.
pub fn oracle_plan(state: &SceneState, _input: &PlannerInput) -> StructuredPlan {
    if check_success(state) {
        return StructuredPlan::done();
    }
    let task = &state.task;
    let held = state.held().map(|o| o.id);
    match task.config.name {
        TaskName::ClickSingle | TaskName::ClickAmongK => {
            match (state.clicked, task.target_ids.first()) {
                (None, Some(&t)) => grounded(state, ActionType::Click, t),
                _ => StructuredPlan::done(),
            }
        }
        TaskName::PickPlaceSingle | TaskName::PickPlaceAmongK => {
            let (Some(&obj), Some(Destination::Object(dest))) =
                (task.target_ids.first(), task.destination)
            else {
                return StructuredPlan::done();
            };
            match held {
                Some(h) if h == obj => grounded(state, ActionType::Place, dest),
                Some(_) => StructuredPlan::done(),
                None => grounded(state, ActionType::Pick, obj),
            }
        }
        TaskName::StackK => {
            let ids = &task.target_ids;
            let Some(broken) = (1..ids.len()).find(|&i| !placed_on(state, ids[i], ids[i - 1]))
            else {
                return StructuredPlan::done();
            };
            match held {
                Some(h) if h == ids[broken] => grounded(state, ActionType::Place, ids[broken - 1]),
                Some(_) => StructuredPlan::done(),
                None => grounded(state, ActionType::Pick, ids[broken]),
            }
        }
    }
}

/// Whether the plan's subtask already holds in `state`.
pub fn subtask_satisfied(state: &SceneState, plan: &StructuredPlan) -> bool {
    if plan.is_terminal() {
        return true;
    }
    let Ok(target) = crate::sim::resolve_target(state, plan) else {
        return false;
    };
    match plan.action_type {
        ActionType::Pick => state.object(target).map(|o| o.held).unwrap_or(false),
        ActionType::Place => {
            state.held().is_none()
                && state
                    .objects
                    .iter()
                    .any(|o| o.resting_on == Some(target) && placed_on(state, o.id, target))
        }
        ActionType::Click => state.clicked == Some(target),
        ActionType::Done => true,
    }
}
