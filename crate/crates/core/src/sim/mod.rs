//! Deterministic 2D tabletop: scene sampling, stepping, success predicates.
//!
//! World coordinates live in `[0,1]²` with `y` pointing down, matching image
//! rows. Objects are axis-aligned rectangles (blocks, plates) or circles
//! (buttons). Grasping is binary AABB containment at the moment the gripper
//! closes.

mod expert;
mod render;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub(crate) use expert::resolve_target;
pub use expert::{scripted_expert, ExpertConfig, ExpertRollout};
pub use render::{ground_truth_bbox, render, Image, View, HIRES_HEIGHT, HIRES_WIDTH};

/// Gripper closes when `open_fraction` drops below this.
pub const GRASP_THRESHOLD: f64 = 0.5;
/// Dimension of a low-level command: `(dx, dy, gripper_target)`.
pub const ACTION_DIM: usize = 3;
/// Dimension of the proprioceptive state: `(x, y, open_fraction)`.
pub const STATE_DIM: usize = 3;

const PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("object placement failed after {0} attempts")]
    PlacementFailed(usize),
    #[error("non-finite action")]
    NonFiniteAction,
    #[error("action has {got} entries, expected {ACTION_DIM}")]
    ActionDim { got: usize },
    #[error("unknown object id {0}")]
    UnknownObject(usize),
    #[error("object {0} has no visible pixels at this resolution")]
    Invisible(usize),
    #[error("expert precondition failed: {0}")]
    ExpertPrecondition(String),
    #[error("target unreachable: {0}")]
    Unreachable(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [0.86, 0.16, 0.16],
            Color::Green => [0.16, 0.66, 0.22],
            Color::Blue => [0.16, 0.26, 0.86],
            Color::Yellow => [0.92, 0.80, 0.10],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Rect,
    Circle,
}

pub const CLASS_BLOCK: &str = "block";
pub const CLASS_PLATE: &str = "plate";
pub const CLASS_BUTTON: &str = "button";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub id: usize,
    pub class_name: String,
    pub color: Color,
    pub center: [f64; 2],
    pub half_extent: [f64; 2],
    pub held: bool,
    /// Object this one was released onto, if any.
    #[serde(default)]
    pub resting_on: Option<usize>,
}

impl ObjectRecord {
    pub fn shape(&self) -> Shape {
        if self.class_name == CLASS_BUTTON {
            Shape::Circle
        } else {
            Shape::Rect
        }
    }

    /// Name used in plans and instructions, e.g. `"red block"`.
    pub fn name(&self) -> String {
        format!("{} {}", self.color.name(), self.class_name)
    }

    pub fn graspable(&self) -> bool {
        self.class_name == CLASS_BLOCK
    }

    pub fn aabb_contains(&self, p: [f64; 2]) -> bool {
        (p[0] - self.center[0]).abs() <= self.half_extent[0]
            && (p[1] - self.center[1]).abs() <= self.half_extent[1]
    }

    /// Shape-accurate containment (circle for buttons).
    pub fn contains(&self, p: [f64; 2]) -> bool {
        match self.shape() {
            Shape::Rect => self.aabb_contains(p),
            Shape::Circle => {
                let dx = p[0] - self.center[0];
                let dy = p[1] - self.center[1];
                dx * dx + dy * dy <= self.half_extent[0] * self.half_extent[0]
            }
        }
    }

    fn overlaps(&self, other: &ObjectRecord, margin: f64) -> bool {
        (self.center[0] - other.center[0]).abs()
            < self.half_extent[0] + other.half_extent[0] + margin
            && (self.center[1] - other.center[1]).abs()
                < self.half_extent[1] + other.half_extent[1] + margin
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gripper {
    pub pos: [f64; 2],
    pub open_fraction: f64,
}

impl Gripper {
    pub fn is_closed(&self) -> bool {
        self.open_fraction < GRASP_THRESHOLD
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum TaskName {
    ClickSingle,
    ClickAmongK,
    PickPlaceSingle,
    PickPlaceAmongK,
    StackK,
}

impl TaskName {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskName::ClickSingle => "click_single",
            TaskName::ClickAmongK => "click_among_k",
            TaskName::PickPlaceSingle => "pick_place_single",
            TaskName::PickPlaceAmongK => "pick_place_among_k",
            TaskName::StackK => "stack_k",
        }
    }
}

/// What to sample at reset: a task family plus its size knobs.
///
/// Parses from `name[:k][:identical]`, e.g. `click_among_k:2:identical`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TaskConfig {
    pub name: TaskName,
    pub k: usize,
    /// For `click_among_k`: all candidates share one color and the
    /// instruction disambiguates by position.
    pub identical: bool,
}

impl TryFrom<String> for TaskConfig {
    type Error = SimError;

    fn try_from(s: String) -> Result<Self, SimError> {
        s.parse()
    }
}

impl From<TaskConfig> for String {
    fn from(t: TaskConfig) -> String {
        t.to_string()
    }
}

impl TaskConfig {
    pub fn new(name: TaskName) -> Self {
        let k = match name {
            TaskName::ClickSingle | TaskName::PickPlaceSingle => 1,
            TaskName::ClickAmongK | TaskName::PickPlaceAmongK => 3,
            TaskName::StackK => 2,
        };
        Self {
            name,
            k,
            identical: false,
        }
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = k;
        self
    }

    pub fn identical(mut self) -> Self {
        self.identical = true;
        self
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidTask(m.to_string()));
        match self.name {
            TaskName::ClickSingle | TaskName::PickPlaceSingle if self.k != 1 => {
                bad("single-object tasks have k = 1")
            }
            TaskName::ClickAmongK if !(2..=4).contains(&self.k) => {
                bad("click_among_k needs 2 <= k <= 4")
            }
            TaskName::PickPlaceAmongK if !(2..=3).contains(&self.k) => {
                bad("pick_place_among_k needs 2 <= k <= 3")
            }
            TaskName::StackK if !(2..=4).contains(&self.k) => bad("stack_k needs 2 <= k <= 4"),
            _ if self.identical && self.name != TaskName::ClickAmongK => {
                bad("identical targets only apply to click_among_k")
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for TaskConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.name.as_str())?;
        if matches!(
            self.name,
            TaskName::ClickAmongK | TaskName::PickPlaceAmongK | TaskName::StackK
        ) {
            write!(f, ":{}", self.k)?;
        }
        if self.identical {
            write!(f, ":identical")?;
        }
        Ok(())
    }
}

impl FromStr for TaskConfig {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, SimError> {
        let mut parts = s.trim().split(':');
        let name = match parts.next().unwrap_or("") {
            "click_single" => TaskName::ClickSingle,
            "click_among_k" => TaskName::ClickAmongK,
            "pick_place_single" => TaskName::PickPlaceSingle,
            "pick_place_among_k" => TaskName::PickPlaceAmongK,
            "stack_k" => TaskName::StackK,
            other => return Err(SimError::InvalidTask(format!("unknown task {other:?}"))),
        };
        let mut cfg = TaskConfig::new(name);
        for p in parts {
            if p == "identical" {
                cfg.identical = true;
            } else {
                cfg.k = p
                    .parse()
                    .map_err(|_| SimError::InvalidTask(format!("bad task size {p:?}")))?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Destination {
    Object(usize),
    Point([f64; 2]),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub config: TaskConfig,
    pub instruction: String,
    /// Click/pick targets; for `stack_k` the bottom-to-top order.
    pub target_ids: Vec<usize>,
    pub destination: Option<Destination>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneState {
    pub objects: Vec<ObjectRecord>,
    pub gripper: Gripper,
    pub task: TaskSpec,
    pub step_index: u64,
    /// First button pressed in this episode.
    pub clicked: Option<usize>,
    pub background: [f32; 3],
}

impl SceneState {
    pub fn object(&self, id: usize) -> Result<&ObjectRecord, SimError> {
        self.objects
            .iter()
            .find(|o| o.id == id)
            .ok_or(SimError::UnknownObject(id))
    }

    fn object_mut(&mut self, id: usize) -> &mut ObjectRecord {
        self.objects
            .iter_mut()
            .find(|o| o.id == id)
            .expect("object id checked by caller")
    }

    pub fn held(&self) -> Option<&ObjectRecord> {
        self.objects.iter().find(|o| o.held)
    }

    pub fn proprio(&self) -> [f64; STATE_DIM] {
        [
            self.gripper.pos[0],
            self.gripper.pos[1],
            self.gripper.open_fraction,
        ]
    }

    /// Stack height: number of supports beneath the object.
    pub fn height(&self, id: usize) -> usize {
        let mut h = 0;
        let mut cur = self.object(id).ok().and_then(|o| o.resting_on);
        while let Some(below) = cur {
            h += 1;
            if h > self.objects.len() {
                break;
            }
            cur = self.object(below).ok().and_then(|o| o.resting_on);
        }
        h
    }

    /// Topmost non-held object containing `p`, excluding `except`.
    fn topmost_at(
        &self,
        p: [f64; 2],
        except: Option<usize>,
        filter: impl Fn(&ObjectRecord) -> bool,
    ) -> Option<usize> {
        self.objects
            .iter()
            .filter(|o| !o.held && Some(o.id) != except && filter(o) && o.aabb_contains(p))
            .max_by_key(|o| (self.height(o.id), o.class_name != CLASS_PLATE, o.id))
            .map(|o| o.id)
    }

    pub fn gripper_state_string(&self) -> String {
        match self.held() {
            Some(o) => format!("closed, holding the {}", o.name()),
            None if self.gripper.is_closed() => "closed, empty".to_string(),
            None => "open, empty".to_string(),
        }
    }
}

fn scene_rng(task: &TaskConfig, seed: u64) -> ChaCha8Rng {
    let tag = task.name as u64 * 1009 + task.k as u64 * 31 + task.identical as u64;
    ChaCha8Rng::seed_from_u64(seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

struct Placer<'a> {
    rng: &'a mut ChaCha8Rng,
    placed: Vec<ObjectRecord>,
}

impl Placer<'_> {
    fn place(
        &mut self,
        class: &str,
        color: Color,
        half: [f64; 2],
        accept: impl Fn(&ObjectRecord, &[ObjectRecord]) -> bool,
    ) -> Result<usize, SimError> {
        let margin = 0.03;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let lo = [half[0] + 0.04, half[1] + 0.04];
            let cx = self.rng.gen_range(lo[0]..1.0 - lo[0]);
            let cy = self.rng.gen_range(lo[1]..1.0 - lo[1]);
            let cand = ObjectRecord {
                id: self.placed.len(),
                class_name: class.to_string(),
                color,
                center: [cx, cy],
                half_extent: half,
                held: false,
                resting_on: None,
            };
            if self.placed.iter().all(|o| !cand.overlaps(o, margin)) && accept(&cand, &self.placed)
            {
                self.placed.push(cand);
                return Ok(self.placed.len() - 1);
            }
        }
        Err(SimError::PlacementFailed(PLACEMENT_ATTEMPTS))
    }
}

const BUTTON_RADIUS: f64 = 0.06;
const BLOCK_HALF: f64 = 0.05;
const PLATE_HALF: f64 = 0.1;

fn ordinal(i: usize) -> &'static str {
    ["first", "second", "third", "fourth"][i]
}

/// Samples a scene for `task`; deterministic in `(task, seed)`.
pub fn reset(task: &TaskConfig, seed: u64) -> Result<SceneState, SimError> {
    task.validate()?;
    let mut rng = scene_rng(task, seed);
    let background = [
        rng.gen_range(0.72f32..0.9),
        rng.gen_range(0.72f32..0.9),
        rng.gen_range(0.72f32..0.9),
    ];
    let mut colors = Color::ALL.to_vec();
    colors.shuffle(&mut rng);
    let mut placer = Placer {
        rng: &mut rng,
        placed: Vec::new(),
    };
    let any = |_: &ObjectRecord, _: &[ObjectRecord]| true;

    let (instruction, target_ids, destination) = match task.name {
        TaskName::ClickSingle => {
            let id = placer.place(CLASS_BUTTON, colors[0], [BUTTON_RADIUS; 2], any)?;
            (
                format!("click the {} button", colors[0].name()),
                vec![id],
                None,
            )
        }
        TaskName::ClickAmongK => {
            let mut ids = Vec::new();
            for i in 0..task.k {
                let color = if task.identical { colors[0] } else { colors[i] };
                // identical candidates must be separable by horizontal order
                let id = placer.place(CLASS_BUTTON, color, [BUTTON_RADIUS; 2], |c, prev| {
                    !task.identical || prev.iter().all(|p| (p.center[0] - c.center[0]).abs() > 0.1)
                })?;
                ids.push(id);
            }
            let target = ids[placer.rng.gen_range(0..ids.len())];
            let instruction = if task.identical {
                let mut by_x = ids.clone();
                by_x.sort_by(|&a, &b| {
                    placer.placed[a].center[0].total_cmp(&placer.placed[b].center[0])
                });
                let rank = by_x
                    .iter()
                    .position(|&i| i == target)
                    .expect("target placed");
                if task.k == 2 {
                    let side = if rank == 0 { "left" } else { "right" };
                    format!("click the {side} button")
                } else {
                    format!("click the {} button from the left", ordinal(rank))
                }
            } else {
                format!("click the {} button", placer.placed[target].color.name())
            };
            (instruction, vec![target], None)
        }
        TaskName::PickPlaceSingle | TaskName::PickPlaceAmongK => {
            let plate = placer.place(CLASS_PLATE, colors[0], [PLATE_HALF; 2], any)?;
            let mut blocks = Vec::new();
            for color in colors.iter().skip(1).take(task.k) {
                blocks.push(placer.place(CLASS_BLOCK, *color, [BLOCK_HALF; 2], any)?);
            }
            let target = blocks[placer.rng.gen_range(0..blocks.len())];
            (
                format!(
                    "put the {} on the {}",
                    placer.placed[target].name(),
                    placer.placed[plate].name()
                ),
                vec![target],
                Some(Destination::Object(plate)),
            )
        }
        TaskName::StackK => {
            let mut blocks = Vec::new();
            for color in colors.iter().take(task.k) {
                blocks.push(placer.place(CLASS_BLOCK, *color, [BLOCK_HALF; 2], any)?);
            }
            blocks.shuffle(placer.rng);
            let names: Vec<&str> = blocks
                .iter()
                .map(|&b| placer.placed[b].color.name())
                .collect();
            let instruction = if task.k == 2 {
                format!("stack the {} block on the {} block", names[1], names[0])
            } else {
                let rest: Vec<String> = names[1..].iter().map(|n| format!("then {n}")).collect();
                format!(
                    "stack the blocks with {} at the bottom, {}",
                    names[0],
                    rest.join(", ")
                )
            };
            (instruction, blocks, None)
        }
    };

    let objects = placer.placed;
    let gripper = Gripper {
        pos: [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)],
        open_fraction: 1.0,
    };
    Ok(SceneState {
        objects,
        gripper,
        task: TaskSpec {
            config: *task,
            instruction,
            target_ids,
            destination,
        },
        step_index: 0,
        clicked: None,
        background,
    })
}

/// `horizon × dim` block of low-level commands, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionChunk {
    pub horizon: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl ActionChunk {
    pub fn new(horizon: usize, dim: usize, data: Vec<f64>) -> Self {
        assert_eq!(horizon * dim, data.len(), "ActionChunk shape mismatch");
        Self { horizon, dim, data }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.dim)
    }

    /// The command that keeps the gripper still after `last`.
    pub fn hold_after(last: &[f64; ACTION_DIM]) -> [f64; ACTION_DIM] {
        [0.0, 0.0, last[2]]
    }

    /// Splits commands into `horizon`-length chunks, padding the tail with holds.
    pub fn split(actions: &[[f64; ACTION_DIM]], horizon: usize) -> Vec<ActionChunk> {
        actions
            .chunks(horizon)
            .map(|c| {
                let hold = Self::hold_after(c.last().expect("non-empty chunk"));
                let mut data: Vec<f64> = c.iter().flatten().copied().collect();
                for _ in c.len()..horizon {
                    data.extend_from_slice(&hold);
                }
                ActionChunk::new(horizon, ACTION_DIM, data)
            })
            .collect()
    }

    /// Window of `horizon` commands starting at `start`, padded with holds.
    pub fn window(actions: &[[f64; ACTION_DIM]], start: usize, horizon: usize) -> ActionChunk {
        let end = (start + horizon).min(actions.len());
        Self::split(&actions[start..end], horizon).remove(0)
    }

    pub fn is_within_bounds(&self) -> bool {
        self.rows().all(|r| {
            r.iter().all(|v| v.is_finite())
                && r[0].abs() <= MAX_DELTA + 1e-12
                && r[1].abs() <= MAX_DELTA + 1e-12
                && (0.0..=1.0).contains(&r[2])
        })
    }
}

/// Per-step motion limit on each planar axis.
pub const MAX_DELTA: f64 = 0.08;

/// Applies one `(dx, dy, gripper_target)` command.
pub fn step(state: &SceneState, action: &[f64]) -> Result<SceneState, SimError> {
    if action.len() != ACTION_DIM {
        return Err(SimError::ActionDim { got: action.len() });
    }
    if action.iter().any(|v| !v.is_finite()) {
        return Err(SimError::NonFiniteAction);
    }
    let mut next = state.clone();
    next.step_index += 1;

    let dx = action[0].clamp(-MAX_DELTA, MAX_DELTA);
    let dy = action[1].clamp(-MAX_DELTA, MAX_DELTA);
    let held = state.held().map(|o| {
        (
            o.id,
            [
                o.center[0] - state.gripper.pos[0],
                o.center[1] - state.gripper.pos[1],
            ],
        )
    });
    // keep the held object's center inside the workspace too
    let (lo, hi) = match held {
        Some((_, off)) => (
            [(-off[0]).max(0.0), (-off[1]).max(0.0)],
            [(1.0 - off[0]).min(1.0), (1.0 - off[1]).min(1.0)],
        ),
        None => ([0.0, 0.0], [1.0, 1.0]),
    };
    next.gripper.pos = [
        (state.gripper.pos[0] + dx).clamp(lo[0], hi[0]),
        (state.gripper.pos[1] + dy).clamp(lo[1], hi[1]),
    ];
    if let Some((id, off)) = held {
        let g = next.gripper.pos;
        next.object_mut(id).center = [g[0] + off[0], g[1] + off[1]];
    }

    let was_closed = state.gripper.is_closed();
    next.gripper.open_fraction = action[2].clamp(0.0, 1.0);
    let now_closed = next.gripper.is_closed();
    let g = next.gripper.pos;

    if !was_closed && now_closed && held.is_none() {
        if let Some(id) = next.topmost_at(g, None, ObjectRecord::graspable) {
            for o in next.objects.iter_mut() {
                if o.resting_on == Some(id) {
                    o.resting_on = None;
                }
            }
            let o = next.object_mut(id);
            o.held = true;
            o.resting_on = None;
        } else if next.clicked.is_none() {
            next.clicked = next
                .objects
                .iter()
                .filter(|o| o.class_name == CLASS_BUTTON && o.contains(g))
                .map(|o| o.id)
                .next();
        }
    }
    if was_closed && !now_closed {
        if let Some((id, _)) = held {
            let c = next.object(id).expect("held object").center;
            let support = next.topmost_at(c, Some(id), |o| o.class_name != CLASS_BUTTON);
            let o = next.object_mut(id);
            o.held = false;
            o.resting_on = support;
        }
    }
    Ok(next)
}

/// Whether the object rests on (or, for plates, lies within) `support`.
pub fn placed_on(state: &SceneState, obj: usize, support: usize) -> bool {
    match (state.object(obj), state.object(support)) {
        (Ok(o), Ok(s)) => !o.held && o.resting_on == Some(support) && s.aabb_contains(o.center),
        _ => false,
    }
}

/// Task-specific success predicate; a pure function of the state.
pub fn check_success(state: &SceneState) -> bool {
    let t = &state.task;
    match t.config.name {
        TaskName::ClickSingle | TaskName::ClickAmongK => {
            state.clicked.is_some() && state.clicked == t.target_ids.first().copied()
        }
        TaskName::PickPlaceSingle | TaskName::PickPlaceAmongK => {
            match (t.target_ids.first(), t.destination) {
                (Some(&obj), Some(Destination::Object(dest))) => placed_on(state, obj, dest),
                (Some(&obj), Some(Destination::Point(p))) => state
                    .object(obj)
                    .map(|o| {
                        !o.held && (o.center[0] - p[0]).hypot(o.center[1] - p[1]) <= BLOCK_HALF
                    })
                    .unwrap_or(false),
                _ => false,
            }
        }
        TaskName::StackK => t
            .target_ids
            .windows(2)
            .all(|w| placed_on(state, w[1], w[0])),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn aabb_overlap(a: &ObjectRecord, b: &ObjectRecord) -> bool {
        let ax = (
            a.center[0] - a.half_extent[0],
            a.center[0] + a.half_extent[0],
        );
        let bx = (
            b.center[0] - b.half_extent[0],
            b.center[0] + b.half_extent[0],
        );
        let ay = (
            a.center[1] - a.half_extent[1],
            a.center[1] + a.half_extent[1],
        );
        let by = (
            b.center[1] - b.half_extent[1],
            b.center[1] + b.half_extent[1],
        );
        ax.0 < bx.1 && bx.0 < ax.1 && ay.0 < by.1 && by.0 < ay.1
    }

    #[test]
    fn reset_is_deterministic() {
        let t = TaskConfig::new(TaskName::ClickSingle);
        assert_eq!(reset(&t, 0).unwrap(), reset(&t, 0).unwrap());
        assert_ne!(reset(&t, 0).unwrap(), reset(&t, 1).unwrap());
    }

    #[test]
    fn among_k_places_distinct_nonoverlapping_blocks() {
        let t = TaskConfig::new(TaskName::PickPlaceAmongK).with_k(3);
        let s = reset(&t, 7).unwrap();
        let blocks: Vec<_> = s
            .objects
            .iter()
            .filter(|o| o.class_name == CLASS_BLOCK)
            .collect();
        assert_eq!(blocks.len(), 3);
        let mut colors: Vec<_> = blocks.iter().map(|b| b.color).collect();
        colors.dedup();
        assert_eq!(colors.len(), 3);
        for (i, a) in s.objects.iter().enumerate() {
            for b in &s.objects[i + 1..] {
                assert!(!aabb_overlap(a, b), "{a:?} overlaps {b:?}");
            }
        }
    }

    #[test]
    fn stack_k_needs_two() {
        let t = TaskConfig {
            name: TaskName::StackK,
            k: 1,
            identical: false,
        };
        assert!(matches!(reset(&t, 0), Err(SimError::InvalidTask(_))));
        assert!("stack_k:1".parse::<TaskConfig>().is_err());
    }

    #[test]
    fn task_config_parses() {
        let t: TaskConfig = "click_among_k:2:identical".parse().unwrap();
        assert_eq!(
            t,
            TaskConfig::new(TaskName::ClickAmongK).with_k(2).identical()
        );
        assert_eq!(t.to_string(), "click_among_k:2:identical");
        assert_eq!("pick_place_single".parse::<TaskConfig>().unwrap().k, 1);
    }

    #[test]
    fn zero_action_only_advances_step() {
        let s = reset(&TaskConfig::new(TaskName::PickPlaceSingle), 3).unwrap();
        let n = step(&s, &[0.0, 0.0, 1.0]).unwrap();
        let mut expect = s.clone();
        expect.step_index += 1;
        assert_eq!(n, expect);
    }

    #[test]
    fn closing_on_object_grasps_it() {
        let mut s = reset(&TaskConfig::new(TaskName::PickPlaceSingle), 3).unwrap();
        let block = s.task.target_ids[0];
        let c = s.object(block).unwrap().center;
        s.gripper.pos = [c[0] + 0.02, c[1] - 0.03];
        // containment oracle
        assert!(s.object(block).unwrap().aabb_contains(s.gripper.pos));
        let n = step(&s, &[0.0, 0.0, 0.0]).unwrap();
        assert!(n.object(block).unwrap().held);
        // offset is preserved while held
        let m = step(&n, &[0.05, -0.02, 0.0]).unwrap();
        let o = m.object(block).unwrap();
        assert!((o.center[0] - m.gripper.pos[0] + 0.02).abs() < 1e-12);
        assert!((o.center[1] - m.gripper.pos[1] - 0.03).abs() < 1e-12);
    }

    #[test]
    fn closing_on_empty_space_grasps_nothing() {
        let mut s = reset(&TaskConfig::new(TaskName::PickPlaceSingle), 3).unwrap();
        s.gripper.pos = [0.0, 0.0];
        let n = step(&s, &[0.0, 0.0, 0.0]).unwrap();
        assert!(n.held().is_none());
    }

    #[test]
    fn gripper_clamps_at_edges() {
        let mut s = reset(&TaskConfig::new(TaskName::ClickSingle), 1).unwrap();
        s.gripper.pos = [0.99, 0.01];
        let n = step(&s, &[0.5, -0.5, 1.0]).unwrap();
        assert_eq!(n.gripper.pos, [1.0, 0.0]);
    }

    #[test]
    fn non_finite_action_rejected() {
        let s = reset(&TaskConfig::new(TaskName::ClickSingle), 1).unwrap();
        assert_eq!(
            step(&s, &[f64::NAN, 0.0, 1.0]),
            Err(SimError::NonFiniteAction)
        );
        assert!(step(&s, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn fresh_scene_is_not_successful() {
        for name in [
            TaskName::ClickSingle,
            TaskName::ClickAmongK,
            TaskName::PickPlaceSingle,
            TaskName::PickPlaceAmongK,
            TaskName::StackK,
        ] {
            let s = reset(&TaskConfig::new(name), 11).unwrap();
            assert!(!check_success(&s), "{name:?}");
        }
    }

    #[test]
    fn identical_instruction_names_side() {
        let t = TaskConfig::new(TaskName::ClickAmongK).with_k(2).identical();
        let s = reset(&t, 5).unwrap();
        let tgt = s.object(s.task.target_ids[0]).unwrap();
        let other = s.objects.iter().find(|o| o.id != tgt.id).unwrap();
        assert_eq!(tgt.color, other.color);
        let left = tgt.center[0] < other.center[0];
        assert_eq!(s.task.instruction.contains("left"), left);
    }
}
