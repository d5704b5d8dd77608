use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::RuntimeError;
use crate::encoders::Encoder;
use crate::expert::{Model, PolicyInput};
use crate::plan::{crop_image, NormalizedBox, StructuredPlan};
use crate::scalar::Scalar;
use crate::sim::{
    render, scripted_expert, ActionChunk, ExpertConfig, SceneState, View, ACTION_DIM, HIRES_HEIGHT,
    HIRES_WIDTH, MAX_DELTA, STATE_DIM,
};
use crate::tensor::Mat;

/// Where the local crop is cut from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropSource {
    /// The 960×540 render.
    Hires,
    /// The first configured global view.
    Lowres,
}

/// Observation switches that the ablations toggle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationConfig {
    pub crop_source: CropSource,
    pub local_pe: bool,
}

impl Default for ObservationConfig {
    fn default() -> Self {
        Self {
            crop_source: CropSource::Hires,
            local_pe: true,
        }
    }
}

/// Simulator command to model units in `[-1, 1]`.
pub fn action_to_model(a: &[f64]) -> [f64; ACTION_DIM] {
    [a[0] / MAX_DELTA, a[1] / MAX_DELTA, 2.0 * a[2] - 1.0]
}

pub fn action_from_model(v: &[f64]) -> [f64; ACTION_DIM] {
    [
        (v[0] * MAX_DELTA).clamp(-MAX_DELTA, MAX_DELTA),
        (v[1] * MAX_DELTA).clamp(-MAX_DELTA, MAX_DELTA),
        ((v[2] + 1.0) / 2.0).clamp(0.0, 1.0),
    ]
}

pub fn state_to_model(p: &[f64; STATE_DIM]) -> [f64; STATE_DIM] {
    [2.0 * p[0] - 1.0, 2.0 * p[1] - 1.0, 2.0 * p[2] - 1.0]
}

/// Renders and pre-processes everything the model sees for one decision.
pub fn build_input<T: Scalar>(
    encoder: &Encoder,
    state: &SceneState,
    bbox: &NormalizedBox,
    description: &str,
    obs: &ObservationConfig,
) -> Result<PolicyInput<T>, RuntimeError> {
    let cfg = &encoder.cfg;
    let views: Vec<_> = cfg
        .views
        .iter()
        .map(|v| render(state, v.view, v.width, v.height))
        .collect();
    let refs: Vec<_> = views.iter().collect();
    let global = encoder.prepare_global(&refs)?;
    let source = match obs.crop_source {
        CropSource::Hires => render(state, View::Global, HIRES_WIDTH, HIRES_HEIGHT),
        CropSource::Lowres => {
            let idx = cfg
                .views
                .iter()
                .position(|v| v.view == View::Global)
                .ok_or_else(|| RuntimeError::Config("low-res crop needs a global view".into()))?;
            views[idx].clone()
        }
    };
    let crop = crop_image(&source, bbox, cfg.crop_side, cfg.patch)?;
    let local = encoder.prepare_local(&crop, obs.local_pe)?;
    let lang = encoder.prepare_lang(description)?;
    let s = state_to_model(&state.proprio());
    Ok(PolicyInput {
        global,
        local,
        lang,
        state: s.iter().map(|&v| T::of(v)).collect(),
    })
}

/// Maps the current plan and scene to one chunk of commands.
pub trait Policy {
    /// Called once per episode before the first chunk.
    fn reset(&mut self, seed: u64);
    fn act(
        &mut self,
        state: &SceneState,
        plan: &StructuredPlan,
    ) -> Result<ActionChunk, RuntimeError>;
}

fn hold_chunk(state: &SceneState, horizon: usize) -> ActionChunk {
    let hold = [0.0, 0.0, state.gripper.open_fraction];
    ActionChunk::new(horizon, ACTION_DIM, hold.repeat(horizon))
}

/// The data-generating controller; holds still when the plan is infeasible.
#[derive(Clone, Debug, Default)]
pub struct ScriptedPolicy {
    pub cfg: ExpertConfig,
}

impl Policy for ScriptedPolicy {
    fn reset(&mut self, _seed: u64) {}

    fn act(
        &mut self,
        state: &SceneState,
        plan: &StructuredPlan,
    ) -> Result<ActionChunk, RuntimeError> {
        match scripted_expert(state, plan, &self.cfg) {
            Ok(r) => Ok(r.chunks.into_iter().next().expect("non-empty rollout")),
            Err(e) => {
                log::debug!("scripted policy holds: {e}");
                Ok(hold_chunk(state, self.cfg.horizon))
            }
        }
    }
}

/// Uniform commands within bounds; the chance-level control.
#[derive(Clone, Debug)]
pub struct RandomPolicy {
    pub horizon: usize,
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(horizon: usize) -> Self {
        Self {
            horizon,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }
}

impl Policy for RandomPolicy {
    fn reset(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5_EED0_FA11);
    }

    fn act(
        &mut self,
        _state: &SceneState,
        _plan: &StructuredPlan,
    ) -> Result<ActionChunk, RuntimeError> {
        let mut data = Vec::with_capacity(self.horizon * ACTION_DIM);
        for _ in 0..self.horizon {
            data.push(self.rng.gen_range(-MAX_DELTA..=MAX_DELTA));
            data.push(self.rng.gen_range(-MAX_DELTA..=MAX_DELTA));
            data.push(self.rng.gen_range(0.0..=1.0));
        }
        Ok(ActionChunk::new(self.horizon, ACTION_DIM, data))
    }
}

/// A trained action expert sampling chunks from its flow.
#[derive(Clone, Debug)]
pub struct LearnedPolicy<T> {
    pub model: Model<T>,
    pub obs: ObservationConfig,
    pub ode_steps: usize,
    rng: ChaCha8Rng,
}

impl<T: Scalar> LearnedPolicy<T> {
    pub fn new(model: Model<T>, obs: ObservationConfig) -> Result<Self, RuntimeError> {
        let d = model.dit();
        if d.d_a != ACTION_DIM || d.d_s != STATE_DIM {
            return Err(RuntimeError::Config(format!(
                "simulator needs d_a = {ACTION_DIM}, d_s = {STATE_DIM}; model has {} and {}",
                d.d_a, d.d_s
            )));
        }
        let ode_steps = d.ode_steps;
        Ok(Self {
            model,
            obs,
            ode_steps,
            rng: ChaCha8Rng::seed_from_u64(0),
        })
    }

    /// One chunk in model units.
    pub fn sample(
        &mut self,
        state: &SceneState,
        plan: &StructuredPlan,
    ) -> Result<Mat<T>, RuntimeError> {
        let input = build_input(
            &self.model.encoder,
            state,
            &plan.bbox,
            &plan.next_subtask_description,
            &self.obs,
        )?;
        let ctx = self.model.encode(&input);
        Ok(self
            .model
            .sample_actions(&ctx, self.ode_steps, &mut self.rng)?)
    }
}

impl<T: Scalar> Policy for LearnedPolicy<T> {
    fn reset(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF10_0D5);
    }

    fn act(
        &mut self,
        state: &SceneState,
        plan: &StructuredPlan,
    ) -> Result<ActionChunk, RuntimeError> {
        let m = self.sample(state, plan)?;
        let mut data = Vec::with_capacity(m.rows * ACTION_DIM);
        for r in 0..m.rows {
            let v: Vec<f64> = m.row(r).iter().map(|x| x.to_f64().unwrap_or(0.0)).collect();
            data.extend_from_slice(&action_from_model(&v));
        }
        Ok(ActionChunk::new(m.rows, ACTION_DIM, data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaling_round_trips() {
        for a in [[0.08, -0.08, 1.0], [0.0, 0.03, 0.0], [-0.05, 0.0, 0.5]] {
            let back = action_from_model(&action_to_model(&a));
            for i in 0..3 {
                assert!((back[i] - a[i]).abs() < 1e-12);
            }
        }
        assert_eq!(
            action_from_model(&[3.0, -3.0, 3.0]),
            [MAX_DELTA, -MAX_DELTA, 1.0]
        );
        assert_eq!(state_to_model(&[0.0, 1.0, 0.5]), [-1.0, 1.0, 0.0]);
    }
}
