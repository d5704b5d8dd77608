use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{oracle::describe, ActionType, NormalizedBox, PlanError, StructuredPlan, BOX_SCALE};
use crate::sim::{SceneState, CLASS_BLOCK, CLASS_BUTTON};

/// The language side of a plan: what the policy is told to do.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Subtask {
    pub description: String,
    pub action_type: ActionType,
    pub target_object: String,
}

impl Subtask {
    pub fn of(plan: &StructuredPlan) -> Self {
        Self {
            description: plan.next_subtask_description.clone(),
            action_type: plan.action_type,
            target_object: plan.target_object.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BboxCorruption {
    /// Shift magnitude as a multiple of the box's own extent.
    pub shift_fraction: f64,
}

impl Default for BboxCorruption {
    fn default() -> Self {
        Self {
            shift_fraction: 1.0,
        }
    }
}

const DIRECTIONS: [(i32, i32); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

fn shifted(b: &NormalizedBox, dy: i32, dx: i32) -> [i32; 4] {
    [b.ymin + dy, b.xmin + dx, b.ymax + dy, b.xmax + dx]
}

fn fits(v: &[i32; 4]) -> bool {
    v.iter().all(|&c| (0..=BOX_SCALE).contains(&c))
}

/// Slides a box back inside the frame without changing its size.
fn slide_inside(v: [i32; 4]) -> NormalizedBox {
    let h = v[2] - v[0];
    let w = v[3] - v[1];
    let ymin = v[0].clamp(0, BOX_SCALE - h);
    let xmin = v[1].clamp(0, BOX_SCALE - w);
    NormalizedBox {
        ymin,
        xmin,
        ymax: ymin + h,
        xmax: xmin + w,
    }
}

/// Replaces the box with probability `rate`; returns whether it did.
///
/// A corrupted box is the original moved by one full extent toward one of
/// the eight neighbor directions, chosen among those that stay in frame.
pub fn corrupt_bbox_with<R: Rng + ?Sized>(
    plan: &StructuredPlan,
    rate: f64,
    rng: &mut R,
    cfg: &BboxCorruption,
) -> (StructuredPlan, bool) {
    let u: f64 = rng.gen();
    if u >= rate {
        return (plan.clone(), false);
    }
    let b = &plan.bbox;
    let sy = (b.height() as f64 * cfg.shift_fraction).round() as i32;
    let sx = (b.width() as f64 * cfg.shift_fraction).round() as i32;
    let feasible: Vec<(i32, i32)> = DIRECTIONS
        .iter()
        .copied()
        .filter(|&(dy, dx)| fits(&shifted(b, dy * sy, dx * sx)))
        .collect();
    let pool: &[(i32, i32)] = if feasible.is_empty() {
        &DIRECTIONS
    } else {
        &feasible
    };
    let &(dy, dx) = pool.choose(rng).expect("non-empty direction pool");
    let mut out = plan.clone();
    out.bbox = slide_inside(shifted(b, dy * sy, dx * sx));
    (out, true)
}

pub fn corrupt_bbox<R: Rng + ?Sized>(
    plan: &StructuredPlan,
    rate: f64,
    rng: &mut R,
) -> StructuredPlan {
    corrupt_bbox_with(plan, rate, rng, &BboxCorruption::default()).0
}

/// Swaps the subtask for a different one from `vocabulary` with
/// probability `rate`; the box is left intact.
pub fn corrupt_language<R: Rng + ?Sized>(
    plan: &StructuredPlan,
    rate: f64,
    rng: &mut R,
    vocabulary: &[Subtask],
) -> Result<StructuredPlan, PlanError> {
    let mut distinct: Vec<&Subtask> = Vec::new();
    for s in vocabulary {
        if !distinct.iter().any(|d| d.description == s.description) {
            distinct.push(s);
        }
    }
    if distinct.len() < 2 {
        return Err(PlanError::VocabularyTooSmall);
    }
    let u: f64 = rng.gen();
    if u >= rate {
        return Ok(plan.clone());
    }
    let alternatives: Vec<&Subtask> = distinct
        .into_iter()
        .filter(|s| s.description != plan.next_subtask_description)
        .collect();
    let pick = alternatives.choose(rng).expect("at least one alternative");
    let mut out = plan.clone();
    out.next_subtask_description = pick.description.clone();
    out.action_type = pick.action_type;
    out.target_object = pick.target_object.clone();
    Ok(out)
}

/// Every subtask the oracle could phrase for this scene.
pub fn subtask_vocabulary(state: &SceneState) -> Vec<Subtask> {
    let mut out: Vec<Subtask> = Vec::new();
    let mut push = |s: Subtask| {
        if !out.iter().any(|o| o.description == s.description) {
            out.push(s);
        }
    };
    for o in &state.objects {
        if o.class_name == CLASS_BUTTON {
            push(Subtask {
                description: describe(ActionType::Click, &o.name(), None),
                action_type: ActionType::Click,
                target_object: o.name(),
            });
        }
    }
    for o in state.objects.iter().filter(|o| o.class_name == CLASS_BLOCK) {
        push(Subtask {
            description: describe(ActionType::Pick, &o.name(), None),
            action_type: ActionType::Pick,
            target_object: o.name(),
        });
        for s in state
            .objects
            .iter()
            .filter(|s| s.id != o.id && s.class_name != CLASS_BUTTON)
        {
            push(Subtask {
                description: describe(ActionType::Place, &s.name(), Some(&o.name())),
                action_type: ActionType::Place,
                target_object: s.name(),
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn plan(b: [i64; 4]) -> StructuredPlan {
        StructuredPlan {
            next_subtask_description: "click the red button".into(),
            action_type: ActionType::Click,
            target_object: "red button".into(),
            bbox: NormalizedBox::new(b[0], b[1], b[2], b[3]).unwrap(),
        }
    }

    fn vocab() -> Vec<Subtask> {
        ["red", "blue"]
            .iter()
            .map(|c| Subtask {
                description: format!("click the {c} button"),
                action_type: ActionType::Click,
                target_object: format!("{c} button"),
            })
            .collect()
    }

    #[test]
    fn rate_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = plan([100, 100, 200, 300]);
        for _ in 0..100 {
            assert_eq!(corrupt_bbox(&p, 0.0, &mut rng), p);
            assert_eq!(corrupt_language(&p, 0.0, &mut rng, &vocab()).unwrap(), p);
        }
    }

    #[test]
    fn rate_one_moves_box_off_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut clamp_limited = 0;
        for i in 0..1000 {
            let y = (i * 37 % 800) as i64;
            let x = (i * 53 % 700) as i64;
            let p = plan([y, x, y + 50 + (i % 150) as i64, x + 80 + (i % 200) as i64]);
            let c = corrupt_bbox(&p, 1.0, &mut rng);
            assert_ne!(c.bbox, p.bbox);
            assert_eq!(c.bbox.height(), p.bbox.height());
            if c.bbox.iou(&p.bbox) > 0.0 {
                clamp_limited += 1;
            }
        }
        assert_eq!(clamp_limited, 0);
    }

    #[test]
    fn clamp_limited_box_slides_inside() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = plan([0, 0, 700, 700]);
        let c = corrupt_bbox(&p, 1.0, &mut rng);
        assert!(c.bbox.ymax <= 1000 && c.bbox.xmax <= 1000);
        assert_eq!(c.bbox.width(), 700);
    }

    #[test]
    fn half_rate_concentrates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = plan([100, 100, 200, 200]);
        let n = 10_000;
        let hits = (0..n)
            .filter(|_| corrupt_bbox_with(&p, 0.5, &mut rng, &BboxCorruption::default()).1)
            .count();
        let frac = hits as f64 / n as f64;
        assert!((frac - 0.5).abs() <= 0.02, "{frac}");
    }

    #[test]
    fn forced_language_swap_always_differs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = plan([100, 100, 200, 200]);
        for _ in 0..200 {
            let c = corrupt_language(&p, 1.0, &mut rng, &vocab()).unwrap();
            assert_ne!(c.next_subtask_description, p.next_subtask_description);
            assert_eq!(c.bbox, p.bbox);
        }
    }

    #[test]
    fn singleton_vocabulary_is_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = vec![vocab()[0].clone(), vocab()[0].clone()];
        assert_eq!(
            corrupt_language(&plan([0, 0, 1, 1]), 0.5, &mut rng, &v),
            Err(PlanError::VocabularyTooSmall)
        );
    }

    #[test]
    fn channels_compose_independently() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = plan([100, 100, 200, 200]);
        let (n, r) = (20_000, 0.4);
        let mut counts = [[0usize; 2]; 2];
        for _ in 0..n {
            let l = corrupt_language(&p, r, &mut rng, &vocab()).unwrap();
            let (b, bc) = corrupt_bbox_with(&l, r, &mut rng, &BboxCorruption::default());
            let lc = b.next_subtask_description != p.next_subtask_description;
            counts[lc as usize][bc as usize] += 1;
        }
        // joint frequency of both corruptions ~ r², each marginal ~ r
        let both = counts[1][1] as f64 / n as f64;
        let lang = (counts[1][0] + counts[1][1]) as f64 / n as f64;
        let bbox = (counts[0][1] + counts[1][1]) as f64 / n as f64;
        assert!((lang - r).abs() < 0.015 && (bbox - r).abs() < 0.015);
        assert!((both - r * r).abs() < 0.015, "{both}");
    }
}
