use super::{normalize_name, NormalizedBox, PlanError, StructuredPlan};

/// Intersection over union in integer box space.
pub fn iou(a: &NormalizedBox, b: &NormalizedBox) -> f64 {
    let ih = (a.ymax.min(b.ymax) - a.ymin.max(b.ymin)).max(0) as i64;
    let iw = (a.xmax.min(b.xmax) - a.xmin.max(b.xmin)).max(0) as i64;
    let inter = ih * iw;
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// Mean IoU over aligned prediction/ground-truth pairs.
pub fn miou(pred: &[NormalizedBox], gt: &[NormalizedBox]) -> Result<f64, PlanError> {
    if pred.len() != gt.len() {
        return Err(PlanError::LengthMismatch(pred.len(), gt.len()));
    }
    if pred.is_empty() {
        return Err(PlanError::Empty);
    }
    Ok(pred.iter().zip(gt).map(|(p, g)| iou(p, g)).sum::<f64>() / pred.len() as f64)
}

/// Fraction of pairs whose skill and (case-folded) target name both match.
pub fn exact_match(pred: &[StructuredPlan], gt: &[StructuredPlan]) -> Result<f64, PlanError> {
    if pred.len() != gt.len() {
        return Err(PlanError::LengthMismatch(pred.len(), gt.len()));
    }
    if pred.is_empty() {
        return Err(PlanError::Empty);
    }
    let hits = pred
        .iter()
        .zip(gt)
        .filter(|(p, g)| {
            p.action_type == g.action_type
                && normalize_name(&p.target_object) == normalize_name(&g.target_object)
        })
        .count();
    Ok(hits as f64 / pred.len() as f64)
}
