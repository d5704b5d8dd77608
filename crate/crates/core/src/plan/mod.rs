//! The planner-to-policy contract: structured plans and their wire format,
//! the crop tool, the oracle planner, guidance corruption, and planner metrics.

mod corrupt;
mod crop;
mod metrics;
mod oracle;

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use corrupt::{
    corrupt_bbox, corrupt_bbox_with, corrupt_language, subtask_vocabulary, BboxCorruption, Subtask,
};
pub use crop::{crop_image, CropResult};
pub use metrics::{exact_match, iou, miou};
pub use oracle::{
    oracle_plan, subtask_satisfied, ExternalPlanner, OraclePlanner, Planner, PlannerInput,
};

/// Wire key order.
pub const PLAN_KEYS: [&str; 4] = [
    "next_subtask_description",
    "action_type",
    "target_object",
    "bbox",
];

/// Upper bound of the integer box convention.
pub const BOX_SCALE: i32 = 1000;

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum PlanError {
    #[error("malformed JSON: {0}")]
    MalformedJson(String),
    #[error("extra content after the JSON object")]
    TrailingContent,
    #[error("plan must be a JSON object")]
    NotAnObject,
    #[error("missing key {0:?}")]
    MissingKey(String),
    #[error("unexpected key {0:?}")]
    ExtraKey(String),
    #[error("key {0:?} has the wrong type")]
    WrongType(String),
    #[error("field {0:?} is empty")]
    EmptyField(String),
    #[error("bbox must be four integers, got {0}")]
    BboxFormat(String),
    #[error("bbox coordinate out of [0,1000]: {0:?}")]
    BboxOutOfRange([i64; 4]),
    #[error("bbox is inverted or empty: {0:?}")]
    BboxInverted([i64; 4]),
    #[error("unknown action_type {0:?}")]
    UnknownActionType(String),
    #[error("crop rectangle is degenerate")]
    DegenerateCrop,
    #[error("crop side {side} not divisible by patch {patch}")]
    CropGeometry { side: usize, patch: usize },
    #[error("subtask vocabulary needs at least two entries")]
    VocabularyTooSmall,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("planner stream exhausted")]
    StreamExhausted,
}

impl PlanError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            PlanError::MalformedJson(_) => "malformed_json",
            PlanError::TrailingContent => "trailing_content",
            PlanError::NotAnObject => "not_an_object",
            PlanError::MissingKey(_) => "missing_key",
            PlanError::ExtraKey(_) => "extra_key",
            PlanError::WrongType(_) => "wrong_type",
            PlanError::EmptyField(_) => "empty_field",
            PlanError::BboxFormat(_) => "bbox_format",
            PlanError::BboxOutOfRange(_) => "bbox_out_of_range",
            PlanError::BboxInverted(_) => "bbox_inverted",
            PlanError::UnknownActionType(_) => "unknown_action_type",
            PlanError::DegenerateCrop => "degenerate_crop",
            PlanError::CropGeometry { .. } => "crop_geometry",
            PlanError::VocabularyTooSmall => "vocabulary_too_small",
            PlanError::LengthMismatch(..) => "length_mismatch",
            PlanError::Empty => "empty_input",
            PlanError::StreamExhausted => "stream_exhausted",
        }
    }
}

/// `[ymin, xmin, ymax, xmax]` in integer `[0,1000]` coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NormalizedBox {
    pub ymin: i32,
    pub xmin: i32,
    pub ymax: i32,
    pub xmax: i32,
}

impl NormalizedBox {
    pub fn new(ymin: i64, xmin: i64, ymax: i64, xmax: i64) -> Result<Self, PlanError> {
        let raw = [ymin, xmin, ymax, xmax];
        if raw.iter().any(|&v| !(0..=BOX_SCALE as i64).contains(&v)) {
            return Err(PlanError::BboxOutOfRange(raw));
        }
        if ymin >= ymax || xmin >= xmax {
            return Err(PlanError::BboxInverted(raw));
        }
        Ok(Self {
            ymin: ymin as i32,
            xmin: xmin as i32,
            ymax: ymax as i32,
            xmax: xmax as i32,
        })
    }

    /// From a half-open pixel extent `[r0, r1) × [c0, c1)` in a `width × height` frame.
    pub fn from_pixel_extent(
        r0: usize,
        c0: usize,
        r1: usize,
        c1: usize,
        width: usize,
        height: usize,
    ) -> Self {
        let sy = BOX_SCALE as f64 / height as f64;
        let sx = BOX_SCALE as f64 / width as f64;
        let ymin = (r0 as f64 * sy).round() as i32;
        let xmin = (c0 as f64 * sx).round() as i32;
        let ymax = ((r1 as f64 * sy).round() as i32)
            .max(ymin + 1)
            .min(BOX_SCALE);
        let xmax = ((c1 as f64 * sx).round() as i32)
            .max(xmin + 1)
            .min(BOX_SCALE);
        Self {
            ymin: ymin.min(ymax - 1),
            xmin: xmin.min(xmax - 1),
            ymax,
            xmax,
        }
    }

    pub fn as_array(&self) -> [i32; 4] {
        [self.ymin, self.xmin, self.ymax, self.xmax]
    }

    pub fn height(&self) -> i32 {
        self.ymax - self.ymin
    }

    pub fn width(&self) -> i32 {
        self.xmax - self.xmin
    }

    pub fn area(&self) -> i64 {
        self.height() as i64 * self.width() as i64
    }

    pub fn iou(&self, other: &NormalizedBox) -> f64 {
        metrics::iou(self, other)
    }

    /// Center in normalized `[0,1]` `(x, y)` coordinates.
    pub fn center_unit(&self) -> [f64; 2] {
        [
            (self.xmin + self.xmax) as f64 / (2.0 * BOX_SCALE as f64),
            (self.ymin + self.ymax) as f64 / (2.0 * BOX_SCALE as f64),
        ]
    }
}

impl Serialize for NormalizedBox {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.as_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for NormalizedBox {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = Value::deserialize(d)?;
        parse_bbox(&v).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionType {
    Pick,
    Place,
    Click,
    /// Internal stop signal; never accepted from the wire.
    Done,
}

impl ActionType {
    pub fn as_str(self) -> &'static str {
        match self {
            ActionType::Pick => "pick",
            ActionType::Place => "place",
            ActionType::Click => "click",
            ActionType::Done => "done",
        }
    }

    fn parse_wire(s: &str) -> Result<Self, PlanError> {
        match s {
            "pick" => Ok(ActionType::Pick),
            "place" => Ok(ActionType::Place),
            "click" => Ok(ActionType::Click),
            other => Err(PlanError::UnknownActionType(other.to_string())),
        }
    }
}

impl fmt::Display for ActionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StructuredPlan {
    pub next_subtask_description: String,
    pub action_type: ActionType,
    pub target_object: String,
    pub bbox: NormalizedBox,
}

impl StructuredPlan {
    /// The terminal sentinel.
    pub fn done() -> Self {
        Self {
            next_subtask_description: "task complete".to_string(),
            action_type: ActionType::Done,
            target_object: String::new(),
            bbox: NormalizedBox {
                ymin: 0,
                xmin: 0,
                ymax: BOX_SCALE,
                xmax: BOX_SCALE,
            },
        }
    }

    pub fn is_terminal(&self) -> bool {
        self.action_type == ActionType::Done
    }

    /// Same subtask, ignoring the grounding box.
    pub fn same_subtask(&self, other: &StructuredPlan) -> bool {
        self.next_subtask_description == other.next_subtask_description
            && self.action_type == other.action_type
            && self.target_object == other.target_object
    }
}

/// Case-folded, whitespace-collapsed object name.
pub fn normalize_name(s: &str) -> String {
    s.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

fn parse_bbox(v: &Value) -> Result<NormalizedBox, PlanError> {
    let owned;
    let arr = match v {
        Value::Array(a) => a,
        Value::String(s) => {
            owned = serde_json::from_str::<Value>(s)
                .map_err(|_| PlanError::BboxFormat(format!("{s:?}")))?;
            match &owned {
                Value::Array(a) => a,
                _ => return Err(PlanError::BboxFormat(format!("{s:?}"))),
            }
        }
        other => return Err(PlanError::BboxFormat(other.to_string())),
    };
    if arr.len() != 4 {
        return Err(PlanError::BboxFormat(format!("{} elements", arr.len())));
    }
    let mut out = [0i64; 4];
    for (o, e) in out.iter_mut().zip(arr) {
        *o = e
            .as_i64()
            .ok_or_else(|| PlanError::BboxFormat(e.to_string()))?;
    }
    NormalizedBox::new(out[0], out[1], out[2], out[3])
}

/// Strict parse of one plan object; any non-whitespace after it is rejected.
pub fn parse_plan(text: &str) -> Result<StructuredPlan, PlanError> {
    let mut de = serde_json::Deserializer::from_str(text);
    let value = Value::deserialize(&mut de).map_err(|e| PlanError::MalformedJson(e.to_string()))?;
    de.end().map_err(|_| PlanError::TrailingContent)?;
    let Value::Object(map) = value else {
        return Err(PlanError::NotAnObject);
    };
    for k in map.keys() {
        if !PLAN_KEYS.contains(&k.as_str()) {
            return Err(PlanError::ExtraKey(k.clone()));
        }
    }
    let get = |k: &str| {
        map.get(k)
            .ok_or_else(|| PlanError::MissingKey(k.to_string()))
    };
    let text_field = |k: &str| -> Result<String, PlanError> {
        let s = get(k)?
            .as_str()
            .ok_or_else(|| PlanError::WrongType(k.to_string()))?;
        if s.trim().is_empty() {
            return Err(PlanError::EmptyField(k.to_string()));
        }
        Ok(s.to_string())
    };
    let next_subtask_description = text_field(PLAN_KEYS[0])?;
    let action_type = ActionType::parse_wire(&text_field(PLAN_KEYS[1])?)?;
    let target_object = text_field(PLAN_KEYS[2])?;
    let bbox = parse_bbox(get(PLAN_KEYS[3])?)?;
    Ok(StructuredPlan {
        next_subtask_description,
        action_type,
        target_object,
        bbox,
    })
}

/// Canonical single-line form in wire key order.
pub fn serialize_plan(plan: &StructuredPlan) -> String {
    serde_json::to_string(plan).expect("plan serialization is infallible")
}
