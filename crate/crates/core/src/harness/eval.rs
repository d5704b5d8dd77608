use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::stats::wilson_interval;
use super::train::{load_policy, TrainConfig};
use super::{eval_seed, io_err, is_eval_seed, HarnessError};
use crate::encoders::Stream;
use crate::expert::Model;
use crate::plan::OraclePlanner;
use crate::runtime::{
    run_episode, Corruption, CropSource, LearnedPolicy, ObservationConfig, Policy, RuntimeConfig,
};
use crate::sim::TaskConfig;

const CONFIDENCE: f64 = 0.95;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub key: String,
    pub successes: usize,
    pub trials: usize,
    pub rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Per-trial outcomes in seed order, for paired comparisons.
    pub outcomes: Vec<bool>,
}

impl ResultRow {
    pub fn new(key: impl Into<String>, outcomes: Vec<bool>) -> Self {
        let successes = outcomes.iter().filter(|&&o| o).count();
        let trials = outcomes.len();
        let (ci_low, ci_high) = wilson_interval(successes, trials, CONFIDENCE);
        Self {
            key: key.into(),
            successes,
            trials,
            rate: if trials == 0 {
                0.0
            } else {
                successes as f64 / trials as f64
            },
            ci_low,
            ci_high,
            outcomes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub name: String,
    pub key_column: String,
    pub rows: Vec<ResultRow>,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    key: &'a str,
    successes: usize,
    trials: usize,
    rate: f64,
    ci_low: f64,
    ci_high: f64,
}

impl ResultTable {
    pub fn row(&self, key: &str) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.key == key)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(CsvRow {
                key: &r.key,
                successes: r.successes,
                trials: r.trials,
                rate: r.rate,
                ci_low: r.ci_low,
                ci_high: r.ci_high,
            })
            .expect("csv row");
        }
        let body = String::from_utf8(w.into_inner().expect("csv flush")).expect("utf-8 csv");
        body.replacen("key", &self.key_column, 1)
    }

    /// Writes `<name>.csv` and `<name>.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf), HarnessError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let csv_path = dir.join(format!("{}.csv", self.name));
        let json_path = dir.join(format!("{}.json", self.name));
        std::fs::write(&csv_path, self.to_csv()).map_err(io_err(&csv_path))?;
        std::fs::write(&json_path, serde_json::to_string_pretty(self)?)
            .map_err(io_err(&json_path))?;
        Ok((csv_path, json_path))
    }
}

fn run_trials(
    policy: &mut dyn Policy,
    task: &TaskConfig,
    task_index: usize,
    trials: usize,
    seed_base: u64,
    runtime: &RuntimeConfig,
    trace_dir: Option<&Path>,
) -> Result<Vec<bool>, HarnessError> {
    let mut out = Vec::with_capacity(trials);
    for i in 0..trials {
        let seed = eval_seed(seed_base, task_index, i);
        assert!(
            is_eval_seed(seed),
            "evaluation seed drawn from the training range"
        );
        let trace = trace_dir.map(|d| {
            d.join(format!(
                "{}_{i:04}.jsonl",
                task.to_string().replace(':', "-")
            ))
        });
        let r = run_episode(
            task,
            seed,
            &mut OraclePlanner,
            policy,
            runtime,
            trace.as_deref(),
        )?;
        out.push(r.success);
    }
    Ok(out)
}

/// Success per task over `trials` fresh scenes.
pub fn eval_success(
    policy: &mut dyn Policy,
    tasks: &[TaskConfig],
    trials: usize,
    seed_base: u64,
    runtime: &RuntimeConfig,
    trace_dir: Option<&Path>,
) -> Result<ResultTable, HarnessError> {
    if let Some(d) = trace_dir {
        std::fs::create_dir_all(d).map_err(io_err(d))?;
    }
    let mut rows = Vec::new();
    for (ti, task) in tasks.iter().enumerate() {
        let outcomes = run_trials(policy, task, ti, trials, seed_base, runtime, trace_dir)?;
        rows.push(ResultRow::new(task.to_string(), outcomes));
    }
    Ok(ResultTable {
        name: "success".into(),
        key_column: "task".into(),
        rows,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseChannel {
    Bbox,
    Lang,
    Both,
}

impl NoiseChannel {
    pub const ALL: [NoiseChannel; 3] = [NoiseChannel::Bbox, NoiseChannel::Lang, NoiseChannel::Both];

    pub fn name(self) -> &'static str {
        match self {
            NoiseChannel::Bbox => "bbox",
            NoiseChannel::Lang => "lang",
            NoiseChannel::Both => "both",
        }
    }

    pub fn key(self, rate: f64) -> String {
        format!("{}@{rate:.2}", self.name())
    }

    fn corruption(self, rate: f64) -> Corruption {
        let (bbox_rate, lang_rate) = match self {
            NoiseChannel::Bbox => (rate, 0.0),
            NoiseChannel::Lang => (0.0, rate),
            NoiseChannel::Both => (rate, rate),
        };
        Corruption {
            bbox_rate,
            lang_rate,
            bbox: Default::default(),
        }
    }
}

/// Success per (channel, rate) on one task; rows keyed `channel@rate`.
pub fn eval_robustness(
    policy: &mut dyn Policy,
    task: &TaskConfig,
    rates: &[f64],
    trials: usize,
    seed_base: u64,
    runtime: &RuntimeConfig,
) -> Result<ResultTable, HarnessError> {
    let mut rows = Vec::new();
    for ch in NoiseChannel::ALL {
        for &rate in rates {
            if !(0.0..=1.0).contains(&rate) {
                return Err(HarnessError::Config(format!("rate {rate} outside [0, 1]")));
            }
            let rt = RuntimeConfig {
                corruption: Some(ch.corruption(rate)),
                ..*runtime
            };
            let outcomes = run_trials(policy, task, 0, trials, seed_base, &rt, None)?;
            rows.push(ResultRow::new(ch.key(rate), outcomes));
        }
    }
    Ok(ResultTable {
        name: "robustness".into(),
        key_column: "channel@rate".into(),
        rows,
    })
}

/// One row of the guidance-injection and visual-grounding ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub label: String,
    pub ordering: Vec<Stream>,
    pub obs: ObservationConfig,
    /// Trained checkpoint; when absent the variant is trained or, for
    /// structural runs, left at initialization.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

impl AblationVariant {
    fn new(label: &str, ordering: &[Stream], crop_source: CropSource, local_pe: bool) -> Self {
        Self {
            label: label.to_string(),
            ordering: ordering.to_vec(),
            obs: ObservationConfig {
                crop_source,
                local_pe,
            },
            checkpoint: None,
        }
    }

    /// The base training config with this row's ordering and observation
    /// switches applied.
    pub fn train_config(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.model.dit.ordering = self.ordering.clone();
        cfg.obs = self.obs;
        cfg
    }

    /// The row's policy: its checkpoint when set, otherwise the model at
    /// initialization.
    pub fn policy(&self, base: &TrainConfig) -> Result<LearnedPolicy<f32>, HarnessError> {
        match &self.checkpoint {
            Some(p) => load_policy(p, 1),
            None => {
                let cfg = self.train_config(base);
                Ok(LearnedPolicy::new(Model::new(cfg.model)?, cfg.obs)?)
            }
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let o = &self.ordering;
        if o.is_empty() || (1..o.len()).any(|i| o[..i].contains(&o[i])) {
            return Err(HarnessError::Config(format!(
                "{}: ordering must be a non-empty stream subset",
                self.label
            )));
        }
        Ok(())
    }
}

/// The nine ablation rows: six injection orders, two grounding removals,
/// and the full model.
pub fn table4_variants() -> Vec<AblationVariant> {
    use Stream::{Global as G, Lang as T, Local as L};
    let hd = CropSource::Hires;
    vec![
        AblationVariant::new("Local->Text", &[L, T], hd, true),
        AblationVariant::new("Global->Text", &[G, T], hd, true),
        AblationVariant::new("Local->Text->Global", &[L, T, G], hd, true),
        AblationVariant::new("Global->Text->Local", &[G, T, L], hd, true),
        AblationVariant::new("Local->Global->Text", &[L, G, T], hd, true),
        AblationVariant::new("Global->Local->Text", &[G, L, T], hd, true),
        AblationVariant::new("w/o HD Crop", &[G, L, T], CropSource::Lowres, true),
        AblationVariant::new("w/o Abs PE", &[G, L, T], hd, false),
        AblationVariant::new("Full", &[G, L, T], hd, true),
    ]
}

/// Success per variant, pooled over `tasks`, on shared seeds.
pub fn eval_ablation(
    variants: &mut [(AblationVariant, Box<dyn Policy>)],
    tasks: &[TaskConfig],
    trials: usize,
    seed_base: u64,
    runtime: &RuntimeConfig,
) -> Result<ResultTable, HarnessError> {
    let expected: Vec<String> = table4_variants().into_iter().map(|v| v.label).collect();
    let mut got: Vec<String> = variants.iter().map(|(v, _)| v.label.clone()).collect();
    got.sort();
    let mut want = expected.clone();
    want.sort();
    if got != want {
        return Err(HarnessError::Config(format!(
            "ablation rows must be exactly {expected:?}, got {got:?}"
        )));
    }
    let mut rows = Vec::new();
    for label in &expected {
        let (_, policy) = variants
            .iter_mut()
            .find(|(v, _)| &v.label == label)
            .expect("label checked");
        let mut outcomes = Vec::new();
        for (ti, task) in tasks.iter().enumerate() {
            outcomes.extend(run_trials(
                policy.as_mut(),
                task,
                ti,
                trials,
                seed_base,
                runtime,
                None,
            )?);
        }
        rows.push(ResultRow::new(label.clone(), outcomes));
    }
    Ok(ResultTable {
        name: "ablation".into(),
        key_column: "variant".into(),
        rows,
    })
}
