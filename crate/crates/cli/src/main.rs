use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use groundflow::harness::{
    config_hash, eval_ablation, eval_robustness, eval_success, generate_dataset, load_policy,
    train, AblationVariant, ExperimentConfig, HarnessError, ResultTable,
};
use groundflow::plan::{exact_match, miou, parse_plan, StructuredPlan};
use groundflow::runtime::{Policy, RandomPolicy, ScriptedPolicy};
use groundflow::sim::{ExpertConfig, TaskConfig};
use serde_json::json;

const OUTPUT_ROOT_VAR: &str = "GROUNDFLOW_OUTPUT_ROOT";

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;
const EXIT_ACCEPTANCE: u8 = 4;

#[derive(Debug)]
enum CliError {
    Config(String),
    Runtime(String),
    Acceptance(String),
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        if e.is_config() {
            CliError::Config(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Dataset generation, training and evaluation for the grounded
/// flow-matching policy.
#[derive(Parser)]
#[command(name = "groundflow", version)]
struct Cli {
    /// Where relative outputs go; overrides $GROUNDFLOW_OUTPUT_ROOT.
    #[arg(long, global = true)]
    output_root: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Record scripted-expert episodes.
    GenData {
        /// Comma-separated task specs, e.g. click_single,click_among_k:3
        #[arg(long, value_delimiter = ',', required = true)]
        tasks: Vec<String>,
        #[arg(long)]
        episodes_per_task: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Experiment config whose dataset section sets view sizes.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Generate data (unless --data is given) and train a policy.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        resume: bool,
    },
    /// Success rate per task with Wilson intervals.
    EvalSuccess {
        #[command(flatten)]
        common: EvalArgs,
        /// Write one JSONL trace per trial.
        #[arg(long)]
        traces: bool,
        /// Exit with the acceptance code if any task falls below this rate.
        #[arg(long)]
        min_success: Option<f64>,
    },
    /// Success under injected bbox / language / joint noise.
    EvalRobustness {
        #[command(flatten)]
        common: EvalArgs,
        #[arg(long, value_delimiter = ',')]
        rates: Option<Vec<f64>>,
        /// Task to perturb; defaults to the config's first task.
        #[arg(long)]
        task: Option<String>,
    },
    /// The nine-row injection-order and grounding ablation.
    EvalAblation {
        /// JSON list of variants; omitted rows fall back to the config.
        #[arg(long)]
        variants: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Train every variant without a checkpoint before evaluating.
        #[arg(long)]
        train: bool,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Planner quality of predicted plans against ground truth, both JSONL.
    EvalPlanner {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        min_miou: Option<f64>,
        #[arg(long)]
        min_exact_match: Option<f64>,
    },
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// learned (needs --checkpoint), scripted or random.
    #[arg(long, default_value = "learned")]
    policy: String,
    #[arg(long)]
    trials: Option<usize>,
}

fn output_root(cli: &Cli) -> PathBuf {
    cli.output_root
        .clone()
        .or_else(|| std::env::var_os(OUTPUT_ROOT_VAR).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn under_root(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => Ok(ExperimentConfig::load(p)?),
        None => Ok(ExperimentConfig::default()),
    }
}

fn parse_tasks(list: &[String]) -> Result<Vec<TaskConfig>> {
    list.iter()
        .map(|t| {
            t.parse()
                .map_err(|e| CliError::Config(format!("task {t:?}: {e}")))
        })
        .collect()
}

fn make_policy(args: &EvalArgs, cfg: &ExperimentConfig) -> Result<Box<dyn Policy>> {
    match args.policy.as_str() {
        "learned" => {
            let ck = args.checkpoint.as_ref().ok_or_else(|| {
                CliError::Config("--checkpoint is required for the learned policy".into())
            })?;
            Ok(Box::new(load_policy(ck, cfg.train.average_last)?))
        }
        "scripted" => Ok(Box::new(ScriptedPolicy {
            cfg: ExpertConfig {
                horizon: cfg.train.model.dit.horizon,
                ..ExpertConfig::default()
            },
        })),
        "random" => Ok(Box::new(RandomPolicy::new(cfg.train.model.dit.horizon))),
        other => Err(CliError::Config(format!("unknown policy {other:?}"))),
    }
}

fn emit(table: &ResultTable, dir: &Path) -> Result<()> {
    let (csv, js) = table.write(dir)?;
    print!("{}", table.to_csv());
    eprintln!("wrote {} and {}", csv.display(), js.display());
    Ok(())
}

fn read_plans(path: &Path, strict: bool) -> Result<Vec<Option<StructuredPlan>>> {
    let f =
        fs::File::open(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_plan(&line) {
            Ok(p) => out.push(Some(p)),
            Err(e) if strict => {
                return Err(CliError::Config(format!(
                    "{}:{}: {} ({})",
                    path.display(),
                    i + 1,
                    e,
                    e.code()
                )))
            }
            Err(_) => out.push(None),
        }
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<()> {
    let root = output_root(&cli);
    match cli.cmd {
        Cmd::GenData {
            tasks,
            episodes_per_task,
            seed,
            out,
            config,
        } => {
            let cfg = load_config(config.as_deref())?;
            let tasks = parse_tasks(&tasks)?;
            let out = under_root(&root, &out);
            let summary = generate_dataset(&tasks, episodes_per_task, seed, &cfg.dataset, &out)?;
            println!(
                "{}",
                json!({
                    "out": out,
                    "episodes": summary.episodes.len(),
                    "expert_failures": summary.expert_failures,
                })
            );
        }
        Cmd::Train {
            config,
            data,
            resume,
        } => {
            let cfg = load_config(Some(&config))?;
            let dir = cfg.output_dir(&root, "train");
            let data = match data {
                Some(d) => under_root(&root, &d),
                None => {
                    let d = dir.join("data");
                    if !d.join("summary.json").exists() {
                        generate_dataset(
                            &cfg.tasks,
                            cfg.episodes_per_task,
                            cfg.train.seed,
                            &cfg.dataset,
                            &d,
                        )?;
                    }
                    d
                }
            };
            let out = train(&cfg.train, &data, &dir.join("checkpoints"), resume)?;
            let last = out.losses.last().copied();
            println!(
                "{}",
                json!({ "checkpoint": out.path, "loss_curve": out.curve_path, "final_loss": last })
            );
        }
        Cmd::EvalSuccess {
            common,
            traces,
            min_success,
        } => {
            let mut cfg = load_config(common.config.as_deref())?;
            if let Some(n) = common.trials {
                cfg.eval_trials = n;
            }
            let mut policy = make_policy(&common, &cfg)?;
            let dir = root.join(format!(
                "eval-success-{}-{}",
                common.policy,
                config_hash(&(&cfg, &common.checkpoint))
            ));
            let trace_dir = traces.then(|| dir.join("traces"));
            let table = eval_success(
                policy.as_mut(),
                &cfg.tasks,
                cfg.eval_trials,
                cfg.eval_seed,
                &cfg.runtime,
                trace_dir.as_deref(),
            )?;
            emit(&table, &dir)?;
            if let Some(min) = min_success {
                let below: Vec<_> = table
                    .rows
                    .iter()
                    .filter(|r| r.rate < min)
                    .map(|r| r.key.clone())
                    .collect();
                if !below.is_empty() {
                    return Err(CliError::Acceptance(format!(
                        "success below {min} on {below:?}"
                    )));
                }
            }
        }
        Cmd::EvalRobustness {
            common,
            rates,
            task,
        } => {
            let mut cfg = load_config(common.config.as_deref())?;
            if let Some(n) = common.trials {
                cfg.eval_trials = n;
            }
            if let Some(r) = rates {
                cfg.rates = r;
            }
            cfg.validate()?;
            let task = match task {
                Some(t) => parse_tasks(&[t])?.remove(0),
                None => cfg.tasks[0],
            };
            let mut policy = make_policy(&common, &cfg)?;
            let dir = root.join(format!(
                "eval-robustness-{}",
                config_hash(&(&cfg, &common.checkpoint, &common.policy, &task))
            ));
            let table = eval_robustness(
                policy.as_mut(),
                &task,
                &cfg.rates,
                cfg.eval_trials,
                cfg.eval_seed,
                &cfg.runtime,
            )?;
            emit(&table, &dir)?;
        }
        Cmd::EvalAblation {
            variants,
            config,
            train: do_train,
            data,
            trials,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(n) = trials {
                cfg.eval_trials = n;
            }
            let text = fs::read_to_string(&variants)
                .map_err(|e| CliError::Config(format!("{}: {e}", variants.display())))?;
            let mut rows: Vec<AblationVariant> = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", variants.display())))?;
            for v in &rows {
                v.validate()?;
            }
            let dir = cfg
                .output_dir(&root, "ablation")
                .join(format!("variants-{}", config_hash(&rows)));
            if do_train {
                let data = match data {
                    Some(d) => under_root(&root, &d),
                    None => {
                        let d = dir.join("data");
                        if !d.join("summary.json").exists() {
                            generate_dataset(
                                &cfg.tasks,
                                cfg.episodes_per_task,
                                cfg.train.seed,
                                &cfg.dataset,
                                &d,
                            )?;
                        }
                        d
                    }
                };
                for v in rows.iter_mut().filter(|v| v.checkpoint.is_none()) {
                    let slug: String = v
                        .label
                        .chars()
                        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
                        .collect();
                    let out = train(&v.train_config(&cfg.train), &data, &dir.join(slug), false)?;
                    v.checkpoint = Some(out.path);
                }
            }
            let mut policies: Vec<(AblationVariant, Box<dyn Policy>)> = Vec::new();
            for v in rows {
                let p = v.policy(&cfg.train)?;
                policies.push((v, Box::new(p)));
            }
            let table = eval_ablation(
                &mut policies,
                &cfg.tasks,
                cfg.eval_trials,
                cfg.eval_seed,
                &cfg.runtime,
            )?;
            emit(&table, &dir)?;
        }
        Cmd::EvalPlanner {
            pred,
            gt,
            min_miou,
            min_exact_match,
        } => {
            let gt: Vec<StructuredPlan> = read_plans(&gt, true)?.into_iter().flatten().collect();
            let pred = read_plans(&pred, false)?;
            if pred.len() != gt.len() {
                return Err(CliError::Config(format!(
                    "{} predictions for {} ground-truth plans",
                    pred.len(),
                    gt.len()
                )));
            }
            if gt.is_empty() {
                return Err(CliError::Config("no plans to score".into()));
            }
            let invalid = pred.iter().filter(|p| p.is_none()).count();
            // unparseable predictions score zero on both metrics
            let (mut ious, mut hits) = (0.0, 0.0);
            for (p, g) in pred.iter().zip(&gt) {
                if let Some(p) = p {
                    ious += miou(&[p.bbox], &[g.bbox]).unwrap_or(0.0);
                    hits += exact_match(std::slice::from_ref(p), std::slice::from_ref(g))
                        .unwrap_or(0.0);
                }
            }
            let m = ious / gt.len() as f64;
            let em = hits / gt.len() as f64;
            println!(
                "{}",
                json!({ "miou": m, "exact_match": em, "n": gt.len(), "invalid": invalid })
            );
            if min_miou.is_some_and(|t| m < t) || min_exact_match.is_some_and(|t| em < t) {
                return Err(CliError::Acceptance(
                    "planner metrics below threshold".into(),
                ));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("runtime error: {m}");
            ExitCode::from(EXIT_RUNTIME)
        }
        Err(CliError::Acceptance(m)) => {
            eprintln!("acceptance failure: {m}");
            ExitCode::from(EXIT_ACCEPTANCE)
        }
    }
}
