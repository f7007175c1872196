//! The two-stage pipeline (cold start, then GRPO), evaluation and ablations.

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::checkpoint::{self, CheckpointError};
use super::config::{AgentMode, ConfigError, DataSource, RunConfig};
use super::lock::OutputLock;
use crate::agents::{ingest_agent_file, AgentError, AgentKind, AgentPanel};
use crate::dataset::{make_heldout_dataset, make_synthetic_dataset, read_dataset, DatasetError, LabeledInstance};
use crate::grpo::{run_training, GrpoError, MetricsLog};
use crate::policy::{cold_start_fit, emit_text, greedy_emission, oracle_target, PolicyError, PolicyParams};
use crate::reward::{reward_all, RewardConfig};
use crate::rng::{derive_rng, stream};
use crate::verdict::Completion;

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SFT_CHECKPOINT: &str = "checkpoint_sft.bin";
pub const FINAL_CHECKPOINT: &str = "checkpoint_final.bin";
pub const EVAL_FILE: &str = "eval.json";
pub const LOG_FILE: &str = "run.log";
pub const ABLATION_FILE: &str = "ablation.csv";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("dataset: {0}")]
    Dataset(#[from] DatasetError),
    #[error("agents: {0}")]
    Agents(#[from] AgentError),
    #[error("cold start: {0}")]
    ColdStart(#[from] PolicyError),
    #[error("grpo: {0}")]
    Grpo(#[from] GrpoError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("evaluation set is empty")]
    EmptyEvalSet,
    #[error("instances have mixed feature dimensions ({0} and {1})")]
    MixedDims(usize, usize),
    #[error("output directory {} is locked by another writer", .0.display())]
    Locked(PathBuf),
    #[error("{0}")]
    IdMismatch(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Vec<LabeledInstance>,
    /// Empty when a file dataset has no held-out file.
    pub heldout: Vec<LabeledInstance>,
}

impl PreparedData {
    /// Instances used for evaluation: the held-out set, or the training set
    /// when there is none.
    pub fn eval_set(&self) -> &[LabeledInstance] {
        if self.heldout.is_empty() {
            &self.train
        } else {
            &self.heldout
        }
    }
}

pub fn load_agent_panel(cfg: &RunConfig) -> Result<Option<AgentPanel>, HarnessError> {
    if cfg.agents.mode == AgentMode::Synthetic {
        return Ok(None);
    }
    let a = &cfg.agents;
    let get = |p: &Option<PathBuf>, field: &str| {
        p.clone().ok_or_else(|| ConfigError::new(field, "required in this mode"))
    };
    let stores = [
        ingest_agent_file(&get(&a.semantic_path, "agents.semantic_path")?, AgentKind::Semantic)?,
        ingest_agent_file(&get(&a.frequency_path, "agents.frequency_path")?, AgentKind::Frequency)?,
        ingest_agent_file(&get(&a.dual_path, "agents.dual_path")?, AgentKind::DualStream)?,
    ];
    Ok(Some(AgentPanel::from_stores(stores)))
}

fn check_dims(data: &[LabeledInstance]) -> Result<(), HarnessError> {
    if let Some(first) = data.first() {
        let d = first.features.len();
        if let Some(bad) = data.iter().find(|x| x.features.len() != d) {
            return Err(HarnessError::MixedDims(d, bad.features.len()));
        }
    }
    Ok(())
}

/// Builds or loads the training and held-out sets described by `cfg`.
pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData, HarnessError> {
    cfg.validate()?;
    let panel = load_agent_panel(cfg)?;
    let ds = &cfg.dataset;
    let (mut train, mut heldout) = match ds.source {
        DataSource::Synthetic => (
            make_synthetic_dataset(ds.n, ds.d, ds.seed)?,
            make_heldout_dataset(ds.heldout_n, ds.d, ds.seed)?,
        ),
        DataSource::File => {
            let train = read_dataset(ds.path.as_deref().expect("validated"), panel.as_ref())?;
            let heldout = match &ds.heldout_path {
                Some(p) => read_dataset(p, panel.as_ref())?,
                None => Vec::new(),
            };
            (train, heldout)
        }
    };
    if let (DataSource::Synthetic, Some(panel)) = (ds.source, &panel) {
        for inst in train.iter_mut().chain(heldout.iter_mut()) {
            inst.agent_gt = panel.opinions(inst)?;
        }
    }
    if train.is_empty() {
        return Err(DatasetError::Invalid {
            line: 0,
            message: "training set is empty".into(),
        }
        .into());
    }
    let all: Vec<_> = train.iter().chain(&heldout).cloned().collect();
    check_dims(&all)?;
    Ok(PreparedData { train, heldout })
}

/// Disjoint SFT / RL split. The data are shuffled with the dataset seed and
/// the first `floor(n * fraction)` go to the SFT set.
pub fn split_sft_rl(
    data: &[LabeledInstance],
    fraction: f64,
    seed: u64,
) -> (Vec<LabeledInstance>, Vec<LabeledInstance>) {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut derive_rng(seed, &[stream::SPLIT]));
    let n_sft = ((data.len() as f64) * fraction).floor() as usize;
    let pick = |idx: &[usize]| idx.iter().map(|&i| data[i].clone()).collect::<Vec<_>>();
    (pick(&order[..n_sft]), pick(&order[n_sft..]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_real: usize,
    pub n_fake: usize,
    /// `None` when the set has no instance of the class.
    pub accuracy_real: Option<f64>,
    pub accuracy_fake: Option<f64>,
    /// Mean of the per-class accuracies that exist.
    pub mean_accuracy: f64,
    pub format_rate: f64,
    pub json_rate: f64,
    pub mean_agentic: f64,
}

/// Greedy decoding over `data`. Returns the report and the decoded
/// completions, in dataset order.
pub fn evaluate_with_completions(
    params: &PolicyParams,
    data: &[LabeledInstance],
    reward_cfg: &RewardConfig,
) -> Result<(EvalReport, Vec<Completion>), HarnessError> {
    if data.is_empty() {
        return Err(HarnessError::EmptyEvalSet);
    }
    let mut correct = [0usize; 2];
    let mut count = [0usize; 2];
    let (mut fmt, mut json, mut agentic) = (0.0, 0.0, 0.0);
    let mut completions = Vec::with_capacity(data.len());
    for inst in data {
        if inst.features.len() != params.dim() {
            return Err(HarnessError::IncompatibleCheckpoint(format!(
                "policy has d={}, instance {} has {} features",
                params.dim(),
                inst.id,
                inst.features.len()
            )));
        }
        let c = emit_text(&greedy_emission(params, &inst.features));
        let r = reward_all(&c, inst.label, inst.agent_gt, reward_cfg);
        let k = inst.label as usize;
        count[k] += 1;
        correct[k] += usize::from(r.r_acc == 1.0);
        fmt += r.r_format;
        json += r.r_json;
        agentic += r.r_agentic;
        completions.push(c);
    }
    let class_acc = |k: usize| (count[k] > 0).then(|| correct[k] as f64 / count[k] as f64);
    let (real, fake) = (class_acc(0), class_acc(1));
    let present: Vec<f64> = [real, fake].into_iter().flatten().collect();
    let n = data.len() as f64;
    let report = EvalReport {
        n_real: count[0],
        n_fake: count[1],
        accuracy_real: real,
        accuracy_fake: fake,
        mean_accuracy: present.iter().sum::<f64>() / present.len() as f64,
        format_rate: fmt / n,
        json_rate: json / n,
        mean_agentic: agentic / n,
    };
    Ok((report, completions))
}

pub fn evaluate(
    params: &PolicyParams,
    data: &[LabeledInstance],
    reward_cfg: &RewardConfig,
) -> Result<EvalReport, HarnessError> {
    evaluate_with_completions(params, data, reward_cfg).map(|(r, _)| r)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub sft_params: PolicyParams,
    pub final_params: PolicyParams,
    pub metrics: MetricsLog,
    pub eval: EvalReport,
    /// Target log-likelihood before and after the cold start, if it ran.
    pub cold_start: Option<(f64, f64)>,
}

/// Cold start then GRPO, entirely in memory.
pub fn train_pipeline(cfg: &RunConfig, data: &PreparedData) -> Result<TrainOutcome, HarnessError> {
    cfg.validate()?;
    let dim = data.train[0].features.len();
    let (sft_set, rl_set) = split_sft_rl(&data.train, cfg.sft.fraction, cfg.dataset.seed);
    log::info!("split: {} SFT, {} RL instances", sft_set.len(), rl_set.len());

    let init = PolicyParams::zeros(dim);
    let (sft_params, cold_start) = if sft_set.is_empty() {
        (init, None)
    } else {
        let targets: Vec<_> = sft_set.iter().map(|i| (i.clone(), oracle_target(i))).collect();
        let out = cold_start_fit(&init, &targets, cfg.sft.epochs, cfg.sft.learning_rate)?;
        log::info!(
            "cold start: target log-likelihood {:.4} -> {:.4}",
            out.initial_loglik,
            out.final_loglik
        );
        (out.params, Some((out.initial_loglik, out.final_loglik)))
    };

    let (final_params, metrics) = if cfg.grpo.iterations == 0 {
        (sft_params.clone(), MetricsLog::default())
    } else {
        run_training(&rl_set, &sft_params, &sft_params, &cfg.grpo, &cfg.rewards)?
    };
    let eval = evaluate(&final_params, data.eval_set(), &cfg.rewards)?;
    log::info!(
        "eval: accuracy {:.4}, format {:.4}, json {:.4}, agentic {:.4}",
        eval.mean_accuracy,
        eval.format_rate,
        eval.json_rate,
        eval.mean_agentic
    );
    Ok(TrainOutcome {
        sft_params,
        final_params,
        metrics,
        eval,
        cold_start,
    })
}

fn lock_dir(dir: &Path) -> Result<OutputLock, HarnessError> {
    OutputLock::acquire(dir).map_err(|e| match e.kind() {
        io::ErrorKind::AlreadyExists => HarnessError::Locked(dir.to_path_buf()),
        _ => HarnessError::Io(e),
    })
}

/// Appends a timestamped line to the run's sidecar log. Timestamps live only
/// here so every other artifact stays reproducible.
fn sidecar(dir: &Path, msg: &str) -> io::Result<()> {
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0);
    let mut f = OpenOptions::new().create(true).append(true).open(dir.join(LOG_FILE))?;
    writeln!(f, "{secs:.3} {msg}")
}

pub fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Trains with already prepared data and writes every artifact into `dir`.
pub fn train_into(cfg: &RunConfig, data: &PreparedData, dir: &Path) -> Result<TrainOutcome, HarnessError> {
    cfg.validate()?;
    let _lock = lock_dir(dir)?;
    sidecar(dir, "start")?;
    std::fs::write(dir.join(CONFIG_FILE), cfg.to_toml_string())?;
    let outcome = train_pipeline(cfg, data).inspect_err(|e| {
        let _ = sidecar(dir, &format!("failed: {e}"));
    })?;
    let hash = cfg.hash();
    outcome.metrics.write_csv(File::create(dir.join(METRICS_FILE))?)?;
    checkpoint::save(&dir.join(SFT_CHECKPOINT), &outcome.sft_params, &hash)?;
    checkpoint::save(&dir.join(FINAL_CHECKPOINT), &outcome.final_params, &hash)?;
    write_json_pretty(&dir.join(EVAL_FILE), &outcome.eval)?;
    sidecar(
        dir,
        &format!(
            "done; final checkpoint sha256 {}",
            checkpoint::file_sha256(&dir.join(FINAL_CHECKPOINT))?
        ),
    )?;
    Ok(outcome)
}

/// `train`: prepare data, cold start, GRPO, write artifacts to
/// `cfg.output_dir`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome, HarnessError> {
    let data = prepare_data(cfg)?;
    train_into(cfg, &data, &cfg.output_dir)
}

/// `eval`: greedy evaluation of a checkpoint.
pub fn cmd_eval(
    checkpoint_path: &Path,
    data: &[LabeledInstance],
    reward_cfg: &RewardConfig,
) -> Result<(EvalReport, Vec<Completion>), HarnessError> {
    if data.is_empty() {
        return Err(HarnessError::EmptyEvalSet);
    }
    let ckpt = checkpoint::load(checkpoint_path).map_err(|e| match e {
        CheckpointError::Incompatible(m) => HarnessError::IncompatibleCheckpoint(m),
        other => other.into(),
    })?;
    evaluate_with_completions(&ckpt.params, data, reward_cfg)
}

/// One arm of the ablation study, expressed as a change to the run config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Full,
    NoFormat,
    NoJson,
    NoAgentic,
    /// RL only: no cold start.
    Zero,
    /// Cold start only: no GRPO iterations.
    SftOnly,
}

impl Arm {
    pub const ALL: [Arm; 6] = [
        Arm::Full,
        Arm::NoFormat,
        Arm::NoJson,
        Arm::NoAgentic,
        Arm::Zero,
        Arm::SftOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Full => "full",
            Arm::NoFormat => "no_format",
            Arm::NoJson => "no_json",
            Arm::NoAgentic => "no_agentic",
            Arm::Zero => "zero",
            Arm::SftOnly => "sft_only",
        }
    }

    pub fn apply(self, cfg: &RunConfig) -> RunConfig {
        let mut c = cfg.clone();
        let w = &mut c.rewards.weights;
        match self {
            Arm::Full => {}
            Arm::NoFormat => w.w_format = 0.0,
            Arm::NoJson => w.w_json = 0.0,
            Arm::NoAgentic => w.w_agentic = 0.0,
            Arm::Zero => c.sft.fraction = 0.0,
            Arm::SftOnly => c.grpo.iterations = 0,
        }
        c.output_dir = cfg.output_dir.join(self.name());
        c
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown ablation arm {s:?}"))
    }
}

#[derive(Debug, Clone, Serialize)]
struct AblationRow<'a> {
    arm: &'a str,
    mean_accuracy: f64,
    accuracy_real: Option<f64>,
    accuracy_fake: Option<f64>,
    format_rate: f64,
    json_rate: f64,
    mean_agentic: f64,
    final_mean_reward: Option<f64>,
}

/// `ablate`: runs each arm on the same data into `cfg.output_dir/<arm>` and
/// writes a summary table.
pub fn cmd_ablate(cfg: &RunConfig, arms: &[Arm]) -> Result<Vec<(Arm, TrainOutcome)>, HarnessError> {
    let data = prepare_data(cfg)?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let mut results = Vec::with_capacity(arms.len());
    for &arm in arms {
        log::info!("ablation arm {arm}");
        let arm_cfg = arm.apply(cfg);
        let outcome = train_into(&arm_cfg, &data, &arm_cfg.output_dir)?;
        results.push((arm, outcome));
    }
    let mut w = csv::Writer::from_path(cfg.output_dir.join(ABLATION_FILE))?;
    for (arm, o) in &results {
        w.serialize(AblationRow {
            arm: arm.name(),
            mean_accuracy: o.eval.mean_accuracy,
            accuracy_real: o.eval.accuracy_real,
            accuracy_fake: o.eval.accuracy_fake,
            format_rate: o.eval.format_rate,
            json_rate: o.eval.json_rate,
            mean_agentic: o.eval.mean_agentic,
            final_mean_reward: o.metrics.rows.last().map(|m| m.mean_total_reward),
        })?;
    }
    w.flush()?;
    Ok(results)
}
