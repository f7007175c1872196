//! Group Relative Policy Optimization.
//!
//! For each instance, `G` completions are sampled from the snapshot policy
//! `θ_old`, scored, and their rewards standardized within the group. The
//! policy then ascends
//!
//! ```text
//! J(θ) = 1/G Σ_i [ min(ρ_i A_i, clip(ρ_i, 1-ε, 1+ε) A_i) - β k3_i ]
//! ρ_i  = π_θ(o_i|q) / π_θold(o_i|q)
//! k3_i = r - ln r - 1,   r = π_ref(o_i|q) / π_θ(o_i|q)
//! A_i  = (R_i - mean R) / std R
//! ```
//!
//! Ratios are sequence-level: one per completion. The gradient is exact,
//! obtained from the toy policy's closed-form score function.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::LabeledInstance;
use crate::policy::{self, Emission, PolicyParams, COMPLIANT_TEMPLATE};
use crate::reward::{reward_all, RewardConfig, RewardVector};
use crate::rng::{derive_rng, stream};
use crate::verdict::Completion;

/// Population std below this marks a group as degenerate.
pub const DEGENERATE_STD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_epsilon: f64,
    pub kl_beta: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            clip_epsilon: 0.2,
            kl_beta: 0.04,
            learning_rate: 1e-2,
            iterations: 1250,
            batch_size: 256,
            seed: 0,
        }
    }
}

impl GrpoConfig {
    /// Returns the offending field name and a message.
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        if self.group_size < 2 {
            return Err(("group_size", format!("must be >= 2, got {}", self.group_size)));
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(("clip_epsilon", format!("must be in (0, 1), got {}", self.clip_epsilon)));
        }
        if !(self.kl_beta >= 0.0 && self.kl_beta.is_finite()) {
            return Err(("kl_beta", format!("must be >= 0, got {}", self.kl_beta)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(("learning_rate", format!("must be >= 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(("batch_size", "must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GrpoError {
    #[error("invalid GRPO config: {field}: {message}")]
    InvalidConfig { field: &'static str, message: String },
    #[error("a group needs at least 2 completions, got {0}")]
    GroupTooSmall(usize),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("non-finite gradient{}", iteration.map(|i| format!(" at iteration {i}")).unwrap_or_default())]
    NonFiniteGradient { iteration: Option<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Advantages {
    pub values: Vec<f64>,
    /// All rewards equal; every advantage is zero.
    pub degenerate: bool,
}

/// Group-standardized rewards using the population standard deviation.
pub fn compute_advantages(rewards: &[f64]) -> Result<Advantages, GrpoError> {
    let g = rewards.len();
    if g < 2 {
        return Err(GrpoError::GroupTooSmall(g));
    }
    let n = g as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < DEGENERATE_STD {
        return Ok(Advantages {
            values: vec![0.0; g],
            degenerate: true,
        });
    }
    Ok(Advantages {
        values: rewards.iter().map(|r| (r - mean) / std).collect(),
        degenerate: false,
    })
}

/// k3 estimator of KL(π_θ ‖ π_ref) for one sample; always >= 0.
pub fn kl_k3(logp_cur: f64, logp_ref: f64) -> f64 {
    let log_rho = logp_ref - logp_cur;
    // expm1 keeps precision when the two are close
    log_rho.exp_m1() - log_rho
}

pub fn surrogate_term(logp_cur: f64, logp_old: f64, advantage: f64, eps: f64) -> f64 {
    let ratio = (logp_cur - logp_old).exp();
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
    (ratio * advantage).min(clipped * advantage)
}

/// d surrogate / d logp_cur. Zero when the clipped branch is strictly smaller.
fn surrogate_slope(logp_cur: f64, logp_old: f64, advantage: f64, eps: f64) -> f64 {
    let ratio = (logp_cur - logp_old).exp();
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
    if ratio * advantage <= clipped * advantage {
        ratio * advantage
    } else {
        0.0
    }
}

/// d(-β k3) / d logp_cur.
fn kl_penalty_slope(logp_cur: f64, logp_ref: f64, beta: f64) -> f64 {
    beta * (logp_ref - logp_cur).exp_m1()
}

/// `G` sampled completions for one instance, scored and normalized.
#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub instance_id: String,
    pub features: Vec<f64>,
    pub label: u8,
    pub emissions: Vec<Emission>,
    pub completions: Vec<Completion>,
    pub logp_old: Vec<f64>,
    pub logp_ref: Vec<f64>,
    pub reward_vectors: Vec<RewardVector>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub degenerate: bool,
}

impl RolloutGroup {
    pub fn len(&self) -> usize {
        self.emissions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.emissions.is_empty()
    }

    pub fn logp_under(&self, params: &PolicyParams) -> Vec<f64> {
        self.emissions
            .iter()
            .map(|e| policy::log_prob(params, &self.features, e))
            .collect()
    }

    /// Recomputes `advantages` from `rewards`.
    pub fn normalize(&mut self) -> Result<(), GrpoError> {
        let a = compute_advantages(&self.rewards)?;
        self.advantages = a.values;
        self.degenerate = a.degenerate;
        Ok(())
    }
}

/// Draws and scores one group from `old`, with reference log-probs from `reference`.
pub fn collect_group<R: rand::Rng + ?Sized>(
    old: &PolicyParams,
    reference: &PolicyParams,
    instance: &LabeledInstance,
    group_size: usize,
    reward_cfg: &RewardConfig,
    rng: &mut R,
) -> Result<RolloutGroup, GrpoError> {
    let emissions: Vec<Emission> = (0..group_size)
        .map(|_| policy::sample_emission(old, &instance.features, rng))
        .collect();
    let completions: Vec<Completion> = emissions.iter().map(policy::emit_text).collect();
    let reward_vectors: Vec<RewardVector> = completions
        .iter()
        .map(|c| reward_all(c, instance.label, instance.agent_gt, reward_cfg))
        .collect();
    let mut group = RolloutGroup {
        instance_id: instance.id.clone(),
        features: instance.features.clone(),
        label: instance.label,
        logp_old: emissions.iter().map(|e| e.logp).collect(),
        logp_ref: emissions
            .iter()
            .map(|e| policy::log_prob(reference, &instance.features, e))
            .collect(),
        rewards: reward_vectors.iter().map(|r| r.total).collect(),
        emissions,
        completions,
        reward_vectors,
        advantages: Vec::new(),
        degenerate: false,
    };
    group.normalize()?;
    Ok(group)
}

/// Per-group objective for the given current log-probabilities.
pub fn grpo_objective(group: &RolloutGroup, logp_cur: &[f64], cfg: &GrpoConfig) -> f64 {
    let g = group.len() as f64;
    (0..group.len())
        .map(|i| {
            surrogate_term(logp_cur[i], group.logp_old[i], group.advantages[i], cfg.clip_epsilon)
                - cfg.kl_beta * kl_k3(logp_cur[i], group.logp_ref[i])
        })
        .sum::<f64>()
        / g
}

/// Batch mean of [`grpo_objective`] under `params`.
pub fn batch_objective(params: &PolicyParams, batch: &[RolloutGroup], cfg: &GrpoConfig) -> f64 {
    batch
        .iter()
        .map(|g| grpo_objective(g, &g.logp_under(params), cfg))
        .sum::<f64>()
        / batch.len() as f64
}

fn group_gradient(params: &PolicyParams, group: &RolloutGroup, cfg: &GrpoConfig, scale: f64) -> PolicyParams {
    let mut grad = PolicyParams::zeros(params.dim());
    for (i, e) in group.emissions.iter().enumerate() {
        let lc = policy::log_prob(params, &group.features, e);
        let slope = surrogate_slope(lc, group.logp_old[i], group.advantages[i], cfg.clip_epsilon)
            + kl_penalty_slope(lc, group.logp_ref[i], cfg.kl_beta);
        if slope != 0.0 {
            policy::accumulate_log_prob_grad(params, &group.features, e, scale * slope, &mut grad);
        }
    }
    grad
}

/// Exact gradient of [`batch_objective`]. Per-group terms are computed in
/// parallel and summed in batch order.
pub fn batch_gradient(params: &PolicyParams, batch: &[RolloutGroup], cfg: &GrpoConfig) -> PolicyParams {
    let parts: Vec<PolicyParams> = batch
        .par_iter()
        .map(|g| group_gradient(params, g, cfg, 1.0 / (batch.len() * g.len()) as f64))
        .collect();
    let mut total = PolicyParams::zeros(params.dim());
    for p in &parts {
        total.add_scaled(p, 1.0);
    }
    total
}

/// One gradient-ascent step on the batch objective.
pub fn grpo_step(params: &PolicyParams, batch: &[RolloutGroup], cfg: &GrpoConfig) -> Result<PolicyParams, GrpoError> {
    if batch.is_empty() {
        return Ok(params.clone());
    }
    let grad = batch_gradient(params, batch, cfg);
    if !grad.is_finite() {
        return Err(GrpoError::NonFiniteGradient { iteration: None });
    }
    let mut next = params.clone();
    next.add_scaled(&grad, cfg.learning_rate);
    Ok(next)
}

/// One row of the training metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub mean_total_reward: f64,
    pub mean_r_format: f64,
    pub mean_r_json: f64,
    pub mean_r_acc: f64,
    pub mean_r_agentic: f64,
    pub accuracy: f64,
    pub format_rate: f64,
    pub mean_kl: f64,
}

pub const METRICS_HEADER: [&str; 9] = [
    "iteration",
    "mean_total_reward",
    "mean_r_format",
    "mean_r_json",
    "mean_r_acc",
    "mean_r_agentic",
    "accuracy",
    "format_rate",
    "mean_kl",
];

impl IterationMetrics {
    pub fn from_batch(iteration: usize, batch: &[RolloutGroup]) -> Self {
        let mut sums = [0.0; 5];
        let (mut correct, mut formatted, mut kl, mut n) = (0usize, 0usize, 0.0, 0usize);
        for g in batch {
            for (i, rv) in g.reward_vectors.iter().enumerate() {
                sums[0] += rv.total;
                for (s, c) in sums[1..].iter_mut().zip(rv.components()) {
                    *s += c;
                }
                correct += usize::from(rv.r_acc == 1.0);
                formatted += usize::from(rv.r_format == 1.0);
                kl += kl_k3(g.logp_old[i], g.logp_ref[i]);
                n += 1;
            }
        }
        let n = n.max(1) as f64;
        Self {
            iteration,
            mean_total_reward: sums[0] / n,
            mean_r_format: sums[1] / n,
            mean_r_json: sums[2] / n,
            mean_r_acc: sums[3] / n,
            mean_r_agentic: sums[4] / n,
            accuracy: correct as f64 / n,
            format_rate: formatted as f64 / n,
            mean_kl: kl / n,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<IterationMetrics>,
}

impl MetricsLog {
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        wtr.write_record(METRICS_HEADER)?;
        for r in &self.rows {
            wtr.serialize(r)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Self, csv::Error> {
        let mut rdr = csv::Reader::from_reader(r);
        let rows = rdr.deserialize().collect::<Result<Vec<IterationMetrics>, _>>()?;
        Ok(Self { rows })
    }
}

/// Instance indices for one iteration: without replacement when the batch
/// fits in the dataset, with replacement otherwise.
fn batch_indices(n: usize, batch_size: usize, seed: u64, iteration: usize) -> Vec<usize> {
    use rand::seq::index;
    use rand::Rng;
    let mut rng = derive_rng(seed, &[stream::BATCH, iteration as u64]);
    if batch_size <= n {
        index::sample(&mut rng, n, batch_size).into_vec()
    } else {
        (0..batch_size).map(|_| rng.random_range(0..n)).collect()
    }
}

/// Samples and scores one iteration's batch from `old`. Each group draws from
/// its own stream keyed by `(seed, iteration, dataset index)`.
pub fn collect_batch(
    dataset: &[LabeledInstance],
    old: &PolicyParams,
    reference: &PolicyParams,
    cfg: &GrpoConfig,
    reward_cfg: &RewardConfig,
    iteration: usize,
) -> Result<Vec<RolloutGroup>, GrpoError> {
    let indices = batch_indices(dataset.len(), cfg.batch_size, cfg.seed, iteration);
    indices
        .par_iter()
        .enumerate()
        .map(|(slot, &i)| {
            let mut rng = derive_rng(
                cfg.seed,
                &[stream::ROLLOUT, iteration as u64, slot as u64, i as u64],
            );
            collect_group(old, reference, &dataset[i], cfg.group_size, reward_cfg, &mut rng)
        })
        .collect()
}

/// Runs `cfg.iterations` GRPO iterations from `init`, anchored to `reference`.
/// `θ_old` is the parameter snapshot at the start of each iteration.
pub fn run_training(
    dataset: &[LabeledInstance],
    init: &PolicyParams,
    reference: &PolicyParams,
    cfg: &GrpoConfig,
    reward_cfg: &RewardConfig,
) -> Result<(PolicyParams, MetricsLog), GrpoError> {
    cfg.validate()
        .map_err(|(field, message)| GrpoError::InvalidConfig { field, message })?;
    if dataset.is_empty() {
        return Err(GrpoError::EmptyDataset);
    }
    let mut params = init.clone();
    let mut log = MetricsLog::default();
    for iteration in 0..cfg.iterations {
        let batch = collect_batch(dataset, &params, reference, cfg, reward_cfg, iteration)?;
        log.rows.push(IterationMetrics::from_batch(iteration, &batch));
        params = grpo_step(&params, &batch, cfg).map_err(|e| match e {
            GrpoError::NonFiniteGradient { .. } => GrpoError::NonFiniteGradient {
                iteration: Some(iteration),
            },
            other => other,
        })?;
        if iteration % 100 == 0 {
            let m = log.rows.last().unwrap();
            log::debug!(
                "iter {iteration}: reward {:.3} acc {:.3} format {:.3} kl {:.4}",
                m.mean_total_reward,
                m.accuracy,
                m.format_rate,
                m.mean_kl
            );
        }
    }
    Ok((params, log))
}

/// Share of sampled completions using the compliant template.
pub fn compliant_share(batch: &[RolloutGroup]) -> f64 {
    let n: usize = batch.iter().map(RolloutGroup::len).sum();
    let k = batch
        .iter()
        .flat_map(|g| &g.emissions)
        .filter(|e| e.template == COMPLIANT_TEMPLATE)
        .count();
    k as f64 / n.max(1) as f64
}
