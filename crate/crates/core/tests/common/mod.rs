//! Oracles and fixtures shared by the integration tests and the acceptance
//! suite. Every reference computation here is written independently of the
//! library's own code paths.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use verdict_rl::dataset::LabeledInstance;
use verdict_rl::grpo::{batch_gradient, batch_objective, collect_group, GrpoConfig, RolloutGroup};
use verdict_rl::policy::{log_prob, PolicyParams};
use verdict_rl::reward::{AgentOpinions, RewardConfig};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_params<R: Rng>(dim: usize, scale: f64, rng: &mut R) -> PolicyParams {
    let mut p = PolicyParams::zeros(dim);
    for i in 0..p.num_params() {
        p.set_flat(i, scale * rng.sample::<f64, _>(StandardNormal));
    }
    p
}

pub fn perturbed<R: Rng>(p: &PolicyParams, scale: f64, rng: &mut R) -> PolicyParams {
    let mut q = p.clone();
    q.add_scaled(&random_params(p.dim(), scale, rng), 1.0);
    q
}

pub fn random_instance<R: Rng>(id: usize, dim: usize, rng: &mut R) -> LabeledInstance {
    LabeledInstance {
        id: format!("r{id}"),
        features: (0..dim).map(|_| rng.sample(StandardNormal)).collect(),
        label: rng.random_range(0..2),
        agent_gt: AgentOpinions::new(rng.random(), rng.random(), rng.random()),
    }
}

/// Scalar GRPO surrogate written piecewise: for A >= 0 the clip caps the
/// ratio from above, for A < 0 from below.
pub fn reference_surrogate(ratio: f64, adv: f64, eps: f64) -> f64 {
    if adv >= 0.0 {
        ratio.min(1.0 + eps) * adv
    } else {
        ratio.max(1.0 - eps) * adv
    }
}

pub struct FdOutcome {
    pub relative_error: f64,
    pub resampled: usize,
}

/// Distance in log-ratio below which a sample counts as sitting on a clip
/// kink; such draws are resampled because the objective is not
/// differentiable there.
const KINK_MARGIN: f64 = 1e-3;

fn near_kink(params: &PolicyParams, batch: &[RolloutGroup], eps: f64) -> bool {
    batch.iter().any(|g| {
        let cur = g.logp_under(params);
        cur.iter().zip(&g.logp_old).any(|(c, o)| {
            let lr = c - o;
            (lr - (1.0 + eps).ln()).abs() < KINK_MARGIN || (lr - (1.0 - eps).ln()).abs() < KINK_MARGIN
        })
    })
}

/// Analytic batch gradient vs central differences at step `h`, on a random
/// (params, old, ref, batch) point. Error is `‖g - fd‖∞ / ‖fd‖∞`.
pub fn fd_gradient_case(seed: u64, h: f64) -> FdOutcome {
    let mut resampled = 0;
    for attempt in 0u64.. {
        let mut r = rng(seed.wrapping_mul(1_000_003).wrapping_add(attempt));
        let dim = r.random_range(1..=4);
        let params = random_params(dim, 0.7, &mut r);
        let old = perturbed(&params, 0.15, &mut r);
        let reference = perturbed(&params, 0.15, &mut r);
        let cfg = GrpoConfig {
            group_size: r.random_range(2..=6),
            clip_epsilon: r.random_range(0.05..0.4),
            kl_beta: r.random_range(0.0..0.5),
            ..GrpoConfig::default()
        };
        let batch: Vec<RolloutGroup> = (0..r.random_range(1..=3))
            .map(|i| {
                let inst = random_instance(i, dim, &mut r);
                collect_group(&old, &reference, &inst, cfg.group_size, &RewardConfig::default(), &mut r).unwrap()
            })
            .collect();
        let analytic = batch_gradient(&params, &batch, &cfg).to_flat();
        let scale = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if near_kink(&params, &batch, cfg.clip_epsilon) || scale < 1e-6 {
            resampled += 1;
            continue;
        }
        let mut worst = 0.0f64;
        let mut fd_norm = 0.0f64;
        for (i, g) in analytic.iter().enumerate() {
            let mut plus = params.clone();
            plus.set_flat(i, params.get_flat(i) + h);
            let mut minus = params.clone();
            minus.set_flat(i, params.get_flat(i) - h);
            let fd = (batch_objective(&plus, &batch, &cfg) - batch_objective(&minus, &batch, &cfg)) / (2.0 * h);
            worst = worst.max((g - fd).abs());
            fd_norm = fd_norm.max(fd.abs());
        }
        return FdOutcome {
            relative_error: worst / fd_norm,
            resampled,
        };
    }
    unreachable!()
}

/// `Σ_e π(e) ∇log π(e)` by enumerating every emission; should vanish.
pub fn score_function_residual(params: &PolicyParams, features: &[f64]) -> (f64, f64) {
    use verdict_rl::policy::{accumulate_log_prob_grad, Emission, NUM_BINS, NUM_TEMPLATES};
    use verdict_rl::verdict::Verdict;
    let mut grad = PolicyParams::zeros(params.dim());
    let mut total_mass = 0.0;
    for template in 0..NUM_TEMPLATES {
        for verdict in [Verdict::Real, Verdict::AiGenerated] {
            for b0 in 0..NUM_BINS {
                for b1 in 0..NUM_BINS {
                    for b2 in 0..NUM_BINS {
                        let e = Emission {
                            template,
                            verdict,
                            bins: [b0, b1, b2],
                            logp: 0.0,
                        };
                        let p = log_prob(params, features, &e).exp();
                        total_mass += p;
                        accumulate_log_prob_grad(params, features, &e, p, &mut grad);
                    }
                }
            }
        }
    }
    (grad.to_flat().iter().fold(0.0f64, |m, g| m.max(g.abs())), total_mass)
}
