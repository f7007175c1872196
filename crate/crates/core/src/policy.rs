//! A small structured-emission policy with closed-form log-probabilities.
//!
//! Five independent softmax heads read the augmented feature vector
//! `[x; 1]`: a template head choosing how the completion is laid out, a
//! verdict head, and one 11-bin head per specialist probability. An
//! [`Emission`] is one choice from each head; [`emit_text`] turns it into a
//! completion the reward functions can score.
//!
//! Template 0 is the only fully compliant layout. Each of the others breaks
//! exactly one stage of parsing:
//!
//! | template | layout                                             | fails            |
//! |----------|----------------------------------------------------|------------------|
//! | 0        | think + answer with the report fence               | nothing          |
//! | 1        | answer block only                                  | tag format       |
//! | 2        | broken JSON draft fence in think, report in answer | JSON format      |
//! | 3        | think + answer, report without `final_verdict`     | verdict recovery |

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::LabeledInstance;
use crate::verdict::{
    fenced, json_string, render_report, render_report_json, Completion, FinalVerdict, PipelineReport,
    SpecialistAnalysis, Verdict, ANSWER_CLOSE, ANSWER_OPEN, THINK_CLOSE, THINK_OPEN,
};

pub const NUM_TEMPLATES: usize = 4;
pub const NUM_BINS: usize = 11;
pub const COMPLIANT_TEMPLATE: usize = 0;

pub fn bin_probability(bin: usize) -> f64 {
    bin as f64 / (NUM_BINS - 1) as f64
}

/// Bin whose probability is closest to `p` (ties go up).
pub fn nearest_bin(p: f64) -> usize {
    let scaled = (p.clamp(0.0, 1.0) * (NUM_BINS - 1) as f64).round();
    scaled as usize
}

/// Bin nearest `p_gt` in KL divergence: the one with the lowest cross-entropy
/// against the soft target, hence the one maximizing the agentic reward.
/// Ties go to the lower bin.
pub fn best_bin(p_gt: f64) -> usize {
    (0..NUM_BINS)
        .map(|k| (k, crate::reward::bce(bin_probability(k), p_gt)))
        .fold((0, f64::INFINITY), |best, (k, l)| if l < best.1 { (k, l) } else { best })
        .0
}

fn log_softmax(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter_mut().for_each(|z| *z -= lse);
}

/// Softmax over `W · [x; 1]`. Weights are row-major, one row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    classes: usize,
    inputs: usize,
    weights: Vec<f64>,
}

impl Head {
    pub fn zeros(classes: usize, inputs: usize) -> Self {
        Self {
            classes,
            inputs,
            weights: vec![0.0; classes * inputs],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn get(&self, class: usize, input: usize) -> f64 {
        self.weights[class * self.inputs + input]
    }

    pub fn set(&mut self, class: usize, input: usize, v: f64) {
        self.weights[class * self.inputs + input] = v;
    }

    pub fn logits(&self, x_aug: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x_aug.len(), self.inputs);
        self.weights
            .chunks_exact(self.inputs)
            .map(|row| row.iter().zip(x_aug).map(|(w, x)| w * x).sum())
            .collect()
    }

    pub fn log_probs(&self, x_aug: &[f64]) -> Vec<f64> {
        let mut z = self.logits(x_aug);
        log_softmax(&mut z);
        z
    }

    pub fn probs(&self, x_aug: &[f64]) -> Vec<f64> {
        self.log_probs(x_aug).into_iter().map(f64::exp).collect()
    }

    /// `grad += coef * (e_choice - p) ⊗ x_aug`, the gradient of
    /// `coef * log p[choice]`. Returns `log p[choice]`.
    fn accumulate_grad(&self, x_aug: &[f64], choice: usize, coef: f64, grad: &mut Head) -> f64 {
        let lp = self.log_probs(x_aug);
        for (k, row) in grad.weights.chunks_exact_mut(self.inputs).enumerate() {
            let indicator = if k == choice { 1.0 } else { 0.0 };
            let c = coef * (indicator - lp[k].exp());
            if c != 0.0 {
                row.iter_mut().zip(x_aug).for_each(|(g, x)| *g += c * x);
            }
        }
        lp[choice]
    }
}

/// Parameters of the five heads. Gradients share this type.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    dim: usize,
    pub format: Head,
    pub verdict: Head,
    pub bins: [Head; 3],
}

impl PolicyParams {
    /// All-zero weights: every head uniform.
    pub fn zeros(dim: usize) -> Self {
        let inputs = dim + 1;
        Self {
            dim,
            format: Head::zeros(NUM_TEMPLATES, inputs),
            verdict: Head::zeros(2, inputs),
            bins: std::array::from_fn(|_| Head::zeros(NUM_BINS, inputs)),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_params(&self) -> usize {
        self.heads().map(|h| h.weights.len()).sum()
    }

    pub fn heads(&self) -> impl Iterator<Item = &Head> {
        [&self.format, &self.verdict].into_iter().chain(self.bins.iter())
    }

    pub fn heads_mut(&mut self) -> impl Iterator<Item = &mut Head> {
        [&mut self.format, &mut self.verdict]
            .into_iter()
            .chain(self.bins.iter_mut())
    }

    /// Flattened in head order: format, verdict, semantic, frequency, dual.
    pub fn to_flat(&self) -> Vec<f64> {
        self.heads().flat_map(|h| h.weights.iter().copied()).collect()
    }

    pub fn from_flat(dim: usize, flat: &[f64]) -> Option<Self> {
        let mut p = Self::zeros(dim);
        if flat.len() != p.num_params() {
            return None;
        }
        let mut it = flat.iter();
        for h in p.heads_mut() {
            h.weights.iter_mut().for_each(|w| *w = *it.next().unwrap());
        }
        Some(p)
    }

    pub fn get_flat(&self, index: usize) -> f64 {
        let mut i = index;
        for h in self.heads() {
            if i < h.weights.len() {
                return h.weights[i];
            }
            i -= h.weights.len();
        }
        panic!("parameter index {index} out of range")
    }

    pub fn set_flat(&mut self, index: usize, v: f64) {
        let mut i = index;
        for h in self.heads_mut() {
            if i < h.weights.len() {
                h.weights[i] = v;
                return;
            }
            i -= h.weights.len();
        }
        panic!("parameter index {index} out of range")
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &PolicyParams, scale: f64) {
        assert_eq!(self.dim, other.dim, "parameter shapes differ");
        for (a, b) in self.heads_mut().zip(other.heads()) {
            a.weights
                .iter_mut()
                .zip(&b.weights)
                .for_each(|(x, y)| *x += scale * y);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.heads().all(|h| h.weights.iter().all(|w| w.is_finite()))
    }

    pub fn norm(&self) -> f64 {
        self.heads()
            .flat_map(|h| h.weights.iter())
            .map(|w| w * w)
            .sum::<f64>()
            .sqrt()
    }

    pub fn distance(&self, other: &PolicyParams) -> f64 {
        let mut d = self.clone();
        d.add_scaled(other, -1.0);
        d.norm()
    }

    pub fn augment(&self, features: &[f64]) -> Vec<f64> {
        assert_eq!(features.len(), self.dim, "feature dimension mismatch");
        let mut x = Vec::with_capacity(self.dim + 1);
        x.extend_from_slice(features);
        x.push(1.0);
        x
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadDistributions {
    pub format: Vec<f64>,
    pub verdict: Vec<f64>,
    pub bins: [Vec<f64>; 3],
}

pub fn heads(params: &PolicyParams, features: &[f64]) -> HeadDistributions {
    let x = params.augment(features);
    HeadDistributions {
        format: params.format.probs(&x),
        verdict: params.verdict.probs(&x),
        bins: std::array::from_fn(|k| params.bins[k].probs(&x)),
    }
}

/// One draw from every head, with its joint log-probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Emission {
    pub template: usize,
    pub verdict: Verdict,
    pub bins: [usize; 3],
    pub logp: f64,
}

impl Emission {
    pub fn probabilities(&self) -> [f64; 3] {
        self.bins.map(bin_probability)
    }
}

fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    // rounding left u above the cumulative sum: last class with mass
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = k;
        }
    }
    best
}

pub fn sample_emission<R: Rng + ?Sized>(params: &PolicyParams, features: &[f64], rng: &mut R) -> Emission {
    let d = heads(params, features);
    let template = sample_categorical(&d.format, rng);
    let verdict = sample_categorical(&d.verdict, rng);
    let bins = std::array::from_fn(|k| sample_categorical(&d.bins[k], rng));
    let mut e = Emission {
        template,
        verdict: Verdict::from_label(verdict as u8).unwrap(),
        bins,
        logp: 0.0,
    };
    e.logp = log_prob(params, features, &e);
    e
}

/// Argmax of every head; ties go to the lowest index.
pub fn greedy_emission(params: &PolicyParams, features: &[f64]) -> Emission {
    let x = params.augment(features);
    let template = argmax(&params.format.logits(&x));
    let verdict = argmax(&params.verdict.logits(&x));
    let bins = std::array::from_fn(|k| argmax(&params.bins[k].logits(&x)));
    let mut e = Emission {
        template,
        verdict: Verdict::from_label(verdict as u8).unwrap(),
        bins,
        logp: 0.0,
    };
    e.logp = log_prob(params, features, &e);
    e
}

pub fn log_prob(params: &PolicyParams, features: &[f64], e: &Emission) -> f64 {
    let x = params.augment(features);
    params.format.log_probs(&x)[e.template]
        + params.verdict.log_probs(&x)[e.verdict.index()]
        + (0..3)
            .map(|k| params.bins[k].log_probs(&x)[e.bins[k]])
            .sum::<f64>()
}

/// `grad += coef * ∇ log π(e | x)`; returns `log π(e | x)`.
pub fn accumulate_log_prob_grad(
    params: &PolicyParams,
    features: &[f64],
    e: &Emission,
    coef: f64,
    grad: &mut PolicyParams,
) -> f64 {
    let x = params.augment(features);
    let mut lp = params.format.accumulate_grad(&x, e.template, coef, &mut grad.format);
    lp += params
        .verdict
        .accumulate_grad(&x, e.verdict.index(), coef, &mut grad.verdict);
    for k in 0..3 {
        lp += params.bins[k].accumulate_grad(&x, e.bins[k], coef, &mut grad.bins[k]);
    }
    lp
}

pub fn log_prob_grad(params: &PolicyParams, features: &[f64], e: &Emission) -> PolicyParams {
    let mut g = PolicyParams::zeros(params.dim());
    accumulate_log_prob_grad(params, features, e, 1.0, &mut g);
    g
}

fn think_text(e: &Emission) -> String {
    let [s, f, d] = e.probabilities();
    let lean = match e.verdict {
        Verdict::Real => "camera-captured",
        Verdict::AiGenerated => "synthetic",
    };
    format!(
        "Step 1: the overall impression leans {lean}. \
         Step 2: textures, lighting, shadows and edges were examined. \
         Step 3: checked structure and surfaces for generator artifacts. \
         Step 4: semantic expert {s:.1}, frequency expert {f:.1}, dual-stream expert {d:.1}. \
         Step 5: concluding {}.",
        e.verdict
    )
}

/// The report an emission stands for.
pub fn emission_report(e: &Emission) -> PipelineReport {
    PipelineReport {
        initial_scan: "Overall harmony, content and composition reviewed.".into(),
        detailed_observation: "Texture quality, lighting, shadows, reflections and blending inspected.".into(),
        technical_analysis: "Structure, surface and edge consistency traced for generator artifacts.".into(),
        specialist_analysis: SpecialistAnalysis::from_array(e.probabilities()),
        final_verdict: FinalVerdict {
            verdict: e.verdict,
            reasoning: format!("Evidence from all steps supports {}.", e.verdict),
        },
    }
}

fn report_without_verdict(r: &PipelineReport) -> String {
    let sa = &r.specialist_analysis;
    format!(
        "{{\n  \"initial_scan\": {},\n  \"specialist_analysis\": {{\n    \"prob_semantic\": {:.4},\n    \"prob_frequency\": {:.4},\n    \"prob_dual\": {:.4}\n  }}\n}}",
        json_string(&r.initial_scan),
        sa.prob_semantic,
        sa.prob_frequency,
        sa.prob_dual
    )
}

/// Deterministic rendering of an emission; see the module table for layouts.
pub fn emit_text(e: &Emission) -> Completion {
    let report = emission_report(e);
    let think = think_text(e);
    match e.template {
        0 => render_report(&report, &think),
        1 => Completion(format!(
            "{ANSWER_OPEN}\n{}\n{ANSWER_CLOSE}",
            fenced(&render_report_json(&report))
        )),
        2 => Completion(format!(
            "{THINK_OPEN}{think}\nDraft:\n{}\n{THINK_CLOSE}\n{ANSWER_OPEN}\n{}\n{ANSWER_CLOSE}",
            fenced(&format!("{{\"final_verdict\": {{\"verdict\": \"{}\"", e.verdict)),
            fenced(&render_report_json(&report))
        )),
        3 => Completion(format!(
            "{THINK_OPEN}{think}{THINK_CLOSE}\n{ANSWER_OPEN}\n{}\n{ANSWER_CLOSE}",
            fenced(&report_without_verdict(&report))
        )),
        t => panic!("template {t} out of range"),
    }
}

/// Supervised target for an instance: compliant layout, correct verdict,
/// and, per agent, the bin nearest its probability in KL divergence.
pub fn oracle_target(instance: &LabeledInstance) -> Emission {
    Emission {
        template: COMPLIANT_TEMPLATE,
        verdict: Verdict::from_label(instance.label).expect("binary label"),
        bins: instance.agent_gt.to_array().map(best_bin),
        logp: 0.0,
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("cold start did not raise the target log-likelihood ({initial} -> {final_})")]
    NoImprovement { initial: f64, final_: f64 },
    #[error("cold start needs at least one example")]
    EmptySftSet,
    #[error("non-finite parameters after cold-start epoch {0}")]
    NonFinite(usize),
}

#[derive(Debug, Clone)]
pub struct ColdStartOutcome {
    pub params: PolicyParams,
    pub initial_loglik: f64,
    pub final_loglik: f64,
    /// Mean target log-likelihood before each epoch's update.
    pub history: Vec<f64>,
}

pub fn mean_target_loglik(params: &PolicyParams, sft: &[(LabeledInstance, Emission)]) -> f64 {
    sft.iter()
        .map(|(inst, e)| log_prob(params, &inst.features, e))
        .sum::<f64>()
        / sft.len() as f64
}

/// Full-batch gradient ascent on the mean target log-likelihood.
///
/// With `epochs == 0` or `lr == 0` nothing is attempted and the input
/// parameters come back unchanged.
pub fn cold_start_fit(
    params_init: &PolicyParams,
    sft: &[(LabeledInstance, Emission)],
    epochs: usize,
    lr: f64,
) -> Result<ColdStartOutcome, PolicyError> {
    if sft.is_empty() {
        return Err(PolicyError::EmptySftSet);
    }
    let initial = mean_target_loglik(params_init, sft);
    if epochs == 0 || lr == 0.0 {
        return Ok(ColdStartOutcome {
            params: params_init.clone(),
            initial_loglik: initial,
            final_loglik: initial,
            history: Vec::new(),
        });
    }
    let mut params = params_init.clone();
    let mut history = Vec::with_capacity(epochs);
    let inv_n = 1.0 / sft.len() as f64;
    for epoch in 0..epochs {
        let mut grad = PolicyParams::zeros(params.dim());
        let mut ll = 0.0;
        for (inst, e) in sft {
            ll += accumulate_log_prob_grad(&params, &inst.features, e, inv_n, &mut grad);
        }
        history.push(ll * inv_n);
        params.add_scaled(&grad, lr);
        if !params.is_finite() {
            return Err(PolicyError::NonFinite(epoch));
        }
    }
    let final_ = mean_target_loglik(&params, sft);
    if final_ <= initial {
        return Err(PolicyError::NoImprovement { initial, final_ });
    }
    Ok(ColdStartOutcome {
        params,
        initial_loglik: initial,
        final_loglik: final_,
        history,
    })
}
