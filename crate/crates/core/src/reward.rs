//! Rule-based rewards over completions: reasoning format, JSON format,
//! verdict accuracy and the agentic (expert-calibration) reward, plus their
//! weighted aggregation.
//!
//! Failure codes follow the scoring rules exactly: accuracy and agentic
//! rewards are `-1.0` when the verdict cannot be recovered, `0.0` when the
//! verdict is wrong. The agentic reward is `exp(-mean BCE)` between the
//! completion's specialist probabilities and the expert agents' outputs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::verdict::{self, f_post, Completion, Verdict};

/// Clamp applied inside [`bce`] so hard predictions stay finite.
pub const DEFAULT_BCE_EPSILON: f64 = 1e-7;

/// Expert-agent probabilities that an instance is AI-generated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentOpinions {
    pub prob_semantic: f64,
    pub prob_frequency: f64,
    pub prob_dual: f64,
}

impl AgentOpinions {
    pub fn new(prob_semantic: f64, prob_frequency: f64, prob_dual: f64) -> Self {
        Self {
            prob_semantic,
            prob_frequency,
            prob_dual,
        }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.prob_semantic, self.prob_frequency, self.prob_dual]
    }

    pub fn from_array(p: [f64; 3]) -> Self {
        Self::new(p[0], p[1], p[2])
    }

    pub fn is_valid(&self) -> bool {
        self.to_array().iter().all(|p| (0.0..=1.0).contains(p))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardWeights {
    pub w_format: f64,
    pub w_json: f64,
    pub w_acc: f64,
    pub w_agentic: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self::unit()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WeightsError {
    #[error("reward weight {0} must be finite and non-negative, got {1}")]
    Negative(&'static str, f64),
    #[error("at least one reward weight must be positive")]
    AllZero,
}

impl RewardWeights {
    pub fn unit() -> Self {
        Self::new(1.0, 1.0, 1.0, 1.0)
    }

    pub fn new(w_format: f64, w_json: f64, w_acc: f64, w_agentic: f64) -> Self {
        Self {
            w_format,
            w_json,
            w_acc,
            w_agentic,
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w_format, self.w_json, self.w_acc, self.w_agentic]
    }

    pub fn validate(&self) -> Result<(), WeightsError> {
        let names = ["w_format", "w_json", "w_acc", "w_agentic"];
        for (name, w) in names.into_iter().zip(self.to_array()) {
            if !(w.is_finite() && w >= 0.0) {
                return Err(WeightsError::Negative(name, w));
            }
        }
        if self.to_array().iter().all(|&w| w == 0.0) {
            return Err(WeightsError::AllZero);
        }
        Ok(())
    }
}

/// Where the JSON-format reward looks for its fence.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JsonScope {
    /// First fence anywhere in the completion.
    #[default]
    Completion,
    /// First fence inside the answer block; no answer block scores 0.
    AnswerBlock,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    pub weights: RewardWeights,
    pub bce_epsilon: f64,
    pub json_scope: JsonScope,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            weights: RewardWeights::unit(),
            bce_epsilon: DEFAULT_BCE_EPSILON,
            json_scope: JsonScope::Completion,
        }
    }
}

impl RewardConfig {
    pub fn with_weights(weights: RewardWeights) -> Self {
        Self {
            weights,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardVector {
    pub r_format: f64,
    pub r_json: f64,
    pub r_acc: f64,
    pub r_agentic: f64,
    pub total: f64,
}

impl RewardVector {
    pub fn components(&self) -> [f64; 4] {
        [self.r_format, self.r_json, self.r_acc, self.r_agentic]
    }
}

pub fn reward_format(c: &Completion) -> f64 {
    if verdict::extract_think_answer(c.as_str()).is_ok() {
        1.0
    } else {
        0.0
    }
}

fn json_parses(text: &str) -> bool {
    match verdict::extract_json_fence(text) {
        Ok(body) => serde_json::from_str::<serde_json::Value>(body).is_ok(),
        Err(_) => false,
    }
}

/// 1.0 iff the first non-empty ```json fence parses as JSON. Schema is not checked.
pub fn reward_json(c: &Completion) -> f64 {
    reward_json_scoped(c, JsonScope::Completion)
}

pub fn reward_json_scoped(c: &Completion, scope: JsonScope) -> f64 {
    let ok = match scope {
        JsonScope::Completion => json_parses(c.as_str()),
        JsonScope::AnswerBlock => verdict::extract_think_answer(c.as_str())
            .map(|(_, answer)| json_parses(answer))
            .unwrap_or(false),
    };
    if ok {
        1.0
    } else {
        0.0
    }
}

fn label_matches(verdict: Verdict, label: u8) -> bool {
    matches!(
        (label, verdict),
        (0, Verdict::Real) | (1, Verdict::AiGenerated)
    )
}

/// `-1` if no verdict can be recovered, `1` if it matches `label`, `0` otherwise.
pub fn reward_accuracy(c: &Completion, label: u8) -> f64 {
    match f_post(c) {
        Err(_) => -1.0,
        Ok(p) if label_matches(p.verdict, label) => 1.0,
        Ok(_) => 0.0,
    }
}

/// Binary cross-entropy of `p_pred` against the soft target `p_gt`, with
/// both log arguments clamped from below at `eps`.
pub fn bce_with_epsilon(p_pred: f64, p_gt: f64, eps: f64) -> f64 {
    let l1 = p_pred.max(eps).ln();
    let l0 = (1.0 - p_pred).max(eps).ln();
    -(p_gt * l1 + (1.0 - p_gt) * l0)
}

pub fn bce(p_pred: f64, p_gt: f64) -> f64 {
    bce_with_epsilon(p_pred, p_gt, DEFAULT_BCE_EPSILON)
}

/// `exp(-mean BCE)` over the three specialist keys; used once the verdict is
/// known to be correct.
pub fn agentic_score(pred: [f64; 3], gt: AgentOpinions, eps: f64) -> f64 {
    let losses = pred
        .iter()
        .zip(gt.to_array())
        .map(|(&p, g)| bce_with_epsilon(p, g, eps));
    let mean = losses.sum::<f64>() / 3.0;
    (-mean).exp()
}

pub fn reward_agentic(c: &Completion, label: u8, gt: AgentOpinions) -> f64 {
    reward_agentic_with_epsilon(c, label, gt, DEFAULT_BCE_EPSILON)
}

pub fn reward_agentic_with_epsilon(c: &Completion, label: u8, gt: AgentOpinions, eps: f64) -> f64 {
    match f_post(c) {
        Err(_) => -1.0,
        Ok(p) if label_matches(p.verdict, label) => {
            agentic_score(p.report.specialist_analysis.to_array(), gt, eps)
        }
        Ok(_) => 0.0,
    }
}

/// Scores all four components (no short-circuiting) and their weighted sum.
pub fn reward_all(c: &Completion, label: u8, gt: AgentOpinions, cfg: &RewardConfig) -> RewardVector {
    let r_format = reward_format(c);
    let r_json = reward_json_scoped(c, cfg.json_scope);
    // accuracy and agentic share one parse
    let (r_acc, r_agentic) = match f_post(c) {
        Err(_) => (-1.0, -1.0),
        Ok(p) if label_matches(p.verdict, label) => (
            1.0,
            agentic_score(p.report.specialist_analysis.to_array(), gt, cfg.bce_epsilon),
        ),
        Ok(_) => (0.0, 0.0),
    };
    let w = cfg.weights;
    let total = w.w_format * r_format + w.w_json * r_json + w.w_acc * r_acc + w.w_agentic * r_agentic;
    RewardVector {
        r_format,
        r_json,
        r_acc,
        r_agentic,
        total,
    }
}
