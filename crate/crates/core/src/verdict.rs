//! Structured verdict format and the post-processing that recovers a verdict
//! and its reasoning from raw model text.
//!
//! A compliant completion looks like:
//!
//! ```text
//! <think>free-form reasoning</think>
//! <answer>
//! ```json
//! { "initial_scan": "...", ..., "final_verdict": { "verdict": "REAL", "reasoning": "..." } }
//! ```
//! </answer>
//! ```
//!
//! Parsing is split into three stages ([`extract_think_answer`],
//! [`extract_json_fence`], [`parse_report`]) so that the reward functions can
//! reuse each stage and report which one failed.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";
pub const ANSWER_OPEN: &str = "<answer>";
pub const ANSWER_CLOSE: &str = "</answer>";
pub const JSON_FENCE_OPEN: &str = "```json";
pub const FENCE_CLOSE: &str = "```";

const TAGS: [&str; 4] = [THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE];

/// Raw model emission. No well-formedness is assumed.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Completion(pub String);

impl Completion {
    pub fn new(text: impl Into<String>) -> Self {
        Self(text.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl From<&str> for Completion {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

impl From<String> for Completion {
    fn from(s: String) -> Self {
        Self(s)
    }
}

impl fmt::Display for Completion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Binary authenticity decision. `Real` maps to label 0, `AiGenerated` to 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    #[serde(rename = "REAL")]
    Real,
    #[serde(rename = "AI-GENERATED")]
    AiGenerated,
}

impl Verdict {
    pub const REAL_STR: &'static str = "REAL";
    pub const AI_GENERATED_STR: &'static str = "AI-GENERATED";

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Real => Self::REAL_STR,
            Verdict::AiGenerated => Self::AI_GENERATED_STR,
        }
    }

    /// Case-sensitive match against the two canonical strings.
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            Self::REAL_STR => Some(Verdict::Real),
            Self::AI_GENERATED_STR => Some(Verdict::AiGenerated),
            _ => None,
        }
    }

    pub fn label(self) -> u8 {
        match self {
            Verdict::Real => 0,
            Verdict::AiGenerated => 1,
        }
    }

    pub fn from_label(label: u8) -> Option<Self> {
        match label {
            0 => Some(Verdict::Real),
            1 => Some(Verdict::AiGenerated),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        self.label() as usize
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Step 4 of the detection pipeline: what each specialist detector reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpecialistAnalysis {
    pub prob_semantic: f64,
    pub prob_frequency: f64,
    pub prob_dual: f64,
}

impl SpecialistAnalysis {
    pub const KEYS: [&'static str; 3] = ["prob_semantic", "prob_frequency", "prob_dual"];

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

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalVerdict {
    pub verdict: Verdict,
    pub reasoning: String,
}

/// The five-step report carried inside the answer's JSON fence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub initial_scan: String,
    pub detailed_observation: String,
    pub technical_analysis: String,
    pub specialist_analysis: SpecialistAnalysis,
    pub final_verdict: FinalVerdict,
}

impl PipelineReport {
    /// The same report with probabilities rounded to the rendering precision.
    /// Rendering then parsing a canonical report is the identity.
    pub fn canonical(&self) -> Self {
        let round = |p: f64| fmt_prob(p).parse::<f64>().expect("formatted float parses");
        let mut out = self.clone();
        let s = &mut out.specialist_analysis;
        s.prob_semantic = round(s.prob_semantic);
        s.prob_frequency = round(s.prob_frequency);
        s.prob_dual = round(s.prob_dual);
        out
    }
}

/// Verdict plus reasoning recovered from a completion.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedVerdict {
    pub verdict: Verdict,
    pub report: PipelineReport,
    pub think_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VerdictError {
    #[error("completion does not match <think>...</think><answer>...</answer>")]
    FormatMismatch,
    #[error("no non-empty ```json fence found")]
    NoFence,
    #[error("malformed JSON: {0}")]
    Parse(String),
    #[error("schema violation: {0}")]
    Schema(String),
}

fn contains_tag(s: &str) -> bool {
    TAGS.iter().any(|t| s.contains(t))
}

/// Splits a completion into the inner text of its think and answer blocks.
///
/// After trimming, the text must be exactly one think block followed by one
/// answer block, with only whitespace between them. Block contents may not
/// contain any of the four tags.
pub fn extract_think_answer(text: &str) -> Result<(&str, &str), VerdictError> {
    let s = text.trim();
    let rest = s
        .strip_prefix(THINK_OPEN)
        .ok_or(VerdictError::FormatMismatch)?;
    let close = rest.find(THINK_CLOSE).ok_or(VerdictError::FormatMismatch)?;
    let think = &rest[..close];
    let rest = rest[close + THINK_CLOSE.len()..].trim_start();
    let rest = rest
        .strip_prefix(ANSWER_OPEN)
        .ok_or(VerdictError::FormatMismatch)?;
    let answer = rest
        .strip_suffix(ANSWER_CLOSE)
        .ok_or(VerdictError::FormatMismatch)?;
    if contains_tag(think) || contains_tag(answer) {
        return Err(VerdictError::FormatMismatch);
    }
    Ok((think, answer))
}

/// Inner text (trimmed) of the first ```json fence in `text`.
pub fn extract_json_fence(text: &str) -> Result<&str, VerdictError> {
    let start = text.find(JSON_FENCE_OPEN).ok_or(VerdictError::NoFence)?;
    let body = &text[start + JSON_FENCE_OPEN.len()..];
    let end = body.find(FENCE_CLOSE).ok_or(VerdictError::NoFence)?;
    let inner = body[..end].trim();
    if inner.is_empty() {
        return Err(VerdictError::NoFence);
    }
    Ok(inner)
}

fn optional_text(root: &Value, key: &str) -> Result<String, VerdictError> {
    match root.get(key) {
        None | Some(Value::Null) => Ok(String::new()),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(VerdictError::Schema(format!("{key} must be a string"))),
    }
}

fn probability(section: &Value, key: &str) -> Result<f64, VerdictError> {
    let p = section
        .get(key)
        .ok_or_else(|| VerdictError::Schema(format!("missing specialist_analysis.{key}")))?
        .as_f64()
        .ok_or_else(|| VerdictError::Schema(format!("specialist_analysis.{key} is not a number")))?;
    if !(0.0..=1.0).contains(&p) {
        return Err(VerdictError::Schema(format!(
            "specialist_analysis.{key} = {p} outside [0, 1]"
        )));
    }
    Ok(p)
}

/// Parses and validates the JSON report.
pub fn parse_report(json_text: &str) -> Result<PipelineReport, VerdictError> {
    let root: Value =
        serde_json::from_str(json_text).map_err(|e| VerdictError::Parse(e.to_string()))?;
    if !root.is_object() {
        return Err(VerdictError::Schema("report must be a JSON object".into()));
    }

    let fv = root
        .get("final_verdict")
        .filter(|v| v.is_object())
        .ok_or_else(|| VerdictError::Schema("missing final_verdict".into()))?;
    let verdict_str = fv
        .get("verdict")
        .and_then(Value::as_str)
        .ok_or_else(|| VerdictError::Schema("missing final_verdict.verdict".into()))?;
    let verdict = Verdict::parse(verdict_str)
        .ok_or_else(|| VerdictError::Schema(format!("unknown verdict {verdict_str:?}")))?;
    let reasoning = optional_text(fv, "reasoning")?;

    let sa = root
        .get("specialist_analysis")
        .filter(|v| v.is_object())
        .ok_or_else(|| VerdictError::Schema("missing specialist_analysis".into()))?;
    let specialist_analysis = SpecialistAnalysis {
        prob_semantic: probability(sa, "prob_semantic")?,
        prob_frequency: probability(sa, "prob_frequency")?,
        prob_dual: probability(sa, "prob_dual")?,
    };

    Ok(PipelineReport {
        initial_scan: optional_text(&root, "initial_scan")?,
        detailed_observation: optional_text(&root, "detailed_observation")?,
        technical_analysis: optional_text(&root, "technical_analysis")?,
        specialist_analysis,
        final_verdict: FinalVerdict { verdict, reasoning },
    })
}

/// Post-processing: completion → (verdict, reasoning).
pub fn f_post(c: &Completion) -> Result<ParsedVerdict, VerdictError> {
    let (think, answer) = extract_think_answer(c.as_str())?;
    let json = extract_json_fence(answer)?;
    let report = parse_report(json)?;
    Ok(ParsedVerdict {
        verdict: report.final_verdict.verdict,
        report,
        think_text: think.to_string(),
    })
}

/// JSON string literal with `<`, `>` and backticks escaped, so free text can
/// never open a tag or close the fence.
pub(crate) fn json_string(s: &str) -> String {
    let quoted = serde_json::to_string(s).expect("string serialization is infallible");
    quoted
        .replace('<', "\\u003c")
        .replace('>', "\\u003e")
        .replace('`', "\\u0060")
}

fn fmt_prob(p: f64) -> String {
    format!("{p:.4}")
}

/// Canonical JSON body of a report: fixed key order, 2-space indent,
/// probabilities with four decimals.
pub fn render_report_json(r: &PipelineReport) -> String {
    let sa = &r.specialist_analysis;
    format!(
        "{{\n  \"initial_scan\": {},\n  \"detailed_observation\": {},\n  \"technical_analysis\": {},\n  \"specialist_analysis\": {{\n    \"prob_semantic\": {},\n    \"prob_frequency\": {},\n    \"prob_dual\": {}\n  }},\n  \"final_verdict\": {{\n    \"verdict\": {},\n    \"reasoning\": {}\n  }}\n}}",
        json_string(&r.initial_scan),
        json_string(&r.detailed_observation),
        json_string(&r.technical_analysis),
        fmt_prob(sa.prob_semantic),
        fmt_prob(sa.prob_frequency),
        fmt_prob(sa.prob_dual),
        json_string(r.final_verdict.verdict.as_str()),
        json_string(&r.final_verdict.reasoning),
    )
}

pub(crate) fn fenced(json: &str) -> String {
    format!("{JSON_FENCE_OPEN}\n{json}\n{FENCE_CLOSE}")
}

/// Renders a fully compliant completion.
///
/// `think` must not contain any of the four block tags; the report's free
/// text may contain anything. For a canonical report,
/// `f_post(&render_report(r, t))` gives back `(r, t)` exactly.
pub fn render_report(report: &PipelineReport, think: &str) -> Completion {
    debug_assert!(!contains_tag(think), "think text contains a block tag");
    Completion(format!(
        "{THINK_OPEN}{think}{THINK_CLOSE}\n{ANSWER_OPEN}\n{}\n{ANSWER_CLOSE}",
        fenced(&render_report_json(report))
    ))
}
