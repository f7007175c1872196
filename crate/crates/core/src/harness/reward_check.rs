//! Offline scoring of completion transcripts against labels.
//!
//! Inputs are two JSONL files joined on `id`:
//! completions `{"id", "completion"}` and labels `{"id", "label", "agent_gt"?}`.
//! Output is one JSON object per completion line (a reward vector or an
//! error), followed by a summary object.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::pipeline::HarnessError;
use crate::agents::AgentPanel;
use crate::dataset::LabeledInstance;
use crate::reward::{reward_all, AgentOpinions, RewardConfig, RewardVector};
use crate::verdict::Completion;

/// How many offending ids an id-mismatch error lists.
pub const MAX_LISTED_OFFENDERS: usize = 10;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub id: String,
    pub completion: String,
}

#[derive(Debug, Clone, Deserialize)]
struct LabelRecord {
    id: String,
    label: u8,
    #[serde(default)]
    agent_gt: Option<AgentOpinions>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RewardCheckSummary {
    pub scored: usize,
    pub errors: usize,
    /// Component means over scored lines; absent when nothing was scored.
    pub mean: Option<RewardVector>,
    /// Completion ids with no label, then label ids with no completion.
    pub mismatched_ids: Vec<String>,
}

fn line_error<W: Write>(out: &mut W, line: usize, id: Option<&str>, msg: &str) -> Result<(), HarnessError> {
    serde_json::to_writer(&mut *out, &json!({"line": line, "id": id, "error": msg}))?;
    out.write_all(b"\n")?;
    Ok(())
}

/// Scores every completion line and streams results to `out`. Bad lines are
/// reported inline and skipped. Returns `IdMismatch` after the summary if
/// the two files do not cover the same ids.
pub fn reward_check<W: Write>(
    completions_path: &Path,
    labels_path: &Path,
    panel: Option<&AgentPanel>,
    reward_cfg: &RewardConfig,
    mut out: W,
) -> Result<RewardCheckSummary, HarnessError> {
    let mut labels: HashMap<String, LabelRecord> = HashMap::new();
    let mut label_order = Vec::new();
    let mut errors = 0usize;
    for (i, line) in BufReader::new(File::open(labels_path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<LabelRecord>(&line) {
            Ok(r) if r.label > 1 => {
                errors += 1;
                log::warn!("labels line {}: label {} is not binary", i + 1, r.label);
            }
            Ok(r) => {
                label_order.push(r.id.clone());
                labels.insert(r.id.clone(), r);
            }
            Err(e) => {
                errors += 1;
                log::warn!("labels line {}: {e}", i + 1);
            }
        }
    }

    let mut seen = HashSet::new();
    let mut unlabeled = Vec::new();
    let mut sums = [0.0; 5];
    let mut scored = 0usize;
    for (i, line) in BufReader::new(File::open(completions_path)?).lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CompletionRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                errors += 1;
                line_error(&mut out, line_no, None, &e.to_string())?;
                continue;
            }
        };
        seen.insert(rec.id.clone());
        let Some(lab) = labels.get(&rec.id) else {
            errors += 1;
            unlabeled.push(rec.id.clone());
            line_error(&mut out, line_no, Some(&rec.id), "no label for this id")?;
            continue;
        };
        let gt = match (panel, lab.agent_gt) {
            (Some(p), _) => {
                let probe = LabeledInstance {
                    id: rec.id.clone(),
                    features: Vec::new(),
                    label: lab.label,
                    agent_gt: AgentOpinions::new(0.0, 0.0, 0.0),
                };
                match p.opinions(&probe) {
                    Ok(o) => o,
                    Err(e) => {
                        errors += 1;
                        line_error(&mut out, line_no, Some(&rec.id), &e.to_string())?;
                        continue;
                    }
                }
            }
            (None, Some(o)) if o.is_valid() => o,
            (None, Some(_)) => {
                errors += 1;
                line_error(&mut out, line_no, Some(&rec.id), "agent_gt outside [0, 1]")?;
                continue;
            }
            (None, None) => {
                errors += 1;
                line_error(&mut out, line_no, Some(&rec.id), "no agent opinions for this id")?;
                continue;
            }
        };
        let r = reward_all(&Completion::new(rec.completion), lab.label, gt, reward_cfg);
        for (s, v) in sums.iter_mut().zip(r.components().into_iter().chain([r.total])) {
            *s += v;
        }
        scored += 1;
        serde_json::to_writer(&mut out, &json!({"id": rec.id, "rewards": r}))?;
        out.write_all(b"\n")?;
    }

    let mut mismatched = unlabeled;
    mismatched.extend(label_order.into_iter().filter(|id| !seen.contains(id)));
    let mean = (scored > 0).then(|| {
        let n = scored as f64;
        RewardVector {
            r_format: sums[0] / n,
            r_json: sums[1] / n,
            r_acc: sums[2] / n,
            r_agentic: sums[3] / n,
            total: sums[4] / n,
        }
    });
    let summary = RewardCheckSummary {
        scored,
        errors,
        mean,
        mismatched_ids: mismatched.clone(),
    };
    serde_json::to_writer(&mut out, &json!({"summary": summary}))?;
    out.write_all(b"\n")?;
    out.flush()?;

    if !mismatched.is_empty() {
        let shown: Vec<&str> = mismatched.iter().take(MAX_LISTED_OFFENDERS).map(String::as_str).collect();
        return Err(HarnessError::IdMismatch(format!(
            "{} ids appear in only one of the files; first {}: {}",
            mismatched.len(),
            shown.len(),
            shown.join(", ")
        )));
    }
    Ok(summary)
}
