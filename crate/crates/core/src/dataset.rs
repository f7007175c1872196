//! Labeled instances and the synthetic world they are drawn from.
//!
//! An "image" is abstracted to a feature vector. In the synthetic world the
//! label is `1` (AI-generated) iff the features point along a hidden
//! direction, and the expert agents are tempered sigmoids of that score.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{AgentPanel, AgentRecord, AgentKind, SyntheticAgent};
use crate::reward::AgentOpinions;
use crate::rng::{derive_rng, stream};

pub const DEFAULT_FEATURE_DIM: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledInstance {
    pub id: String,
    pub features: Vec<f64>,
    /// 0 = real, 1 = AI-generated.
    pub label: u8,
    pub agent_gt: AgentOpinions,
}

impl LabeledInstance {
    pub fn validate(&self) -> Result<(), String> {
        if self.features.iter().any(|x| !x.is_finite()) {
            return Err(format!("{}: non-finite feature", self.id));
        }
        if self.label > 1 {
            return Err(format!("{}: label {} is not binary", self.id, self.label));
        }
        if !self.agent_gt.is_valid() {
            return Err(format!("{}: agent probabilities outside [0, 1]", self.id));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset size must be even for class balance, got {0}")]
    OddSize(usize),
    #[error("feature dimension must be positive")]
    ZeroDim,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
    #[error("line {line}: instance {id:?} has no agent_gt and no agent files were given")]
    MissingOpinions { line: usize, id: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Hidden direction plus the synthetic expert panel derived from it.
pub struct SyntheticWorld {
    direction: Arc<[f64]>,
    panel: AgentPanel,
}

impl SyntheticWorld {
    pub fn new(d: usize, seed: u64) -> Result<Self, DatasetError> {
        if d == 0 {
            return Err(DatasetError::ZeroDim);
        }
        let mut rng = derive_rng(seed, &[stream::DIRECTION]);
        let mut w: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        w.iter_mut().for_each(|x| *x /= norm);
        let direction: Arc<[f64]> = Arc::from(w);
        Ok(Self {
            panel: AgentPanel::synthetic(direction.clone()),
            direction,
        })
    }

    pub fn dim(&self) -> usize {
        self.direction.len()
    }

    pub fn direction(&self) -> &[f64] {
        &self.direction
    }

    pub fn score(&self, features: &[f64]) -> f64 {
        self.direction.iter().zip(features).map(|(w, x)| w * x).sum()
    }

    pub fn panel(&self) -> &AgentPanel {
        &self.panel
    }

    pub fn agent(&self, kind: AgentKind) -> SyntheticAgent {
        SyntheticAgent::with_default_profile(kind, self.direction.clone())
    }

    /// Draws `n` instances, exactly `n / 2` per class. Features are standard
    /// normal; a draw whose class is already full is rejected.
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R, id_prefix: &str) -> Result<Vec<LabeledInstance>, DatasetError> {
        if n % 2 != 0 {
            return Err(DatasetError::OddSize(n));
        }
        let per_class = n / 2;
        let mut counts = [0usize; 2];
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let features: Vec<f64> = (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect();
            let label = u8::from(self.score(&features) > 0.0);
            if counts[label as usize] == per_class {
                continue;
            }
            counts[label as usize] += 1;
            let mut inst = LabeledInstance {
                id: format!("{id_prefix}-{:06}", out.len()),
                features,
                label,
                agent_gt: AgentOpinions::new(0.0, 0.0, 0.0),
            };
            inst.agent_gt = self
                .panel
                .opinions(&inst)
                .expect("synthetic agents are total");
            out.push(inst);
        }
        Ok(out)
    }
}

/// Balanced synthetic dataset; a pure function of `(n, d, seed)`.
pub fn make_synthetic_dataset(n: usize, d: usize, seed: u64) -> Result<Vec<LabeledInstance>, DatasetError> {
    let world = SyntheticWorld::new(d, seed)?;
    world.sample(n, &mut derive_rng(seed, &[stream::TRAIN_DATA]), "train")
}

/// Held-out instances from the same world as [`make_synthetic_dataset`].
pub fn make_heldout_dataset(n: usize, d: usize, seed: u64) -> Result<Vec<LabeledInstance>, DatasetError> {
    let world = SyntheticWorld::new(d, seed)?;
    world.sample(n, &mut derive_rng(seed, &[stream::HELDOUT_DATA]), "heldout")
}

/// Wire form of an instance; `agent_gt` may come from separate agent files.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct InstanceRecord {
    id: String,
    features: Vec<f64>,
    label: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    agent_gt: Option<AgentOpinions>,
}

pub fn write_dataset(path: &Path, data: &[LabeledInstance]) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for inst in data {
        serde_json::to_writer(&mut w, inst)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// Reads a dataset JSONL file. When `panel` is given, agent opinions are
/// taken from it and override any `agent_gt` in the file.
pub fn read_dataset(path: &Path, panel: Option<&AgentPanel>) -> Result<Vec<LabeledInstance>, DatasetError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: InstanceRecord = serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let mut inst = LabeledInstance {
            id: rec.id,
            features: rec.features,
            label: rec.label,
            agent_gt: rec.agent_gt.unwrap_or(AgentOpinions::new(0.0, 0.0, 0.0)),
        };
        match (panel, rec.agent_gt) {
            (Some(p), _) => {
                inst.agent_gt = p.opinions(&inst).map_err(|e| DatasetError::Invalid {
                    line: line_no,
                    message: e.to_string(),
                })?;
            }
            (None, Some(_)) => {}
            (None, None) => {
                return Err(DatasetError::MissingOpinions {
                    line: line_no,
                    id: inst.id,
                })
            }
        }
        inst.validate().map_err(|message| DatasetError::Invalid { line: line_no, message })?;
        out.push(inst);
    }
    Ok(out)
}

/// Per-kind agent records for a dataset, in dataset order.
pub fn agent_records(data: &[LabeledInstance], kind: AgentKind) -> Vec<AgentRecord> {
    data.iter()
        .map(|inst| AgentRecord {
            instance_id: inst.id.clone(),
            prob: inst.agent_gt.to_array()[kind.index()],
        })
        .collect()
}
