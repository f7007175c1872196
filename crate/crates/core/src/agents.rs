//! Expert agents: three detectors (semantic, frequency, dual-stream) that
//! report the probability an instance is AI-generated. Their outputs are the
//! soft targets of the agentic reward.
//!
//! Two implementations sit behind [`ExpertAgent`]: [`SyntheticAgent`], a
//! tempered sigmoid of the hidden score of a synthetic world, and
//! [`AgentStore`], probabilities computed elsewhere and ingested from JSONL.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::LabeledInstance;
use crate::reward::AgentOpinions;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Semantic,
    Frequency,
    DualStream,
}

impl AgentKind {
    pub const ALL: [AgentKind; 3] = [AgentKind::Semantic, AgentKind::Frequency, AgentKind::DualStream];

    /// Report key this agent's probability is stored under.
    pub fn key(self) -> &'static str {
        match self {
            AgentKind::Semantic => "prob_semantic",
            AgentKind::Frequency => "prob_frequency",
            AgentKind::DualStream => "prob_dual",
        }
    }

    pub fn index(self) -> usize {
        match self {
            AgentKind::Semantic => 0,
            AgentKind::Frequency => 1,
            AgentKind::DualStream => 2,
        }
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AgentKind::Semantic => "semantic",
            AgentKind::Frequency => "frequency",
            AgentKind::DualStream => "dual_stream",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("{kind} agent has no record for instance {instance_id:?}")]
    MissingRecord { kind: AgentKind, instance_id: String },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: probability {prob} outside [0, 1]")]
    Range { line: usize, prob: f64 },
    #[error("line {line}: duplicate instance id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub trait ExpertAgent: Send + Sync {
    fn kind(&self) -> AgentKind;
    fn query(&self, instance: &LabeledInstance) -> Result<f64, AgentError>;
}

/// `sigmoid((direction · x + offset) / temperature)`.
#[derive(Debug, Clone)]
pub struct SyntheticAgent {
    kind: AgentKind,
    direction: Arc<[f64]>,
    temperature: f64,
    offset: f64,
}

impl SyntheticAgent {
    pub fn new(kind: AgentKind, direction: Arc<[f64]>, temperature: f64, offset: f64) -> Self {
        assert!(temperature > 0.0, "temperature must be positive");
        Self {
            kind,
            direction,
            temperature,
            offset,
        }
    }

    /// Default temperature and offset per kind. The three experts see the
    /// same hidden score but disagree near the decision boundary.
    pub fn with_default_profile(kind: AgentKind, direction: Arc<[f64]>) -> Self {
        let (temperature, offset) = match kind {
            AgentKind::Semantic => (0.10, 0.0),
            AgentKind::Frequency => (0.15, 0.05),
            AgentKind::DualStream => (0.12, -0.03),
        };
        Self::new(kind, direction, temperature, offset)
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn prob_from_score(&self, score: f64) -> f64 {
        sigmoid((score + self.offset) / self.temperature)
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl ExpertAgent for SyntheticAgent {
    fn kind(&self) -> AgentKind {
        self.kind
    }

    fn query(&self, instance: &LabeledInstance) -> Result<f64, AgentError> {
        let score: f64 = self
            .direction
            .iter()
            .zip(&instance.features)
            .map(|(w, x)| w * x)
            .sum();
        Ok(self.prob_from_score(score))
    }
}

/// One line of an agent JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentRecord {
    pub instance_id: String,
    pub prob: f64,
}

/// Probabilities for one agent kind, keyed by instance id. Immutable once built.
#[derive(Debug, Clone)]
pub struct AgentStore {
    kind: AgentKind,
    probs: HashMap<String, f64>,
}

impl AgentStore {
    pub fn kind(&self) -> AgentKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn get(&self, instance_id: &str) -> Option<f64> {
        self.probs.get(instance_id).copied()
    }

    /// Builds a store, validating range and id uniqueness. Errors carry the
    /// 1-based position of the offending record.
    pub fn from_records<I>(kind: AgentKind, records: I) -> Result<Self, AgentError>
    where
        I: IntoIterator<Item = AgentRecord>,
    {
        let mut probs = HashMap::new();
        for (i, rec) in records.into_iter().enumerate() {
            insert_record(&mut probs, rec, i + 1)?;
        }
        Ok(Self { kind, probs })
    }

    /// Records sorted by instance id.
    pub fn records(&self) -> Vec<AgentRecord> {
        let mut out: Vec<_> = self
            .probs
            .iter()
            .map(|(id, &prob)| AgentRecord {
                instance_id: id.clone(),
                prob,
            })
            .collect();
        out.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
        out
    }
}

fn insert_record(
    probs: &mut HashMap<String, f64>,
    rec: AgentRecord,
    line: usize,
) -> Result<(), AgentError> {
    if !(0.0..=1.0).contains(&rec.prob) {
        return Err(AgentError::Range {
            line,
            prob: rec.prob,
        });
    }
    if probs.contains_key(&rec.instance_id) {
        return Err(AgentError::DuplicateId {
            line,
            id: rec.instance_id,
        });
    }
    probs.insert(rec.instance_id, rec.prob);
    Ok(())
}

impl ExpertAgent for AgentStore {
    fn kind(&self) -> AgentKind {
        self.kind
    }

    fn query(&self, instance: &LabeledInstance) -> Result<f64, AgentError> {
        self.get(&instance.id).ok_or_else(|| AgentError::MissingRecord {
            kind: self.kind,
            instance_id: instance.id.clone(),
        })
    }
}

/// Reads a JSONL file of `{instance_id, prob}` records. Blank lines are skipped.
pub fn ingest_agent_file(path: &Path, kind: AgentKind) -> Result<AgentStore, AgentError> {
    let reader = BufReader::new(File::open(path)?);
    let mut probs = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AgentRecord = serde_json::from_str(&line).map_err(|e| AgentError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        insert_record(&mut probs, rec, line_no)?;
    }
    Ok(AgentStore { kind, probs })
}

pub fn write_agent_file(path: &Path, records: &[AgentRecord]) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(File::create(path)?);
    for rec in records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// The three agents in fixed key order.
pub struct AgentPanel {
    agents: [Box<dyn ExpertAgent>; 3],
}

impl AgentPanel {
    /// `agents` may be given in any order but must cover each kind once.
    pub fn new(agents: [Box<dyn ExpertAgent>; 3]) -> Self {
        let mut slots: [Option<Box<dyn ExpertAgent>>; 3] = [None, None, None];
        for a in agents {
            let i = a.kind().index();
            assert!(slots[i].is_none(), "duplicate agent kind {}", a.kind());
            slots[i] = Some(a);
        }
        let [a, b, c] = slots;
        Self {
            agents: [a.unwrap(), b.unwrap(), c.unwrap()],
        }
    }

    pub fn synthetic(direction: Arc<[f64]>) -> Self {
        Self::new(AgentKind::ALL.map(|k| {
            Box::new(SyntheticAgent::with_default_profile(k, direction.clone())) as Box<dyn ExpertAgent>
        }))
    }

    pub fn from_stores(stores: [AgentStore; 3]) -> Self {
        Self::new(stores.map(|s| Box::new(s) as Box<dyn ExpertAgent>))
    }

    pub fn query(&self, kind: AgentKind, instance: &LabeledInstance) -> Result<f64, AgentError> {
        self.agents[kind.index()].query(instance)
    }

    pub fn opinions(&self, instance: &LabeledInstance) -> Result<AgentOpinions, AgentError> {
        Ok(AgentOpinions::new(
            self.query(AgentKind::Semantic, instance)?,
            self.query(AgentKind::Frequency, instance)?,
            self.query(AgentKind::DualStream, instance)?,
        ))
    }
}
