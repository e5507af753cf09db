use serde::{Deserialize, Serialize};

use super::config::SearchConfig;
use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::graph::{EdgeId, NodeId};
use crate::metrics::{MemoryGate, TrialRecord};
use crate::mutation::Orientation;
use crate::kernel::PrimitiveKind;

pub const RUNLOG_FORMAT: &str = "spidernet-runlog/1";

/// Which procedure produced a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunKind {
    SpiderNet,
    Random { variant: u8 },
    /// Final training of a fixed structure, no search.
    Retrain,
}

impl std::fmt::Display for RunKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunKind::SpiderNet => f.write_str("spidernet"),
            RunKind::Random { variant } => write!(f, "random-{variant}"),
            RunKind::Retrain => f.write_str("retrain"),
        }
    }
}

/// Training phase: an inter-cycle phase or the final training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Cycle(usize),
    Final,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub deleted: usize,
}

/// An applied mutation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MutationRecord {
    pub cycle: usize,
    pub attempt: usize,
    pub edge: EdgeId,
    pub orientation: Orientation,
    pub node: NodeId,
    pub new_edges: [EdgeId; 2],
    /// Position of the run's random stream when the mutation was drawn.
    pub rng_word_pos: u128,
    pub memory_after: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttemptOutcome {
    Applied,
    /// No candidate passed the metric admission test.
    NoViable,
    /// The chosen candidate would break the memory budget.
    OverBudget,
    /// Selection failed outright; the cycle moves on.
    Failed(String),
}

/// One mutation attempt with everything needed to replay its decision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub cycle: usize,
    pub attempt: usize,
    pub outcome: AttemptOutcome,
    pub winner: Option<usize>,
    pub gate: Option<MemoryGate>,
    pub trials: Vec<TrialRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cause", rename_all = "snake_case")]
pub enum DeletionCause {
    Deadhead { off_fraction: f64 },
    Random,
}

/// A permanently deleted op.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeletionRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub edge: EdgeId,
    pub kind: PrimitiveKind,
    #[serde(flatten)]
    pub cause: DeletionCause,
}

/// A random deletion refused by the connectivity guard, or a deadhead
/// suppressed by it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedDeletion {
    pub phase: Phase,
    pub epoch: usize,
    pub edge: EdgeId,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub cycle: usize,
    /// Ops deleted during this cycle's training phase.
    pub deleted: usize,
    pub attempts: usize,
    pub applied: usize,
    pub op_count: usize,
    pub parameter_count: usize,
    pub memory_bytes: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    /// Start until final training begins.
    pub search_seconds: f64,
    pub total_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalStats {
    pub test_accuracy: f64,
    pub parameter_count: usize,
    pub peak_memory_bytes: usize,
    pub memory_bytes: usize,
    pub node_count: usize,
    pub edge_count: usize,
    pub op_count: usize,
}

/// Append-only record of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub format: String,
    pub kind: RunKind,
    pub seed: u64,
    pub config: SearchConfig,
    pub dataset: Option<DatasetSpec>,
    pub cycles: Vec<CycleRecord>,
    pub mutations: Vec<MutationRecord>,
    pub attempts: Vec<AttemptRecord>,
    pub deletions: Vec<DeletionRecord>,
    pub skipped_deletions: Vec<SkippedDeletion>,
    /// Ops deleted during final training.
    pub final_deleted: usize,
    pub epochs: Vec<EpochRecord>,
    pub peak_memory_bytes: usize,
    pub timings: Timings,
    pub final_stats: Option<FinalStats>,
}

impl RunLog {
    pub fn new(kind: RunKind, config: &SearchConfig, dataset: Option<DatasetSpec>) -> Self {
        RunLog {
            format: RUNLOG_FORMAT.into(),
            kind,
            seed: config.seed,
            config: config.clone(),
            dataset,
            cycles: Vec::new(),
            mutations: Vec::new(),
            attempts: Vec::new(),
            deletions: Vec::new(),
            skipped_deletions: Vec::new(),
            final_deleted: 0,
            epochs: Vec::new(),
            peak_memory_bytes: 0,
            timings: Timings::default(),
            final_stats: None,
        }
    }

    pub fn attempted_mutations(&self) -> usize {
        self.cycles.iter().map(|c| c.attempts).sum()
    }

    /// Copy with wall-clock fields zeroed, for reproducibility comparisons.
    pub fn without_timings(&self) -> RunLog {
        RunLog {
            timings: Timings::default(),
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<RunLog> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("format").and_then(|v| v.as_str()) {
            Some(RUNLOG_FORMAT) => {}
            Some(other) => return Err(Error::Format(format!("unsupported run log format {other:?}"))),
            None => return Err(Error::Format("run log has no format field".into())),
        }
        serde_json::from_value(value).map_err(|e| Error::Format(format!("run log: {e}")))
    }

    /// Checks a log can drive a replay: complete and internally consistent.
    pub fn check_replayable(&self) -> Result<()> {
        if self.kind == RunKind::Retrain {
            return Err(Error::Format("a retrain log has no search schedule to replay".into()));
        }
        if self.final_stats.is_none() {
            return Err(Error::Format("reference run log has no final stats".into()));
        }
        if self.cycles.len() != self.config.cycles {
            return Err(Error::Format(format!(
                "reference run log has {} cycle records for {} cycles",
                self.cycles.len(),
                self.config.cycles
            )));
        }
        Ok(())
    }
}
