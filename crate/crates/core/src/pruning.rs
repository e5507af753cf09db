//! Differentiable gate-plus-saw pruners and deadheading.
//!
//! Every candidate operation is multiplied by `Gate(w) + Saw(w)`: a step that
//! is 0 below zero and 1 otherwise, plus a saw tooth of height `1/M` whose
//! slope in `w` is exactly one. The forward behaves as a binary gate while
//! the weight still receives a usable gradient. Operations whose gate stays
//! off for more than three quarters of the batches in the trailing four
//! epochs are deleted for good.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::{Edge, EdgeId, SupernetModel};
use crate::kernel::{Init, ParamId, ParamStore, PrimitiveKind, Tape, Var};

pub const DEFAULT_M: f64 = 1e9;
pub const PRUNER_INIT: Init = Init::Range { lo: 0.05, hi: 0.15 };
/// An op is deadheaded when its off fraction strictly exceeds this.
pub const DEADHEAD_THRESHOLD: f64 = 0.75;
pub const WINDOW_EPOCHS: usize = 4;

pub fn gate(w: f64) -> f64 {
    if w < 0.0 {
        0.0
    } else {
        1.0
    }
}

pub fn saw(w: f64, m: f64) -> f64 {
    let mw = m * w;
    (mw - mw.floor()) / m
}

/// `Gate(w) + Saw(w)`.
pub fn pruner_factor(w: f64, m: f64) -> f64 {
    gate(w) + saw(w, m)
}

/// Ring buffer of per-batch gate-off flags.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OffHistory {
    capacity: usize,
    entries: VecDeque<bool>,
}

impl OffHistory {
    pub fn new(capacity: usize) -> Self {
        OffHistory {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.capacity > 0 && self.entries.len() == self.capacity
    }

    pub fn push(&mut self, off: bool) {
        if self.capacity == 0 {
            return;
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(off);
    }

    /// Fraction of off entries, only once the window is full.
    pub fn off_fraction(&self) -> Option<f64> {
        self.is_full()
            .then(|| self.entries.iter().filter(|&&b| b).count() as f64 / self.capacity as f64)
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn resize(&mut self, capacity: usize) {
        self.capacity = capacity;
        self.entries = VecDeque::with_capacity(capacity);
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PrunerState {
    pub weight: ParamId,
    pub m: f64,
    pub off_history: OffHistory,
}

impl PrunerState {
    pub fn new(weight: ParamId, m: f64, window: usize) -> Self {
        PrunerState {
            weight,
            m,
            off_history: OffHistory::new(window),
        }
    }

    pub fn is_off(&self, store: &ParamStore) -> bool {
        gate(store.scalar(self.weight)) == 0.0
    }
}

/// `(Gate(w) + Saw(w)) * x` with a straight-through unit slope for `w`.
pub fn pruner_apply(tape: &mut Tape, store: &ParamStore, x: Var, state: &PrunerState) -> Var {
    let w = store.scalar(state.weight);
    let wv = tape.param(store, state.weight);
    tape.pruner(x, wv, pruner_factor(w, state.m))
}

/// Append the current gate-off flag of every op on `edge` to its history.
pub fn record_usage(edge: &mut Edge, store: &ParamStore) {
    for op in &mut edge.ops {
        let off = op.pruner.is_off(store);
        op.pruner.off_history.push(off);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeadheadRecord {
    pub cycle: usize,
    pub epoch: usize,
    pub edge: EdgeId,
    pub kind: PrimitiveKind,
    pub off_fraction: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DeadheadOutcome {
    pub records: Vec<DeadheadRecord>,
    /// Deletions the connectivity guard refused.
    pub suppressed: Vec<(EdgeId, PrimitiveKind)>,
    /// Ops removed because their node fell off every input-output path.
    pub stranded_ops: usize,
}

/// Result of one guarded deletion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Deletion {
    Deleted { stranded_ops: usize },
    /// Removing the op would have cut the cell output off its inputs.
    Guarded,
    Missing,
}

impl Deletion {
    pub fn is_deleted(self) -> bool {
        matches!(self, Deletion::Deleted { .. })
    }
}

impl SupernetModel {
    pub fn record_usage(&mut self) {
        let store = &self.params;
        for cell in &mut self.cells {
            for edge in &mut cell.edges {
                record_usage(edge, store);
            }
        }
    }

    pub fn clear_usage(&mut self) {
        for op in self.ops_mut() {
            op.pruner.off_history.clear();
        }
    }

    /// Permanently delete one op, refusing if that disconnects the cell output.
    pub fn delete_op(&mut self, edge: EdgeId, kind: PrimitiveKind) -> Deletion {
        let Some((ci, ei)) = self.locate_edge(edge) else {
            return Deletion::Missing;
        };
        let Some(oi) = self.cells[ci].edges[ei].ops.iter().position(|o| o.kind == kind) else {
            return Deletion::Missing;
        };
        if self.cells[ci].edges[ei].ops.len() == 1 {
            let removed = self.cells[ci].edges.remove(ei);
            if !self.cells[ci].output_connected() {
                self.cells[ci].edges.insert(ei, removed);
                return Deletion::Guarded;
            }
            for op in &removed.ops {
                op.params.free(&mut self.params);
                self.params.free(op.pruner.weight);
            }
        } else {
            let op = self.cells[ci].edges[ei].ops.remove(oi);
            op.params.free(&mut self.params);
            self.params.free(op.pruner.weight);
        }
        let stranded_ops = self.remove_stranded(ci);
        debug_assert!(self.validate().is_ok());
        Deletion::Deleted { stranded_ops }
    }
}

/// Delete every op whose gate was off in more than 75% of a full window.
pub fn deadhead_pass(model: &mut SupernetModel, cycle: usize, epoch: usize) -> Result<DeadheadOutcome> {
    let candidates: Vec<(EdgeId, PrimitiveKind, f64)> = model
        .ops()
        .filter_map(|(e, o)| {
            o.pruner
                .off_history
                .off_fraction()
                .filter(|&f| f > DEADHEAD_THRESHOLD)
                .map(|f| (e.id, o.kind, f))
        })
        .collect();
    let mut outcome = DeadheadOutcome::default();
    for (edge, kind, off_fraction) in candidates {
        match model.delete_op(edge, kind) {
            Deletion::Deleted { stranded_ops } => {
                outcome.stranded_ops += stranded_ops;
                outcome.records.push(DeadheadRecord {
                    cycle,
                    epoch,
                    edge,
                    kind,
                    off_fraction,
                });
            }
            Deletion::Guarded => outcome.suppressed.push((edge, kind)),
            Deletion::Missing => {}
        }
    }
    model.validate()?;
    Ok(outcome)
}
