//! Triangular mutation, weight reinitialization and the analytic memory model.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Cell, Edge, EdgeId, Node, NodeId, NodeKind, SupernetModel};
use crate::kernel::{OpParams, PrimitiveKind};

/// Bytes per stored scalar in the memory model.
pub const BYTES_PER_SCALAR: usize = 4;

/// Wiring of the fresh node `C` added on edge `A -> B` (which is kept).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// `A -> C -> B`: A sends two, C relays, B receives two.
    Relay,
    /// `A -> C`, `B -> C`: A sends two, B relays, C receives two.
    Fork,
    /// `C -> A`, `C -> B`: C sends two, A relays, B receives two.
    Funnel,
}

impl Orientation {
    pub const ALL: [Orientation; 3] = [Orientation::Relay, Orientation::Fork, Orientation::Funnel];

    /// `(from, to)` of the two new edges.
    fn wiring(self, a: NodeId, b: NodeId, c: NodeId) -> [(NodeId, NodeId); 2] {
        match self {
            Orientation::Relay => [(a, c), (c, b)],
            Orientation::Fork => [(a, c), (b, c)],
            Orientation::Funnel => [(c, a), (c, b)],
        }
    }

    /// Whether the wiring is legal on `edge`: no edge may enter an input
    /// node or leave the output node.
    pub fn applies_to(self, cell: &Cell, edge: &Edge) -> bool {
        let is = |id: NodeId, f: fn(&Node) -> bool| cell.node(id).is_some_and(f);
        match self {
            Orientation::Relay => true,
            Orientation::Fork => !is(edge.to, |n| n.kind == NodeKind::Output),
            Orientation::Funnel => !is(edge.from, Node::is_input),
        }
    }

    /// Whether `C` ends up on an input-to-output path.
    pub fn keeps_new_node_live(self) -> bool {
        self == Orientation::Relay
    }
}

impl std::fmt::Display for Orientation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Orientation::Relay => "relay",
            Orientation::Fork => "fork",
            Orientation::Funnel => "funnel",
        })
    }
}

/// What a mutation added.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MutationOutcome {
    pub node: NodeId,
    pub edges: [EdgeId; 2],
}

/// Add a fresh node on `edge` and two new edges carrying every searchable
/// op with fresh parameters and pruners. The original edge is kept.
pub fn triangular_mutate<R: Rng + ?Sized>(
    model: &mut SupernetModel,
    edge: EdgeId,
    orientation: Orientation,
    rng: &mut R,
) -> Result<MutationOutcome> {
    let (ci, ei) = model
        .locate_edge(edge)
        .ok_or_else(|| Error::Structural(format!("no edge {edge} to mutate")))?;
    let (a, b) = {
        let cell = &model.cells[ci];
        let e = &cell.edges[ei];
        if !orientation.applies_to(cell, e) {
            return Err(Error::Structural(format!(
                "{orientation} wiring is illegal on {edge} ({} -> {})",
                e.from, e.to
            )));
        }
        (e.from, e.to)
    };
    let channels = model.cells[ci].channels;
    let c = NodeId(model.fresh_id());
    model.cells[ci].nodes.push(Node {
        id: c,
        kind: NodeKind::Intermediate,
    });
    let mut new_edges = [EdgeId(0); 2];
    for (slot, (from, to)) in orientation.wiring(a, b, c).into_iter().enumerate() {
        let id = EdgeId(model.fresh_id());
        let ops = PrimitiveKind::SEARCHABLE
            .iter()
            .map(|&k| model.alloc_op(k, channels, id, rng))
            .collect();
        model.cells[ci].edges.push(Edge {
            id,
            from,
            to,
            ops,
            disconnected: false,
        });
        new_edges[slot] = id;
    }
    debug_assert!(model.validate().is_ok());
    Ok(MutationOutcome {
        node: c,
        edges: new_edges,
    })
}

/// Redraw every parameter (pruners included) from its initializer and clear
/// pruner usage histories. Structure is left untouched.
pub fn reinit_weights<R: Rng + ?Sized>(model: &mut SupernetModel, rng: &mut R) {
    model.params.reinit(rng);
    model.clear_usage();
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MemoryEstimate {
    pub parameter_bytes: usize,
    pub activation_bytes: usize,
    pub total: usize,
}

impl MemoryEstimate {
    /// From scalar counts; activations counted twice (value and gradient).
    pub fn from_counts(params: usize, activation_elements: usize, batch: usize) -> Self {
        let parameter_bytes = BYTES_PER_SCALAR * params;
        let activation_bytes = BYTES_PER_SCALAR * batch * activation_elements * 2;
        MemoryEstimate {
            parameter_bytes,
            activation_bytes,
            total: parameter_bytes + activation_bytes,
        }
    }
}

impl std::ops::Add for MemoryEstimate {
    type Output = MemoryEstimate;

    fn add(self, o: MemoryEstimate) -> MemoryEstimate {
        MemoryEstimate {
            parameter_bytes: self.parameter_bytes + o.parameter_bytes,
            activation_bytes: self.activation_bytes + o.activation_bytes,
            total: self.total + o.total,
        }
    }
}

impl std::iter::Sum for MemoryEstimate {
    fn sum<I: Iterator<Item = MemoryEstimate>>(iter: I) -> Self {
        iter.fold(MemoryEstimate::default(), |a, b| a + b)
    }
}

/// One primitive at `channels` on a `side x side` map, pruner excluded.
pub fn estimate_op(kind: PrimitiveKind, channels: usize, side: usize, batch: usize) -> MemoryEstimate {
    MemoryEstimate::from_counts(
        kind.param_count(channels, channels) + kind.buffer_count(channels, channels),
        kind.activation_elements(channels, channels, side, side),
        batch,
    )
}

fn estimate_kinds(kinds: impl Iterator<Item = PrimitiveKind>, channels: usize, side: usize, batch: usize) -> MemoryEstimate {
    kinds
        .map(|k| estimate_op(k, channels, side, batch) + MemoryEstimate::from_counts(1, 0, batch))
        .sum()
}

/// An edge: its ops plus one pruner scalar per op.
pub fn estimate_edge(model: &SupernetModel, edge: EdgeId, batch: usize) -> Option<MemoryEstimate> {
    let (ci, ei) = model.locate_edge(edge)?;
    let cell = &model.cells[ci];
    let side = model.config.side_at(cell.scale);
    Some(estimate_kinds(
        cell.edges[ei].ops.iter().map(|o| o.kind),
        cell.channels,
        side,
        batch,
    ))
}

/// A fresh edge with the full searchable op set in cell `cell_idx`.
pub fn estimate_full_edge(model: &SupernetModel, cell_idx: usize, batch: usize) -> MemoryEstimate {
    let cell = &model.cells[cell_idx];
    estimate_kinds(
        PrimitiveKind::SEARCHABLE.iter().copied(),
        cell.channels,
        model.config.side_at(cell.scale),
        batch,
    )
}

/// Largest full-op-set edge over all cells, the headroom one mutation may need.
pub fn estimate_max_full_edge(model: &SupernetModel, batch: usize) -> MemoryEstimate {
    (0..model.cells.len())
        .map(|ci| estimate_full_edge(model, ci, batch))
        .max_by_key(|m| m.total)
        .unwrap_or_default()
}

/// Whole model: every stored scalar (running statistics included) plus activations of stem, input
/// preprocessing, every candidate op and the head.
pub fn estimate_model(model: &SupernetModel, batch: usize) -> MemoryEstimate {
    let cfg = &model.config;
    let side0 = cfg.side_at(0);
    let c0 = model.stem.channels;
    let mut act = 2 * c0 * side0 * side0;
    for cell in &model.cells {
        let side = cfg.side_at(cell.scale);
        for p in &cell.preprocessors {
            let mut s = cfg.side_at(p.source_scale);
            for _ in &p.reduces {
                act += PrimitiveKind::FactorizedReduce.activation_elements(p.source_channels, p.source_channels, s, s);
                s = s.div_ceil(2);
            }
            act += PrimitiveKind::Conv1x1.activation_elements(p.source_channels, cell.channels, s, s);
        }
        for e in &cell.edges {
            for o in &e.ops {
                act += o.kind.activation_elements(cell.channels, cell.channels, side, side);
            }
        }
    }
    if let OpParams::Linear { .. } = model.head {
        let last = model.cells.last().map_or(c0, |c| c.channels);
        act += PrimitiveKind::GlobalAvgPool.activation_elements(last, last, 1, 1);
        act += PrimitiveKind::LinearClassifier.activation_elements(last, cfg.classes, 1, 1);
    }
    MemoryEstimate::from_counts(model.params.stored_count(), act, batch)
}
