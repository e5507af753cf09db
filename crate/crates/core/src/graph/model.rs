use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::genotype::{CellGenotype, EdgeGenotype, Genotype, NodeGenotype, OpGenotype};
use super::ids::{CellId, EdgeId, NodeId};
use crate::error::{Error, Result};
use crate::kernel::{
    alloc_primitive, BnParams, Init, OpParams, ParamId, ParamRole, ParamStore, PrimitiveKind,
    Shape4,
};
use crate::pruning::{PrunerState, PRUNER_INIT};

/// Fixed, user-chosen shape of the search space plus head settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub reductions: usize,
    pub init_channels: usize,
    pub in_channels: usize,
    /// Side length of the square input images.
    pub image_size: usize,
    pub classes: usize,
    pub dropout: f64,
    /// Saw resolution of the differentiable pruners.
    pub pruner_m: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.reductions < 1 {
            return fail("at least one reduction cell is required");
        }
        if self.init_channels < 1 || self.in_channels < 1 {
            return fail("channel counts must be positive");
        }
        if self.classes < 2 {
            return fail("at least two classes are required");
        }
        if self.image_size < 1 {
            return fail("image size must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)");
        }
        if !(self.pruner_m > 0.0) {
            return fail("pruner resolution must be positive");
        }
        Ok(())
    }

    /// Spatial side length at a downsample exponent.
    pub fn side_at(&self, scale: usize) -> usize {
        let mut s = self.image_size;
        for _ in 0..scale {
            s = s.div_ceil(2);
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Normal,
    Reduction,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSource {
    /// The stem output (the model input as seen by the cells).
    Stem,
    Cell(CellId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Input(InputSource),
    Intermediate,
    Output,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub kind: NodeKind,
}

impl Node {
    pub fn is_input(&self) -> bool {
        matches!(self.kind, NodeKind::Input(_))
    }
}

/// One operation on an edge with its pruner.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CandidateOp {
    pub kind: PrimitiveKind,
    pub params: OpParams,
    pub pruner: PrunerState,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Edge {
    pub id: EdgeId,
    pub from: NodeId,
    pub to: NodeId,
    pub ops: Vec<CandidateOp>,
    /// When set the edge output is multiplied by zero.
    #[serde(default)]
    pub disconnected: bool,
}

/// Brings one input source to the cell's channel count and resolution.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Preprocessor {
    pub input: NodeId,
    pub source_channels: usize,
    pub source_scale: usize,
    pub reduces: Vec<OpParams>,
    pub projection: OpParams,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Cell {
    pub id: CellId,
    pub kind: CellKind,
    /// Ordered by id.
    pub nodes: Vec<Node>,
    /// Ordered by id.
    pub edges: Vec<Edge>,
    pub preprocessors: Vec<Preprocessor>,
    pub channels: usize,
    /// Downsample exponent relative to the input image.
    pub scale: usize,
}

impl Cell {
    pub fn output(&self) -> NodeId {
        self.nodes
            .iter()
            .find(|n| n.kind == NodeKind::Output)
            .map(|n| n.id)
            .expect("cell has an output node")
    }

    pub fn inputs(&self) -> impl Iterator<Item = &Node> {
        self.nodes.iter().filter(|n| n.is_input())
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn edge(&self, id: EdgeId) -> Option<&Edge> {
        self.edges.iter().find(|e| e.id == id)
    }

    pub fn op_count(&self) -> usize {
        self.edges.iter().map(|e| e.ops.len()).sum()
    }

    fn successors(&self) -> BTreeMap<NodeId, Vec<NodeId>> {
        let mut succ: BTreeMap<NodeId, Vec<NodeId>> =
            self.nodes.iter().map(|n| (n.id, Vec::new())).collect();
        for e in &self.edges {
            succ.entry(e.from).or_default().push(e.to);
        }
        succ
    }

    fn predecessors(&self) -> BTreeMap<NodeId, Vec<NodeId>> {
        let mut pred: BTreeMap<NodeId, Vec<NodeId>> =
            self.nodes.iter().map(|n| (n.id, Vec::new())).collect();
        for e in &self.edges {
            pred.entry(e.to).or_default().push(e.from);
        }
        pred
    }

    /// Kahn order with ties broken by node id; `None` if the edges contain a cycle.
    pub fn topological_order(&self) -> Option<Vec<NodeId>> {
        let mut indeg: BTreeMap<NodeId, usize> = self.nodes.iter().map(|n| (n.id, 0)).collect();
        for e in &self.edges {
            *indeg.get_mut(&e.to)? += 1;
        }
        let succ = self.successors();
        let mut ready: BTreeSet<NodeId> =
            indeg.iter().filter(|(_, &d)| d == 0).map(|(&n, _)| n).collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(n) = ready.pop_first() {
            order.push(n);
            for m in &succ[&n] {
                let d = indeg.get_mut(m).expect("edge endpoint is a node");
                *d -= 1;
                if *d == 0 {
                    ready.insert(*m);
                }
            }
        }
        (order.len() == self.nodes.len()).then_some(order)
    }

    pub fn is_acyclic(&self) -> bool {
        self.topological_order().is_some()
    }

    fn reach(start: impl IntoIterator<Item = NodeId>, adj: &BTreeMap<NodeId, Vec<NodeId>>) -> BTreeSet<NodeId> {
        let mut seen: BTreeSet<NodeId> = BTreeSet::new();
        let mut queue: VecDeque<NodeId> = start.into_iter().collect();
        while let Some(n) = queue.pop_front() {
            if !seen.insert(n) {
                continue;
            }
            if let Some(next) = adj.get(&n) {
                queue.extend(next.iter().copied());
            }
        }
        seen
    }

    /// Nodes reachable from any input node.
    pub fn forward_reachable(&self) -> BTreeSet<NodeId> {
        Self::reach(self.inputs().map(|n| n.id), &self.successors())
    }

    /// Nodes from which the output node is reachable.
    pub fn backward_reachable(&self) -> BTreeSet<NodeId> {
        Self::reach([self.output()], &self.predecessors())
    }

    pub fn output_connected(&self) -> bool {
        self.forward_reachable().contains(&self.output())
    }

    /// All ordered pairs `(u, v)` with a non-empty path from `u` to `v`.
    pub fn connectivity(&self) -> BTreeSet<(NodeId, NodeId)> {
        let succ = self.successors();
        let mut pairs = BTreeSet::new();
        for n in &self.nodes {
            let starts = succ[&n.id].clone();
            for m in Self::reach(starts, &succ) {
                pairs.insert((n.id, m));
            }
        }
        pairs
    }

    pub fn inbound(&self, node: NodeId) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(move |e| e.to == node)
    }

    pub fn has_outbound(&self, node: NodeId) -> bool {
        self.edges.iter().any(|e| e.from == node)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Stem {
    pub conv: ParamId,
    pub bn: BnParams,
    pub channels: usize,
}

/// The evolving supernet: stem, one normal cell, `r` reduction cells, head.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SupernetModel {
    pub(crate) config: ModelConfig,
    pub(crate) slim: bool,
    pub(crate) stem: Stem,
    pub(crate) cells: Vec<Cell>,
    pub(crate) head: OpParams,
    pub(crate) params: ParamStore,
    pub(crate) next_id: u64,
    pub(crate) history_window: usize,
}

/// Channel layout used when instantiating a structure.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChannelPlan {
    /// Channels as recorded in the structure.
    Recorded,
    /// Every operation clamped to one channel.
    Slim,
}

/// Default pruner history window before the loader size is known.
const DEFAULT_WINDOW: usize = 4;

impl SupernetModel {
    /// The initial state: per cell one intermediate node fed by every input
    /// node and feeding the output node, every edge carrying the full op set.
    pub fn minimum_viable<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut next_id = 0u64;
        let mut fresh = || {
            next_id += 1;
            next_id - 1
        };
        let mut cells: Vec<CellGenotype> = Vec::new();
        for k in 0..=config.reductions {
            let cell_id = CellId(fresh());
            let mut nodes = vec![NodeGenotype {
                id: NodeId(fresh()),
                kind: NodeKind::Input(InputSource::Stem),
            }];
            for prev in &cells {
                nodes.push(NodeGenotype {
                    id: NodeId(fresh()),
                    kind: NodeKind::Input(InputSource::Cell(prev.id)),
                });
            }
            let mid = NodeId(fresh());
            let out = NodeId(fresh());
            nodes.push(NodeGenotype {
                id: mid,
                kind: NodeKind::Intermediate,
            });
            nodes.push(NodeGenotype {
                id: out,
                kind: NodeKind::Output,
            });
            let mut edges = Vec::new();
            let wiring: Vec<(NodeId, NodeId)> = nodes
                .iter()
                .filter(|n| matches!(n.kind, NodeKind::Input(_)))
                .map(|n| (n.id, mid))
                .chain([(mid, out)])
                .collect();
            for (from, to) in wiring {
                edges.push(EdgeGenotype {
                    id: EdgeId(fresh()),
                    from,
                    to,
                    ops: PrimitiveKind::SEARCHABLE
                        .iter()
                        .map(|&kind| OpGenotype {
                            kind,
                            pruner_weight: PRUNER_INIT.sample(rng),
                        })
                        .collect(),
                });
            }
            cells.push(CellGenotype {
                id: cell_id,
                kind: if k == 0 {
                    CellKind::Normal
                } else {
                    CellKind::Reduction
                },
                channels: config.init_channels << k,
                scale: k,
                nodes,
                edges,
            });
        }
        let genotype = Genotype::new(config, cells, next_id, None);
        Self::instantiate(&genotype, ChannelPlan::Recorded, rng)
    }

    /// Build a model with freshly initialized parameters from a structure.
    pub fn instantiate<R: Rng + ?Sized>(
        genotype: &Genotype,
        plan: ChannelPlan,
        rng: &mut R,
    ) -> Result<Self> {
        genotype.check_format()?;
        let config = genotype.config.clone();
        config.validate()?;
        let slim = plan == ChannelPlan::Slim;
        let mut params = ParamStore::new();
        let stem_channels = if slim { 1 } else { config.init_channels };
        let stem = Stem {
            conv: params.alloc(
                "stem.conv",
                ParamRole::Weight,
                Shape4::new(stem_channels, config.in_channels, 3, 3),
                Init::fan_in(config.in_channels * 9),
                rng,
            ),
            bn: BnParams::alloc(&mut params, "stem.bn", stem_channels, rng),
            channels: stem_channels,
        };
        let mut model = SupernetModel {
            config,
            slim,
            stem,
            cells: Vec::new(),
            head: OpParams::None,
            params,
            next_id: genotype.next_id,
            history_window: DEFAULT_WINDOW,
        };
        for cg in &genotype.cells {
            let channels = if slim { 1 } else { cg.channels };
            let mut cell = Cell {
                id: cg.id,
                kind: cg.kind,
                nodes: cg
                    .nodes
                    .iter()
                    .map(|n| Node {
                        id: n.id,
                        kind: n.kind,
                    })
                    .collect(),
                edges: Vec::new(),
                preprocessors: Vec::new(),
                channels,
                scale: cg.scale,
            };
            cell.nodes.sort_by_key(|n| n.id);
            for eg in &cg.edges {
                let ops = eg
                    .ops
                    .iter()
                    .map(|og| {
                        let op = model.alloc_op(og.kind, channels, eg.id, rng);
                        model.params.set_scalar(op.pruner.weight, og.pruner_weight);
                        op
                    })
                    .collect();
                cell.edges.push(Edge {
                    id: eg.id,
                    from: eg.from,
                    to: eg.to,
                    ops,
                    disconnected: false,
                });
            }
            cell.edges.sort_by_key(|e| e.id);
            let used: Vec<(NodeId, InputSource)> = cell
                .nodes
                .iter()
                .filter_map(|n| match n.kind {
                    NodeKind::Input(src) if cell.has_outbound(n.id) => Some((n.id, src)),
                    _ => None,
                })
                .collect();
            for (node, src) in used {
                let pre = model.alloc_preprocessor(&cell, node, src, rng)?;
                cell.preprocessors.push(pre);
            }
            model.cells.push(cell);
        }
        let last = model
            .cells
            .last()
            .ok_or_else(|| Error::structural("model has no cells"))?
            .channels;
        model.head = alloc_primitive(
            PrimitiveKind::LinearClassifier,
            last,
            model.config.classes,
            &mut model.params,
            "head",
            rng,
        );
        model.validate()?;
        Ok(model)
    }

    pub(crate) fn alloc_op<R: Rng + ?Sized>(
        &mut self,
        kind: PrimitiveKind,
        channels: usize,
        edge: EdgeId,
        rng: &mut R,
    ) -> CandidateOp {
        let name = format!("{edge}.{kind}");
        let params = alloc_primitive(kind, channels, channels, &mut self.params, &name, rng);
        let weight = self.params.alloc(
            format!("{name}.pruner"),
            ParamRole::Pruner,
            Shape4::new(1, 1, 1, 1),
            PRUNER_INIT,
            rng,
        );
        CandidateOp {
            kind,
            params,
            pruner: PrunerState::new(weight, self.config.pruner_m, self.history_window),
        }
    }

    fn source_shape(&self, src: InputSource) -> Result<(usize, usize)> {
        match src {
            InputSource::Stem => Ok((self.stem.channels, 0)),
            InputSource::Cell(id) => self
                .cells
                .iter()
                .find(|c| c.id == id)
                .map(|c| (c.channels, c.scale))
                .ok_or_else(|| Error::Structural(format!("input source {id} precedes no cell"))),
        }
    }

    fn alloc_preprocessor<R: Rng + ?Sized>(
        &mut self,
        cell: &Cell,
        node: NodeId,
        src: InputSource,
        rng: &mut R,
    ) -> Result<Preprocessor> {
        let (c_src, s_src) = self.source_shape(src)?;
        if s_src > cell.scale {
            return Err(Error::Structural(format!(
                "source at scale {s_src} is smaller than {} at scale {}",
                cell.id, cell.scale
            )));
        }
        let reduces = (s_src..cell.scale)
            .map(|i| {
                alloc_primitive(
                    PrimitiveKind::FactorizedReduce,
                    c_src,
                    c_src,
                    &mut self.params,
                    &format!("{}.{node}.reduce{i}", cell.id),
                    rng,
                )
            })
            .collect();
        let projection = alloc_primitive(
            PrimitiveKind::Conv1x1,
            c_src,
            cell.channels,
            &mut self.params,
            &format!("{}.{node}.proj", cell.id),
            rng,
        );
        Ok(Preprocessor {
            input: node,
            source_channels: c_src,
            source_scale: s_src,
            reduces,
            projection,
        })
    }

    pub(crate) fn fresh_id(&mut self) -> u64 {
        self.next_id += 1;
        self.next_id - 1
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn is_slim(&self) -> bool {
        self.slim
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn stem(&self) -> &Stem {
        &self.stem
    }

    pub fn head(&self) -> &OpParams {
        &self.head
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    pub fn history_window(&self) -> usize {
        self.history_window
    }

    pub fn node_count(&self) -> usize {
        self.cells.iter().map(|c| c.nodes.len()).sum()
    }

    pub fn edge_count(&self) -> usize {
        self.cells.iter().map(|c| c.edges.len()).sum()
    }

    pub fn op_count(&self) -> usize {
        self.cells.iter().map(Cell::op_count).sum()
    }

    /// Trainable scalars, pruner weights included.
    pub fn parameter_count(&self) -> usize {
        self.params.trainable_count()
    }

    /// Edge ids across all cells in cell order, then id order.
    pub fn edge_ids(&self) -> Vec<EdgeId> {
        self.cells
            .iter()
            .flat_map(|c| c.edges.iter().map(|e| e.id))
            .collect()
    }

    /// `(cell index, edge index)` of an edge.
    pub fn locate_edge(&self, id: EdgeId) -> Option<(usize, usize)> {
        self.cells.iter().enumerate().find_map(|(ci, c)| {
            c.edges.iter().position(|e| e.id == id).map(|ei| (ci, ei))
        })
    }

    pub fn edge(&self, id: EdgeId) -> Option<&Edge> {
        self.locate_edge(id).map(|(c, e)| &self.cells[c].edges[e])
    }

    pub(crate) fn edge_mut(&mut self, id: EdgeId) -> Option<&mut Edge> {
        self.locate_edge(id)
            .map(move |(c, e)| &mut self.cells[c].edges[e])
    }

    /// Output of the edge is multiplied by zero while set.
    pub fn set_disconnected(&mut self, id: EdgeId, disconnected: bool) -> Result<()> {
        let edge = self
            .edge_mut(id)
            .ok_or_else(|| Error::Structural(format!("no edge {id}")))?;
        edge.disconnected = disconnected;
        Ok(())
    }

    /// Resize every pruner history to `window` batches (clears histories on change).
    pub fn set_history_window(&mut self, window: usize) {
        if window == self.history_window {
            return;
        }
        self.history_window = window;
        for cell in &mut self.cells {
            for edge in &mut cell.edges {
                for op in &mut edge.ops {
                    op.pruner.off_history.resize(window);
                }
            }
        }
    }

    pub fn ops_mut(&mut self) -> impl Iterator<Item = &mut CandidateOp> {
        self.cells
            .iter_mut()
            .flat_map(|c| c.edges.iter_mut().flat_map(|e| e.ops.iter_mut()))
    }

    pub fn ops(&self) -> impl Iterator<Item = (&Edge, &CandidateOp)> {
        self.cells
            .iter()
            .flat_map(|c| c.edges.iter().flat_map(|e| e.ops.iter().map(move |o| (e, o))))
    }

    /// Check every structural invariant of the supernet.
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Structural(m));
        if self.cells.len() != self.config.reductions + 1 {
            return err(format!(
                "{} cells for {} reductions",
                self.cells.len(),
                self.config.reductions
            ));
        }
        let mut seen_ids = BTreeSet::new();
        for (k, cell) in self.cells.iter().enumerate() {
            let want_kind = if k == 0 {
                CellKind::Normal
            } else {
                CellKind::Reduction
            };
            if cell.kind != want_kind || cell.scale != k {
                return err(format!("{} out of macro-structure order", cell.id));
            }
            let want_channels = if self.slim {
                1
            } else {
                self.config.init_channels << k
            };
            if cell.channels != want_channels {
                return err(format!("{} has {} channels", cell.id, cell.channels));
            }
            if !seen_ids.insert(cell.id.0) {
                return err(format!("id {} reused", cell.id));
            }
            let inputs: Vec<_> = cell.inputs().collect();
            if inputs.len() != k + 1 {
                return err(format!("{} has {} input nodes", cell.id, inputs.len()));
            }
            let mut sources: Vec<InputSource> = inputs
                .iter()
                .map(|n| match n.kind {
                    NodeKind::Input(s) => s,
                    _ => unreachable!(),
                })
                .collect();
            sources.sort();
            let mut want: Vec<InputSource> = std::iter::once(InputSource::Stem)
                .chain(self.cells[..k].iter().map(|c| InputSource::Cell(c.id)))
                .collect();
            want.sort();
            if sources != want {
                return err(format!("{} inputs do not match preceding cells", cell.id));
            }
            let outputs = cell.nodes.iter().filter(|n| n.kind == NodeKind::Output).count();
            if outputs != 1 {
                return err(format!("{} has {outputs} output nodes", cell.id));
            }
            let node_ids: BTreeSet<NodeId> = cell.nodes.iter().map(|n| n.id).collect();
            for n in &cell.nodes {
                if !seen_ids.insert(n.id.0) {
                    return err(format!("id {} reused", n.id));
                }
            }
            let mut pairs = BTreeSet::new();
            for e in &cell.edges {
                if !seen_ids.insert(e.id.0) {
                    return err(format!("id {} reused", e.id));
                }
                if e.from == e.to {
                    return err(format!("{} is a self loop", e.id));
                }
                if !node_ids.contains(&e.from) || !node_ids.contains(&e.to) {
                    return err(format!("{} leaves {}", e.id, cell.id));
                }
                if cell.node(e.to).is_some_and(Node::is_input) {
                    return err(format!("{} enters an input node", e.id));
                }
                if cell.node(e.from).is_some_and(|n| n.kind == NodeKind::Output) {
                    return err(format!("{} leaves the output node", e.id));
                }
                if e.ops.is_empty() {
                    return err(format!("{} has no operations", e.id));
                }
                if !pairs.insert((e.from, e.to)) {
                    return err(format!("{} duplicates ({}, {})", e.id, e.from, e.to));
                }
            }
            if !cell.is_acyclic() {
                return err(format!("{} contains a cycle", cell.id));
            }
            if !cell.output_connected() {
                return err(format!("{} output unreachable from its inputs", cell.id));
            }
            for n in cell.inputs() {
                let has_pre = cell.preprocessors.iter().any(|p| p.input == n.id);
                if cell.has_outbound(n.id) && !has_pre {
                    return err(format!("{} is used without a preprocessor", n.id));
                }
            }
        }
        if seen_ids.last().is_some_and(|&m| m >= self.next_id) {
            return err("id counter behind allocated ids".into());
        }
        Ok(())
    }

    /// Every intermediate node lies on some input-to-output path.
    pub fn all_nodes_on_paths(&self) -> bool {
        self.cells.iter().all(|c| {
            let fwd = c.forward_reachable();
            let bwd = c.backward_reachable();
            c.nodes
                .iter()
                .filter(|n| n.kind == NodeKind::Intermediate)
                .all(|n| fwd.contains(&n.id) && bwd.contains(&n.id))
        })
    }

    /// Remove intermediate nodes off every input-to-output path (with their
    /// edges) and preprocessors of inputs left without outbound edges.
    /// Returns the number of operations removed.
    pub(crate) fn remove_stranded(&mut self, cell_idx: usize) -> usize {
        let cell = &self.cells[cell_idx];
        let fwd = cell.forward_reachable();
        let bwd = cell.backward_reachable();
        let stranded: BTreeSet<NodeId> = cell
            .nodes
            .iter()
            .filter(|n| n.kind == NodeKind::Intermediate)
            .filter(|n| !(fwd.contains(&n.id) && bwd.contains(&n.id)))
            .map(|n| n.id)
            .collect();
        let mut removed_ops = 0;
        let cell = &mut self.cells[cell_idx];
        let mut kept = Vec::with_capacity(cell.edges.len());
        for e in cell.edges.drain(..) {
            if stranded.contains(&e.from) || stranded.contains(&e.to) {
                removed_ops += e.ops.len();
                for op in &e.ops {
                    op.params.free(&mut self.params);
                    self.params.free(op.pruner.weight);
                }
            } else {
                kept.push(e);
            }
        }
        cell.edges = kept;
        cell.nodes.retain(|n| !stranded.contains(&n.id));
        let unused: Vec<NodeId> = cell
            .preprocessors
            .iter()
            .map(|p| p.input)
            .filter(|&n| !cell.edges.iter().any(|e| e.from == n))
            .collect();
        cell.preprocessors.retain(|p| {
            if unused.contains(&p.input) {
                for r in &p.reduces {
                    r.free(&mut self.params);
                }
                p.projection.free(&mut self.params);
                false
            } else {
                true
            }
        });
        removed_ops
    }

    /// Full structural description of the model.
    pub fn genotype(&self, seed: Option<u64>) -> Genotype {
        Genotype::of_model(self, seed)
    }
}
