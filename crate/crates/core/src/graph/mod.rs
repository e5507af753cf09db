//! Cell-structured supernet: construction, evaluation, structure
//! checkpoints and Graphviz export.

mod dot;
mod forward;
mod genotype;
mod ids;
mod model;

pub use dot::export_dot;
pub use forward::align_input_preprocess;
pub use genotype::{CellGenotype, EdgeGenotype, Genotype, NodeGenotype, OpGenotype, GENOTYPE_FORMAT};
pub use ids::{CellId, EdgeId, NodeId};
pub use model::{
    CandidateOp, Cell, CellKind, ChannelPlan, Edge, InputSource, ModelConfig, Node, NodeKind,
    Preprocessor, Stem, SupernetModel,
};
