//! Cell-structured supernets that grow by triangular mutation, shrink by
//! differentiable pruning, and pick mutations with train-free metrics.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod graph;
pub mod kernel;
pub mod metrics;
pub mod mutation;
pub mod pruning;
pub mod search;

pub use error::{Error, Result};
pub use checkpoint::{RunConfig, RunDirectory, WeightsCheckpoint};
pub use data::{Dataset, DatasetSpec, SyntheticSpec};
pub use graph::{Genotype, SupernetModel};
pub use kernel::Tensor;
pub use search::{RandomVariant, Report, RunLog, SearchConfig};
