//! Train-free architecture metrics and mutation selection.

mod lrc;
mod ntk;
mod rank;
mod select;

pub use lrc::{activation_patterns, count_linear_regions, count_regions_with};
pub use ntk::{condition_from_jacobian, logit_jacobian, ntk_condition_number, SINGULAR_RATIO};
pub use rank::{joint_rank, MetricPair};
pub use select::{make_slim_copy, select_mutation_ntklrc, MemoryGate, Selection, SelectionConfig, TrialRecord};
