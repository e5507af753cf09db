use serde::{Deserialize, Serialize};

use super::ids::{CellId, EdgeId, NodeId};
use super::model::{CellKind, ModelConfig, NodeKind, SupernetModel};
use crate::error::{Error, Result};
use crate::kernel::PrimitiveKind;

pub const GENOTYPE_FORMAT: &str = "spidernet-genotype/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpGenotype {
    pub kind: PrimitiveKind,
    pub pruner_weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeGenotype {
    pub id: EdgeId,
    pub from: NodeId,
    pub to: NodeId,
    pub ops: Vec<OpGenotype>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeGenotype {
    pub id: NodeId,
    pub kind: NodeKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellGenotype {
    pub id: CellId,
    pub kind: CellKind,
    pub channels: usize,
    pub scale: usize,
    pub nodes: Vec<NodeGenotype>,
    pub edges: Vec<EdgeGenotype>,
}

/// Structure-only checkpoint: cells, nodes, edges, alive op kinds and pruner
/// weights. Operation parameters are not part of it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Genotype {
    pub format: String,
    pub seed: Option<u64>,
    pub config: ModelConfig,
    pub next_id: u64,
    pub cells: Vec<CellGenotype>,
}

impl Genotype {
    pub(crate) fn new(
        config: ModelConfig,
        cells: Vec<CellGenotype>,
        next_id: u64,
        seed: Option<u64>,
    ) -> Self {
        Genotype {
            format: GENOTYPE_FORMAT.to_string(),
            seed,
            config,
            next_id,
            cells,
        }
    }

    pub(crate) fn of_model(model: &SupernetModel, seed: Option<u64>) -> Self {
        let cells = model
            .cells()
            .iter()
            .map(|c| {
                let mut nodes: Vec<NodeGenotype> = c
                    .nodes
                    .iter()
                    .map(|n| NodeGenotype { id: n.id, kind: n.kind })
                    .collect();
                nodes.sort_by_key(|n| n.id);
                let mut edges: Vec<EdgeGenotype> = c
                    .edges
                    .iter()
                    .map(|e| EdgeGenotype {
                        id: e.id,
                        from: e.from,
                        to: e.to,
                        ops: e
                            .ops
                            .iter()
                            .map(|o| OpGenotype {
                                kind: o.kind,
                                pruner_weight: model.params().scalar(o.pruner.weight),
                            })
                            .collect(),
                    })
                    .collect();
                edges.sort_by_key(|e| e.id);
                CellGenotype {
                    id: c.id,
                    kind: c.kind,
                    channels: c.channels,
                    scale: c.scale,
                    nodes,
                    edges,
                }
            })
            .collect();
        Genotype::new(model.config().clone(), cells, model.next_id(), seed)
    }

    pub fn check_format(&self) -> Result<()> {
        if self.format != GENOTYPE_FORMAT {
            return Err(Error::Format(format!(
                "unsupported genotype format {:?}, expected {GENOTYPE_FORMAT:?}",
                self.format
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("format").and_then(|f| f.as_str()) {
            Some(GENOTYPE_FORMAT) => {}
            other => {
                return Err(Error::Format(format!(
                    "unsupported genotype format {other:?}, expected {GENOTYPE_FORMAT:?}"
                )))
            }
        }
        Ok(serde_json::from_value(value)?)
    }

    pub fn node_count(&self) -> usize {
        self.cells.iter().map(|c| c.nodes.len()).sum()
    }

    pub fn edge_count(&self) -> usize {
        self.cells.iter().map(|c| c.edges.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::ChannelPlan;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> SupernetModel {
        let config = ModelConfig {
            reductions: 2,
            init_channels: 2,
            in_channels: 3,
            image_size: 8,
            classes: 2,
            dropout: 0.2,
            pruner_m: 1e9,
        };
        SupernetModel::minimum_viable(config, &mut ChaCha8Rng::seed_from_u64(9)).unwrap()
    }

    #[test]
    fn roundtrip_is_isomorphic_and_byte_stable() {
        let m = model();
        let g = m.genotype(Some(9));
        let text = g.to_json().unwrap();
        let back = Genotype::from_json(&text).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.to_json().unwrap(), text);
        let rebuilt =
            SupernetModel::instantiate(&back, ChannelPlan::Recorded, &mut ChaCha8Rng::seed_from_u64(1))
                .unwrap();
        assert_eq!(rebuilt.edge_count(), 9);
        assert_eq!(rebuilt.genotype(Some(9)), g);
    }

    #[test]
    fn wrong_version_is_format_error() {
        let text = model().genotype(None).to_json().unwrap();
        let bad = text.replace(GENOTYPE_FORMAT, "spidernet-genotype/99");
        assert!(matches!(Genotype::from_json(&bad), Err(Error::Format(_))));
    }
}
