use std::fmt::Write;

use super::model::{InputSource, NodeKind, SupernetModel};

/// Graphviz rendering: one cluster per cell, input nodes filled blue, edges
/// labelled with their alive operation kinds.
pub fn export_dot(model: &SupernetModel) -> String {
    let mut out = String::new();
    writeln!(out, "digraph supernet {{").unwrap();
    writeln!(out, "  rankdir=LR;").unwrap();
    writeln!(out, "  node [shape=box, style=rounded];").unwrap();
    for (k, cell) in model.cells().iter().enumerate() {
        writeln!(out, "  subgraph cluster_{} {{", cell.id.0).unwrap();
        writeln!(
            out,
            "    label=\"cell {} ({:?}, {} channels)\";",
            k + 1,
            cell.kind,
            cell.channels
        )
        .unwrap();
        for node in &cell.nodes {
            let (label, style) = match node.kind {
                NodeKind::Input(InputSource::Stem) => {
                    ("input: stem".to_string(), ", style=filled, fillcolor=\"#4a90d9\"")
                }
                NodeKind::Input(InputSource::Cell(c)) => {
                    let pos = model.cells().iter().position(|x| x.id == c).map_or(0, |p| p + 1);
                    (format!("input: cell {pos}"), ", style=filled, fillcolor=\"#4a90d9\"")
                }
                NodeKind::Intermediate => (format!("{}", node.id), ""),
                NodeKind::Output => ("output".to_string(), ", shape=doublecircle"),
            };
            writeln!(out, "    {} [label=\"{label}\"{style}];", node.id).unwrap();
        }
        for edge in &cell.edges {
            let ops: Vec<&str> = edge.ops.iter().map(|o| o.kind.name()).collect();
            writeln!(
                out,
                "    {} -> {} [label=\"{}\"];",
                edge.from,
                edge.to,
                ops.join("\\n")
            )
            .unwrap();
        }
        writeln!(out, "  }}").unwrap();
    }
    writeln!(out, "}}").unwrap();
    out
}
