//! Architecture documents, Graphviz output and weight heatmaps.
//!
//! Derived architectures and full supernet weights share one JSON schema:
//!
//! ```json
//! {"inputs": 2, "nodes": [{"id": 2, "edges": [{"from": 0, "op": "linear", "weight": 0.4}]}]}
//! ```

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::cell::{ArchWeights, CellSpec};
use super::derive::{DerivedArch, KeptEdge};
use super::ops::OpKind;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchDocument {
    pub inputs: usize,
    pub nodes: Vec<NodeDocument>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeDocument {
    pub id: usize,
    pub edges: Vec<EdgeDocument>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeDocument {
    pub from: usize,
    pub op: String,
    pub weight: f64,
}

impl From<&DerivedArch> for ArchDocument {
    fn from(arch: &DerivedArch) -> Self {
        ArchDocument {
            inputs: arch.num_inputs,
            nodes: arch
                .active_nodes
                .iter()
                .map(|&id| NodeDocument {
                    id,
                    edges: arch
                        .incoming(id)
                        .map(|e| EdgeDocument {
                            from: e.from,
                            op: e.op.name().to_string(),
                            weight: e.weight,
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

impl TryFrom<ArchDocument> for DerivedArch {
    type Error = Error;

    fn try_from(doc: ArchDocument) -> Result<Self> {
        let mut kept_edges = Vec::new();
        let mut active_nodes = Vec::new();
        for node in doc.nodes {
            active_nodes.push(node.id);
            for e in node.edges {
                kept_edges.push(KeptEdge {
                    from: e.from,
                    to: node.id,
                    op: e.op.parse()?,
                    weight: e.weight,
                });
            }
        }
        let arch = DerivedArch {
            num_inputs: doc.inputs,
            kept_edges,
            active_nodes,
        };
        arch.validate()?;
        Ok(arch)
    }
}

pub fn export_arch_json(arch: &DerivedArch) -> String {
    serde_json::to_string_pretty(&ArchDocument::from(arch)).expect("document serializes")
}

pub fn parse_arch_json(text: &str) -> Result<DerivedArch> {
    let doc: ArchDocument = serde_json::from_str(text)?;
    DerivedArch::try_from(doc)
}

/// Every (edge, operation) weight of the supernet, zeros included.
pub fn supernet_document(cell: &CellSpec, arch: &ArchWeights) -> ArchDocument {
    let edges = cell.edges();
    let nodes = cell
        .intermediate_nodes()
        .map(|id| NodeDocument {
            id,
            edges: edges
                .iter()
                .enumerate()
                .filter(|(_, e)| e.to == id)
                .flat_map(|(pos, e)| {
                    cell.op_set.iter().enumerate().map(move |(o, op)| EdgeDocument {
                        from: e.from,
                        op: op.name().to_string(),
                        weight: arch.values()[cell.arch_index(pos, o)],
                    })
                })
                .collect(),
        })
        .collect();
    ArchDocument {
        inputs: cell.num_inputs,
        nodes,
    }
}

pub fn export_supernet_json(cell: &CellSpec, arch: &ArchWeights) -> String {
    serde_json::to_string_pretty(&supernet_document(cell, arch)).expect("document serializes")
}

/// Rebuilds the cell topology and weights from a full supernet document.
/// The operation order is taken from the first edge of the first node.
pub fn parse_supernet_json(text: &str, feature_dim: usize) -> Result<(CellSpec, ArchWeights)> {
    let doc: ArchDocument = serde_json::from_str(text)?;
    let first = doc
        .nodes
        .first()
        .ok_or_else(|| Error::InvalidArgument("supernet document has no nodes".into()))?;
    let mut op_set: Vec<OpKind> = Vec::new();
    for e in first.edges.iter().take_while(|e| e.from == 0) {
        op_set.push(e.op.parse()?);
    }
    let cell = CellSpec {
        num_inputs: doc.inputs,
        num_intermediate: doc.nodes.len(),
        op_set,
        feature_dim,
        ..CellSpec::default()
    };
    cell.validate()?;
    let expected = supernet_document(&cell, &ArchWeights::from_values(&cell, vec![0.0; cell.num_arch_weights()])?);
    let mut values = Vec::with_capacity(cell.num_arch_weights());
    for (got, want) in doc.nodes.iter().zip(&expected.nodes) {
        if got.id != want.id || got.edges.len() != want.edges.len() {
            return Err(Error::InvalidArgument(format!(
                "node {} does not match a fully connected supernet (expected node {} with {} edges)",
                got.id,
                want.id,
                want.edges.len()
            )));
        }
        for (g, w) in got.edges.iter().zip(&want.edges) {
            if g.from != w.from || g.op != w.op {
                return Err(Error::InvalidArgument(format!(
                    "node {}: expected edge from {} with op {}, found from {} with op {}",
                    got.id, w.from, w.op, g.from, g.op
                )));
            }
            values.push(g.weight);
        }
    }
    let arch = ArchWeights::from_values(&cell, values)?;
    Ok((cell, arch))
}

/// Graphviz digraph with one edge statement per kept operation.
pub fn export_dot(arch: &DerivedArch) -> String {
    let mut out = String::from("digraph cell {\n  rankdir=LR;\n");
    for i in 0..arch.num_inputs {
        let _ = writeln!(out, "  \"{i}\" [shape=box, label=\"in {i}\"];");
    }
    for n in &arch.active_nodes {
        let _ = writeln!(out, "  \"{n}\" [shape=ellipse];");
    }
    for e in &arch.kept_edges {
        let _ = writeln!(
            out,
            "  \"{}\" -> \"{}\" [label=\"{} {:.4}\"];",
            e.from, e.to, e.op, e.weight
        );
    }
    out.push_str("}\n");
    out
}

/// `|A|` with one row per edge (in node order) and one column per operation.
pub fn export_heatmap_csv(arch: &ArchWeights, cell: &CellSpec) -> String {
    let mut out = String::from("edge");
    for op in &cell.op_set {
        out.push(',');
        out.push_str(op.name());
    }
    out.push('\n');
    for (pos, e) in cell.edges().iter().enumerate() {
        let _ = write!(out, "{}->{}", e.from, e.to);
        for o in 0..cell.op_set.len() {
            let _ = write!(out, ",{}", arch.values()[cell.arch_index(pos, o)].abs());
        }
        out.push('\n');
    }
    out
}

pub fn write_text(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}
