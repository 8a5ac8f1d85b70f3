use serde::{Deserialize, Serialize};

use super::cell::{ArchWeights, CellSpec};
use super::ops::OpKind;
use crate::error::{Error, Result};
use crate::prox::{sgl_penalty, GroupIndex};

/// A surviving weighted operation `from → to`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeptEdge {
    pub from: usize,
    pub to: usize,
    pub op: OpKind,
    pub weight: f64,
}

/// The architecture left after pruning. Edges are ordered by target node,
/// then source node, then operation position in the search space.
#[derive(Clone, Debug, PartialEq)]
pub struct DerivedArch {
    pub num_inputs: usize,
    pub kept_edges: Vec<KeptEdge>,
    pub active_nodes: Vec<usize>,
}

impl DerivedArch {
    pub fn num_ops(&self) -> usize {
        self.kept_edges.len()
    }

    pub fn incoming(&self, node: usize) -> impl Iterator<Item = &KeptEdge> {
        self.kept_edges.iter().filter(move |e| e.to == node)
    }

    /// Checks the structural invariants: no zero weight, every edge targets an
    /// active node and starts at an input or an earlier active node, and every
    /// active node has an incoming edge.
    pub fn validate(&self) -> Result<()> {
        if self.active_nodes.is_empty() {
            return Err(Error::DegenerateArchitecture("no active intermediate node".into()));
        }
        for (k, e) in self.kept_edges.iter().enumerate() {
            if e.weight == 0.0 || !e.weight.is_finite() {
                return Err(Error::InvalidArgument(format!("edge {k} has weight {}", e.weight)));
            }
            if !self.active_nodes.contains(&e.to) || e.to < self.num_inputs {
                return Err(Error::InvalidArgument(format!("edge {k} targets inactive node {}", e.to)));
            }
            if e.from >= e.to || (e.from >= self.num_inputs && !self.active_nodes.contains(&e.from)) {
                return Err(Error::InvalidArgument(format!(
                    "edge {k} leaves node {} which is not an input or earlier active node",
                    e.from
                )));
            }
        }
        for w in self.active_nodes.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::InvalidArgument("active nodes must be strictly increasing".into()));
            }
        }
        for &n in &self.active_nodes {
            if self.incoming(n).next().is_none() {
                return Err(Error::InvalidArgument(format!("active node {n} has no incoming edge")));
            }
        }
        Ok(())
    }
}

/// Drops every weight with `|A| <= threshold` (0 tests for exact zeros),
/// then every node left without a kept incoming edge, and transitively every
/// edge leaving a dropped node.
pub fn derive_architecture(cell: &CellSpec, arch: &ArchWeights, threshold: Option<f64>) -> Result<DerivedArch> {
    let threshold = threshold.unwrap_or(0.0);
    if !(threshold >= 0.0) {
        return Err(Error::InvalidArgument(format!("threshold must be >= 0, got {threshold}")));
    }
    if arch.len() != cell.num_arch_weights() {
        return Err(Error::InvalidArgument(format!(
            "cell needs {} architecture weights, got {}",
            cell.num_arch_weights(),
            arch.len()
        )));
    }
    let mut alive = vec![false; cell.num_nodes()];
    alive[..cell.num_inputs].fill(true);
    let mut kept_edges = Vec::new();
    let mut active_nodes = Vec::new();
    for (edge_pos, edge) in cell.edges().into_iter().enumerate() {
        if !alive[edge.from] {
            continue;
        }
        for (op_pos, &op) in cell.op_set.iter().enumerate() {
            let weight = arch.values()[cell.arch_index(edge_pos, op_pos)];
            if weight.abs() > threshold {
                kept_edges.push(KeptEdge {
                    from: edge.from,
                    to: edge.to,
                    op,
                    weight,
                });
                if !alive[edge.to] {
                    alive[edge.to] = true;
                    active_nodes.push(edge.to);
                }
            }
        }
    }
    if active_nodes.is_empty() {
        return Err(Error::DegenerateArchitecture(
            "every intermediate node lost all incoming weights".into(),
        ));
    }
    Ok(DerivedArch {
        num_inputs: cell.num_inputs,
        kept_edges,
        active_nodes,
    })
}

/// Sets every entry with `|v| <= threshold` to exactly zero.
pub fn apply_threshold(values: &mut [f64], threshold: f64) {
    for v in values.iter_mut() {
        if v.abs() <= threshold {
            *v = 0.0;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SparsityMetrics {
    /// Fraction of entries that are exactly zero.
    pub element_sparsity: f64,
    /// Groups with at least one nonzero entry.
    pub active_groups: usize,
    pub penalty_value: f64,
}

pub fn sparsity_metrics(values: &[f64], groups: &GroupIndex, lambda: f64, alpha: f64) -> SparsityMetrics {
    let zeros = values.iter().filter(|v| **v == 0.0).count();
    let active_groups = groups
        .groups()
        .iter()
        .filter(|g| g.iter().any(|&i| values[i] != 0.0))
        .count();
    SparsityMetrics {
        element_sparsity: if values.is_empty() {
            0.0
        } else {
            zeros as f64 / values.len() as f64
        },
        active_groups,
        penalty_value: sgl_penalty(values, groups, lambda, alpha),
    }
}
