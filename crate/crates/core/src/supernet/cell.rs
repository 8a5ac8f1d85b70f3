use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ops::{toy_op_set, OpKind};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::prox::GroupIndex;

/// How intermediate nodes are combined into the cell output.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellOutput {
    #[default]
    Concat,
    Sum,
}

/// A fully connected DAG cell. Node ids `0..num_inputs` are inputs; the
/// intermediate nodes follow, and each one receives an edge from every
/// node with a smaller id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CellSpec {
    pub num_inputs: usize,
    pub num_intermediate: usize,
    pub op_set: Vec<OpKind>,
    pub feature_dim: usize,
    pub output: CellOutput,
}

impl Default for CellSpec {
    fn default() -> Self {
        CellSpec {
            num_inputs: 2,
            num_intermediate: 4,
            op_set: toy_op_set(),
            feature_dim: 16,
            output: CellOutput::Concat,
        }
    }
}

/// One directed edge of the cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
}

impl CellSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_inputs == 0 || self.num_intermediate == 0 {
            return Err(Error::InvalidArgument(
                "a cell needs at least one input and one intermediate node".into(),
            ));
        }
        if self.op_set.is_empty() {
            return Err(Error::InvalidArgument("the operation set is empty".into()));
        }
        for (i, op) in self.op_set.iter().enumerate() {
            if self.op_set[..i].contains(op) {
                return Err(Error::InvalidArgument(format!("operation {op} is listed twice")));
            }
        }
        if self.feature_dim == 0 {
            return Err(Error::InvalidArgument("feature_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn num_nodes(&self) -> usize {
        self.num_inputs + self.num_intermediate
    }

    pub fn intermediate_nodes(&self) -> std::ops::Range<usize> {
        self.num_inputs..self.num_nodes()
    }

    /// Edges in node order: all edges into the first intermediate node, then
    /// the second, and so on.
    pub fn edges(&self) -> Vec<Edge> {
        self.intermediate_nodes()
            .flat_map(|to| (0..to).map(move |from| Edge { from, to }))
            .collect()
    }

    pub fn num_arch_weights(&self) -> usize {
        self.edges().len() * self.op_set.len()
    }

    /// Flat index of the weight for operation `op_pos` on edge `edge_pos`.
    pub fn arch_index(&self, edge_pos: usize, op_pos: usize) -> usize {
        edge_pos * self.op_set.len() + op_pos
    }

    /// One group per intermediate node covering all its incoming weights.
    pub fn group_index(&self) -> GroupIndex {
        let sizes: Vec<usize> = self.intermediate_nodes().map(|j| j * self.op_set.len()).collect();
        GroupIndex::contiguous(&sizes).expect("node groups are contiguous and non-empty")
    }

    pub fn output_dim(&self) -> usize {
        match self.output {
            CellOutput::Concat => self.num_intermediate * self.feature_dim,
            CellOutput::Sum => self.feature_dim,
        }
    }
}

/// Architecture weights: one scalar per (edge, operation) plus the per-node
/// grouping.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchWeights {
    values: Vec<f64>,
    groups: GroupIndex,
}

impl ArchWeights {
    pub fn from_values(cell: &CellSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != cell.num_arch_weights() {
            return Err(Error::InvalidArgument(format!(
                "cell needs {} architecture weights, got {}",
                cell.num_arch_weights(),
                values.len()
            )));
        }
        Ok(ArchWeights {
            values,
            groups: cell.group_index(),
        })
    }

    /// `1 / (predecessors × |ops|)` per weight plus N(0, 0.01²) jitter.
    pub fn init<R: Rng>(cell: &CellSpec, rng: &mut R) -> Self {
        let jitter = Normal::new(0.0, 0.01).expect("valid normal");
        let mut values = Vec::with_capacity(cell.num_arch_weights());
        for j in cell.intermediate_nodes() {
            let base = 1.0 / (j * cell.op_set.len()) as f64;
            for _ in 0..j * cell.op_set.len() {
                values.push(base + jitter.sample(rng));
            }
        }
        ArchWeights {
            values,
            groups: cell.group_index(),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn groups(&self) -> &GroupIndex {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Mixed-edge forward pass of one cell.
///
/// Each intermediate node is `x_j = Σ_{i<j} Σ_o A[i→j, o] · o(x_i)`. `arch`
/// holds the flat weight vector and `op_params[k]` the parameter leaves of the
/// operation at flat index `k`. Returns the concatenation (or sum) of all
/// intermediate nodes.
pub fn cell_forward(
    tape: &mut Tape,
    cell: &CellSpec,
    inputs: &[Var],
    arch: Var,
    op_params: &[Vec<Var>],
) -> Result<Var> {
    if inputs.len() != cell.num_inputs {
        return Err(Error::InvalidArgument(format!(
            "cell expects {} inputs, got {}",
            cell.num_inputs,
            inputs.len()
        )));
    }
    if tape.value(arch).len() != cell.num_arch_weights() || op_params.len() != cell.num_arch_weights() {
        return Err(Error::InvalidArgument(format!(
            "cell has {} weighted operations, got {} weights and {} parameter lists",
            cell.num_arch_weights(),
            tape.value(arch).len(),
            op_params.len()
        )));
    }
    for x in inputs {
        let shape = tape.value(*x).shape();
        if shape.len() != 2 || shape[1] != cell.feature_dim {
            return Err(Error::ShapeMismatch {
                op: "cell_forward",
                lhs: shape.to_vec(),
                rhs: vec![shape.first().copied().unwrap_or(0), cell.feature_dim],
            });
        }
    }

    let mut nodes: Vec<Var> = inputs.to_vec();
    let mut edge_pos = 0;
    for to in cell.intermediate_nodes() {
        let mut terms = Vec::with_capacity(to * cell.op_set.len());
        let mut indices = Vec::with_capacity(terms.capacity());
        for &src in &nodes[..to] {
            for (op_pos, op) in cell.op_set.iter().enumerate() {
                let k = cell.arch_index(edge_pos, op_pos);
                terms.push(op.apply(tape, src, &op_params[k])?);
                indices.push(k);
            }
            edge_pos += 1;
        }
        nodes.push(tape.weighted_sum(arch, &indices, &terms)?);
    }

    let outputs = &nodes[cell.num_inputs..];
    match cell.output {
        CellOutput::Concat => tape.concat(outputs, 1),
        CellOutput::Sum => tape.sum_list(outputs),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_cell_shape() {
        let cell = CellSpec::default();
        cell.validate().unwrap();
        assert_eq!(cell.edges().len(), 2 + 3 + 4 + 5);
        assert_eq!(cell.num_arch_weights(), 14 * 5);
        let groups = cell.group_index();
        let sizes: Vec<usize> = groups.groups().iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![10, 15, 20, 25]);
        assert_eq!(cell.output_dim(), 64);
    }

    #[test]
    fn validation_rejects_bad_cells() {
        let mut cell = CellSpec {
            op_set: vec![],
            ..CellSpec::default()
        };
        assert!(cell.validate().is_err());
        cell.op_set = vec![OpKind::Identity, OpKind::Identity];
        assert!(cell.validate().is_err());
        cell.op_set = vec![OpKind::Identity];
        cell.num_intermediate = 0;
        assert!(cell.validate().is_err());
    }

    #[test]
    fn init_is_scale_preserving_with_jitter() {
        use rand::SeedableRng;
        let cell = CellSpec::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let a = ArchWeights::init(&cell, &mut rng);
        assert_eq!(a.len(), 70);
        // First node: 2 predecessors x 5 ops.
        let mean: f64 = a.values()[..10].iter().sum::<f64>() / 10.0;
        assert!((mean - 0.1).abs() < 0.02);
        assert!(a.values()[..10].iter().any(|v| *v != 0.1));
    }
}
