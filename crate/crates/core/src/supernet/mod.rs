//! Mixed-edge cell, architecture weights, derivation and exports.

mod cell;
mod derive;
mod export;
mod model;
mod ops;

pub use cell::{cell_forward, ArchWeights, CellOutput, CellSpec, Edge};
pub use derive::{apply_threshold, derive_architecture, sparsity_metrics, DerivedArch, KeptEdge, SparsityMetrics};
pub use export::{
    export_arch_json, export_dot, export_heatmap_csv, export_supernet_json, parse_arch_json, parse_supernet_json,
    read_text, supernet_document, write_text, ArchDocument, EdgeDocument, NodeDocument,
};
pub use model::{accuracy, DerivedModel, LossGrad, SupernetModel};
pub use ops::{toy_op_set, OpKind};

#[cfg(test)]
mod tests;
