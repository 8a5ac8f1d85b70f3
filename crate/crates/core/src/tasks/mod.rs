//! Datasets, the network-pruning sweep and the toy cell search.

mod data;
mod mlp;
mod nas;
mod pruning;

pub use data::{gen_synthetic, load_csv, Dataset, DatasetMeta, Splits, SyntheticConfig};
pub use mlp::{Mlp, MlpParams, PrunedMlp};
pub use nas::{nas_experiment, nas_search, prepare, retrain_derived, NasConfig, NasFailure, NasReport, RetrainConfig};
pub use pruning::{
    pruning_csv, pruning_experiment, retrain_masked, train_penalized, worker_threads, PenaltyKind, PruningConfig,
    PruningRow, TrainedCell, PRUNING_HEADER,
};
