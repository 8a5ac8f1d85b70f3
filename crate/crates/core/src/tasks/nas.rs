use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{Dataset, Splits};
use crate::bilevel::{search_loop, EpochMetrics, SearchConfig, SearchData, SearchResult};
use crate::error::{Error, Result};
use crate::optim::{Adam, Optimizer, Regularizer};
use crate::prox::GroupIndex;
use crate::supernet::{
    accuracy, derive_architecture, ArchWeights, CellOutput, CellSpec, DerivedArch, DerivedModel, SupernetModel,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        RetrainConfig {
            epochs: 500,
            batch_size: 64,
            lr: 3e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NasConfig {
    pub cell: CellSpec,
    pub search: SearchConfig,
    pub retrain: RetrainConfig,
    /// Magnitude at or below which architecture weights are pruned. Unset
    /// prunes exact zeros only.
    pub threshold: Option<f64>,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for NasConfig {
    fn default() -> Self {
        NasConfig {
            cell: CellSpec::default(),
            search: SearchConfig::default(),
            retrain: RetrainConfig::default(),
            threshold: None,
            train_fraction: 0.6,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

impl NasConfig {
    pub fn validate(&self) -> Result<()> {
        self.cell.validate()?;
        self.search.validate()?;
        if self.retrain.epochs == 0 || self.retrain.batch_size == 0 || !(self.retrain.lr > 0.0) {
            return Err(Error::InvalidArgument("retrain epochs, batch_size and lr must be positive".into()));
        }
        if let Some(t) = self.threshold {
            if !(t >= 0.0) {
                return Err(Error::InvalidArgument(format!("threshold must be >= 0, got {t}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct NasReport {
    pub search: SearchResult,
    pub derived: DerivedArch,
    pub supernet_val_acc: f64,
    pub retrain_test_acc: f64,
    pub supernet_ops: usize,
    pub derived_ops: usize,
}

impl NasReport {
    pub fn log(&self) -> &[EpochMetrics] {
        &self.search.log
    }

    /// Intermediate nodes with every incoming weight removed.
    pub fn removed_nodes(&self, cell: &CellSpec) -> usize {
        cell.num_intermediate - self.derived.active_nodes.len()
    }
}

/// Failure of [`nas_experiment`] that still carries the search outcome.
#[derive(Debug)]
pub struct NasFailure {
    pub error: Error,
    /// Final architecture weights when the search itself finished.
    pub arch: Option<ArchWeights>,
}

impl From<Error> for NasFailure {
    fn from(error: Error) -> Self {
        NasFailure { error, arch: None }
    }
}

impl std::fmt::Display for NasFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for NasFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// The standardised dataset and its splits as used by the cell search.
pub fn prepare(config: &NasConfig, dataset: &Dataset) -> Result<(Dataset, Splits)> {
    let splits = dataset.split(config.seed, config.train_fraction, config.val_fraction)?;
    if splits.val.is_empty() || splits.test.is_empty() {
        return Err(Error::InvalidArgument("validation and test splits must be non-empty".into()));
    }
    let mut data = dataset.clone();
    data.standardize(&splits.train);
    Ok((data, splits))
}

/// The search phase alone. Also returns the standardised data and splits it
/// ran on.
pub fn nas_search(config: &NasConfig, dataset: &Dataset) -> Result<(SearchResult, Dataset, Splits)> {
    config.validate()?;
    let (data, splits) = prepare(config, dataset)?;
    let model = SupernetModel::new(config.cell.clone(), data.num_features(), data.num_classes())?;
    let search_data = SearchData::new(
        data.features().clone(),
        data.labels().to_vec(),
        splits.train.clone(),
        splits.val.clone(),
    )?;
    let search = search_loop(&model, &search_data, &config.search, config.seed)?;
    Ok((search, data, splits))
}

/// Search on the train split with the validation split driving the
/// architecture, derive, then retrain the derived cell on train + val and
/// score it on test.
pub fn nas_experiment(config: &NasConfig, dataset: &Dataset) -> std::result::Result<NasReport, NasFailure> {
    let (search, data, splits) = nas_search(config, dataset)?;
    let derived = match derive_architecture(&config.cell, &search.arch, config.threshold) {
        Ok(d) => d,
        Err(error) => {
            return Err(NasFailure {
                error,
                arch: Some(search.arch.clone()),
            })
        }
    };
    let retrain_test_acc = retrain_derived(
        &derived,
        config.cell.feature_dim,
        config.cell.output,
        &data,
        &splits.train_and_val(),
        &splits.test,
        &config.retrain,
        config.seed,
    )?;
    Ok(NasReport {
        supernet_val_acc: search.final_val_acc(),
        retrain_test_acc,
        supernet_ops: config.cell.num_arch_weights(),
        derived_ops: derived.num_ops(),
        derived,
        search,
    })
}

/// Trains the derived network from fresh operation parameters with Adam and
/// no penalty, and returns the accuracy on `eval`.
#[allow(clippy::too_many_arguments)]
pub fn retrain_derived(
    arch: &DerivedArch,
    feature_dim: usize,
    output: CellOutput,
    data: &Dataset,
    train: &[usize],
    eval: &[usize],
    config: &RetrainConfig,
    seed: u64,
) -> Result<f64> {
    let model = DerivedModel::new(arch.clone(), feature_dim, output, data.num_features(), data.num_classes())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5eed));
    let mut w = model.init_params(&mut rng);
    let groups = GroupIndex::singletons(w.len());
    let mut opt = Adam::new(config.lr, config.beta1, config.beta2, config.eps);
    let mut order = train.to_vec();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch = data.batch(chunk);
            let (loss, grad) = model.loss_grad(&w, &batch.x, &batch.labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("retraining loss at epoch {epoch}")));
            }
            opt.step(&mut w, &grad, Regularizer::none(&groups))?;
        }
    }
    let batch = data.batch(eval);
    Ok(accuracy(&model.predict(&w, &batch.x)?, &batch.labels))
}
