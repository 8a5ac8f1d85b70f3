use std::fmt;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{Dataset, Splits};
use super::mlp::{Mlp, MlpParams};
use crate::error::{Error, Result};
use crate::optim::{cosine_lr, Adam, Optimizer, OptimizerKind, OptimizerSettings, Regularizer};
use crate::prox::GroupIndex;
use crate::supernet::{accuracy, apply_threshold};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKind {
    Lasso,
    GroupLasso,
    Sgl,
}

impl PenaltyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PenaltyKind::Lasso => "lasso",
            PenaltyKind::GroupLasso => "group_lasso",
            PenaltyKind::Sgl => "sgl",
        }
    }

    /// Mixing weight of the L1 part.
    pub fn alpha(self, sgl_alpha: f64) -> f64 {
        match self {
            PenaltyKind::Lasso => 1.0,
            PenaltyKind::GroupLasso => 0.0,
            PenaltyKind::Sgl => sgl_alpha,
        }
    }
}

impl fmt::Display for PenaltyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn pruning_optimizers() -> OptimizerSettings {
    OptimizerSettings {
        hapg_lr: 0.1,
        sgd_weight_decay: 0.0,
        ..OptimizerSettings::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruningConfig {
    pub hidden: Vec<usize>,
    pub lambdas: Vec<f64>,
    pub alpha: f64,
    pub penalties: Vec<PenaltyKind>,
    pub optimizers: Vec<OptimizerKind>,
    pub epochs: usize,
    pub batch_size: usize,
    pub retrain_epochs: usize,
    pub retrain_batch_size: usize,
    /// Magnitude at or below which non-proximal weights count as zero.
    pub threshold: f64,
    pub optim: OptimizerSettings,
    // Split and seed belong to the run rather than the sweep, so they stay
    // out of the serialized form.
    #[serde(skip)]
    pub train_fraction: f64,
    #[serde(skip)]
    pub val_fraction: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for PruningConfig {
    fn default() -> Self {
        PruningConfig {
            hidden: vec![40, 20],
            lambdas: vec![1e-5, 10f64.powf(-4.5), 1e-4, 10f64.powf(-3.7)],
            alpha: 0.5,
            penalties: vec![PenaltyKind::Sgl],
            optimizers: vec![
                OptimizerKind::Sgd,
                OptimizerKind::Adam,
                OptimizerKind::Hapg,
                OptimizerKind::AdamHapg,
            ],
            epochs: 200,
            batch_size: 256,
            retrain_epochs: 500,
            retrain_batch_size: 256,
            threshold: 0.001,
            optim: pruning_optimizers(),
            train_fraction: 0.6,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

impl PruningConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambdas.is_empty() {
            return Err(Error::InvalidArgument("prune.lambdas must not be empty".into()));
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(**l >= 0.0) || !l.is_finite()) {
            return Err(Error::InvalidArgument(format!("prune.lambdas: {l} is not a finite value >= 0")));
        }
        if self.penalties.is_empty() || self.optimizers.is_empty() {
            return Err(Error::InvalidArgument(
                "prune.penalties and prune.optimizers must not be empty".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidArgument(format!("prune.alpha must be in [0, 1], got {}", self.alpha)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.retrain_batch_size == 0 {
            return Err(Error::InvalidArgument("prune epochs and batch sizes must be positive".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::InvalidArgument("prune.hidden sizes must be positive".into()));
        }
        if !(self.threshold >= 0.0) {
            return Err(Error::InvalidArgument("prune.threshold must be >= 0".into()));
        }
        Ok(())
    }

    /// Every (λ, optimizer, penalty) combination in output order.
    pub fn cells(&self) -> Vec<(f64, OptimizerKind, PenaltyKind)> {
        let mut out = Vec::new();
        for &lambda in &self.lambdas {
            for &opt in &self.optimizers {
                for &pen in &self.penalties {
                    out.push((lambda, opt, pen));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PruningRow {
    pub lambda: f64,
    pub optimizer: OptimizerKind,
    pub penalty: PenaltyKind,
    /// Validation accuracy of the retrained stand-alone sparse network.
    pub val_acc: f64,
    pub selected_features: usize,
    pub remaining_neurons: usize,
    pub element_sparsity: f64,
    /// Bitwise-zero weights straight after training, before any threshold.
    pub raw_zeros: usize,
    /// Input features whose outgoing row is zero among the known noise
    /// columns of the dataset.
    pub pruned_noise_features: usize,
    /// `None` for a completed cell, otherwise why it failed.
    pub failure: Option<String>,
}

impl PruningRow {
    pub fn ok(&self) -> bool {
        self.failure.is_none()
    }
}

pub const PRUNING_HEADER: &str =
    "lambda,optimizer,penalty,val_acc,selected_features,remaining_neurons,element_sparsity,status";

pub fn pruning_csv(rows: &[PruningRow]) -> String {
    let mut out = String::from(PRUNING_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.lambda,
            r.optimizer,
            r.penalty,
            r.val_acc,
            r.selected_features,
            r.remaining_neurons,
            r.element_sparsity,
            if r.ok() { "ok" } else { "failed" }
        );
    }
    out
}

/// Worker count for parallel sweeps: `SPARSENAS_THREADS` if set, otherwise
/// the available parallelism.
pub fn worker_threads() -> usize {
    std::env::var("SPARSENAS_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|n| *n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// The trained network of one sweep cell.
#[derive(Clone, Debug)]
pub struct TrainedCell {
    pub net: Mlp,
    /// Weights after training and, for non-proximal runs, thresholding.
    pub params: MlpParams,
    pub raw_zeros: usize,
}

fn is_non_finite(e: &Error) -> bool {
    matches!(e, Error::NonFinite(_))
}

/// Trains the network with the penalty on every weight matrix.
pub fn train_penalized(
    config: &PruningConfig,
    data: &Dataset,
    train: &[usize],
    lambda: f64,
    kind: OptimizerKind,
    penalty: PenaltyKind,
) -> Result<TrainedCell> {
    let mut sizes = vec![data.num_features()];
    sizes.extend(&config.hidden);
    sizes.push(data.num_classes());
    let net = Mlp::new(&sizes)?;
    let groups = net.weight_groups();
    let bias_groups = GroupIndex::singletons(sizes[1..].iter().sum());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut p = net.init(&mut rng);

    let mut opt_w = config.optim.build(kind);
    let mut opt_b = config.optim.build(kind);
    let lr0 = config.optim.initial_lr(kind);
    let anneal = matches!(kind, OptimizerKind::Sgd | OptimizerKind::Hapg);
    let alpha = penalty.alpha(config.alpha);
    let mut order = train.to_vec();
    for epoch in 0..config.epochs {
        if anneal {
            opt_w.set_lr(cosine_lr(epoch, config.epochs, lr0));
            opt_b.set_lr(cosine_lr(epoch, config.epochs, lr0));
        }
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch = data.batch(chunk);
            let (loss, g) = net.loss_grad(&p, &batch.x, &batch.labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            opt_w.step(&mut p.weights, &g.weights, Regularizer::new(&groups, lambda, alpha))?;
            opt_b.step(&mut p.biases, &g.biases, Regularizer::none(&bias_groups))?;
        }
    }
    let raw_zeros = p.weights.iter().filter(|w| **w == 0.0).count();
    if !kind.is_proximal() {
        apply_threshold(&mut p.weights, config.threshold);
    }
    Ok(TrainedCell { net, params: p, raw_zeros })
}

/// Retrains the sparsity pattern of `trained` from a fresh initialisation
/// with Adam and no penalty; pruned weights stay exactly zero. Returns the
/// accuracy on `eval`.
pub fn retrain_masked(
    config: &PruningConfig,
    data: &Dataset,
    trained: &TrainedCell,
    train: &[usize],
    eval: &[usize],
) -> Result<f64> {
    let net = &trained.net;
    let mask: Vec<bool> = trained.params.weights.iter().map(|w| *w != 0.0).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut p = net.init(&mut rng);
    for (w, keep) in p.weights.iter_mut().zip(&mask) {
        if !keep {
            *w = 0.0;
        }
    }
    let groups = GroupIndex::singletons(p.weights.len());
    let bias_groups = GroupIndex::singletons(p.biases.len());
    let s = &config.optim;
    let mut opt_w = Adam::new(s.adam_lr, s.beta1, s.beta2, s.adam_eps);
    let mut opt_b = Adam::new(s.adam_lr, s.beta1, s.beta2, s.adam_eps);
    let mut order = train.to_vec();
    for epoch in 0..config.retrain_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.retrain_batch_size) {
            let batch = data.batch(chunk);
            let (loss, mut g) = net.loss_grad(&p, &batch.x, &batch.labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("retraining loss at epoch {epoch}")));
            }
            for (gw, keep) in g.weights.iter_mut().zip(&mask) {
                if !keep {
                    *gw = 0.0;
                }
            }
            opt_w.step(&mut p.weights, &g.weights, Regularizer::none(&groups))?;
            opt_b.step(&mut p.biases, &g.biases, Regularizer::none(&bias_groups))?;
            for (w, keep) in p.weights.iter_mut().zip(&mask) {
                if !keep {
                    *w = 0.0;
                }
            }
        }
    }
    let batch = data.batch(eval);
    Ok(accuracy(&net.predict(&p, &batch.x)?, &batch.labels))
}

fn run_cell(
    config: &PruningConfig,
    data: &Dataset,
    splits: &Splits,
    (lambda, optimizer, penalty): (f64, OptimizerKind, PenaltyKind),
) -> Result<PruningRow> {
    let mut row = PruningRow {
        lambda,
        optimizer,
        penalty,
        val_acc: f64::NAN,
        selected_features: 0,
        remaining_neurons: 0,
        element_sparsity: f64::NAN,
        raw_zeros: 0,
        pruned_noise_features: 0,
        failure: None,
    };
    let trained = match train_penalized(config, data, &splits.train, lambda, optimizer, penalty) {
        Ok(t) => t,
        Err(e) if is_non_finite(&e) => {
            log::warn!("pruning cell lambda={lambda} {optimizer}/{penalty} failed: {e}");
            row.failure = Some(e.to_string());
            return Ok(row);
        }
        Err(e) => return Err(e),
    };
    let w = &trained.params.weights;
    let net = &trained.net;
    row.raw_zeros = trained.raw_zeros;
    row.element_sparsity = w.iter().filter(|v| **v == 0.0).count() as f64 / w.len() as f64;
    row.selected_features = net.selected_features(w);
    row.remaining_neurons = net.remaining_neurons(w);
    let first = &w[net.weight_range(0)];
    let cols = net.sizes()[1];
    row.pruned_noise_features = data
        .meta()
        .noise_features
        .iter()
        .filter(|&&f| first[f * cols..(f + 1) * cols].iter().all(|v| *v == 0.0))
        .count();
    match retrain_masked(config, data, &trained, &splits.train, &splits.val) {
        Ok(acc) => row.val_acc = acc,
        Err(e) if is_non_finite(&e) => row.failure = Some(e.to_string()),
        Err(e) => return Err(e),
    }
    Ok(row)
}

/// Runs every sweep cell, in parallel when more than one worker is allowed.
/// Rows come back in [`PruningConfig::cells`] order regardless of
/// scheduling. The features are standardised with training-split
/// statistics first.
pub fn pruning_experiment(config: &PruningConfig, dataset: &Dataset) -> Result<Vec<PruningRow>> {
    config.validate()?;
    let splits = dataset.split(config.seed, config.train_fraction, config.val_fraction)?;
    if splits.val.is_empty() {
        return Err(Error::InvalidArgument("validation split is empty".into()));
    }
    let mut data = dataset.clone();
    data.standardize(&splits.train);
    let cells = config.cells();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads())
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let rows: Vec<Result<PruningRow>> = pool.install(|| {
        cells
            .par_iter()
            .map(|&cell| run_cell(config, &data, &splits, cell))
            .collect()
    });
    rows.into_iter().collect()
}
