//! Alternating architecture / weight optimisation with a second-order
//! hypergradient.
//!
//! The architecture gradient is
//!
//! ```text
//! w'  = w − γ ∇_w l_train(w, A)
//! w±  = w ± ε ∇_{w'} l_val(w', A),        ε = s / ‖∇_{w'} l_val(w', A)‖
//! g_A = ∇_A l_val(w', A) − γ [∇_A l_train(w⁺, A) − ∇_A l_train(w⁻, A)] / (2ε)
//! ```

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::optim::{clip_grad_norm, cosine_lr, lambda_schedule, OptimizerKind, OptimizerSettings, Regularizer};
use crate::prox::{GroupIndex, SglConfig};
use crate::supernet::{accuracy, sparsity_metrics, ArchWeights, LossGrad, SupernetModel};

/// A model whose loss depends on network weights `w` and architecture
/// weights `a`.
pub trait BilevelObjective {
    type Batch;

    fn loss_grad(&self, w: &[f64], a: &[f64], batch: &Self::Batch, need_w: bool, need_a: bool) -> Result<LossGrad>;
}

/// Features and labels of one mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub labels: Vec<usize>,
}

impl BilevelObjective for SupernetModel {
    type Batch = Batch;

    fn loss_grad(&self, w: &[f64], a: &[f64], batch: &Batch, need_w: bool, need_a: bool) -> Result<LossGrad> {
        SupernetModel::loss_grad(self, w, a, &batch.x, &batch.labels, need_w, need_a)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HypergradConfig {
    /// Inner step size. `None` uses the current network learning rate.
    pub gamma: Option<f64>,
    /// `s` in `ε = s / ‖∇_{w'} l_val‖`.
    pub epsilon_scale: f64,
    pub first_order: bool,
}

impl Default for HypergradConfig {
    fn default() -> Self {
        HypergradConfig {
            gamma: None,
            epsilon_scale: 0.01,
            first_order: false,
        }
    }
}

const MIN_EPSILON: f64 = 1e-8;

fn finite(stage: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("hypergradient: {stage}")))
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Architecture gradient from one train batch and one validation batch.
/// `first_order` or `gamma == 0` returns `∇_A l_val(w, A)`.
pub fn hypergradient<O: BilevelObjective>(
    obj: &O,
    w: &[f64],
    a: &[f64],
    train: &O::Batch,
    val: &O::Batch,
    gamma: f64,
    config: &HypergradConfig,
) -> Result<Vec<f64>> {
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::InvalidArgument(format!("gamma must be finite and >= 0, got {gamma}")));
    }
    finite("w", w)?;
    finite("A", a)?;
    if config.first_order || gamma == 0.0 {
        let g = obj.loss_grad(w, a, val, false, true)?.grad_a;
        finite("validation gradient", &g)?;
        return Ok(g);
    }

    let g_train = obj.loss_grad(w, a, train, true, false)?.grad_w;
    finite("train gradient at w", &g_train)?;
    let w_prime: Vec<f64> = w.iter().zip(&g_train).map(|(x, g)| x - gamma * g).collect();

    let val = obj.loss_grad(&w_prime, a, val, true, true)?;
    finite("validation gradient at w'", &val.grad_w)?;
    finite("validation gradient at w'", &val.grad_a)?;
    let mut result = val.grad_a;

    let dir_norm = norm(&val.grad_w);
    if dir_norm == 0.0 {
        return Ok(result);
    }
    let eps = (config.epsilon_scale / dir_norm).max(MIN_EPSILON);
    let shifted = |sign: f64| -> Vec<f64> { w.iter().zip(&val.grad_w).map(|(x, d)| x + sign * eps * d).collect() };
    let plus = obj.loss_grad(&shifted(1.0), a, train, false, true)?.grad_a;
    finite("train gradient at w+", &plus)?;
    let minus = obj.loss_grad(&shifted(-1.0), a, train, false, true)?.grad_a;
    finite("train gradient at w-", &minus)?;
    for ((r, p), m) in result.iter_mut().zip(&plus).zip(&minus) {
        *r -= gamma * (p - m) / (2.0 * eps);
    }
    finite("result", &result)?;
    Ok(result)
}

/// Features, labels and the two disjoint index sets used by the search.
#[derive(Clone, Debug)]
pub struct SearchData {
    features: Tensor,
    labels: Vec<usize>,
    train: Vec<usize>,
    val: Vec<usize>,
}

impl SearchData {
    pub fn new(features: Tensor, labels: Vec<usize>, train: Vec<usize>, val: Vec<usize>) -> Result<Self> {
        let (n, _) = features
            .dims2()
            .ok_or_else(|| Error::InvalidArgument("features must be a matrix".into()))?;
        if labels.len() != n {
            return Err(Error::InvalidArgument(format!("{n} feature rows but {} labels", labels.len())));
        }
        if train.is_empty() || val.is_empty() {
            return Err(Error::InvalidArgument("train and validation index sets must be non-empty".into()));
        }
        if let Some(bad) = train.iter().chain(&val).find(|&&i| i >= n) {
            return Err(Error::InvalidArgument(format!("sample index {bad} out of range for {n} rows")));
        }
        let seen: HashSet<usize> = train.iter().copied().collect();
        if let Some(shared) = val.iter().find(|i| seen.contains(i)) {
            return Err(Error::InvalidArgument(format!(
                "sample {shared} is in both the train and validation sets"
            )));
        }
        Ok(SearchData {
            features,
            labels,
            train,
            val,
        })
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train
    }

    pub fn val_indices(&self) -> &[usize] {
        &self.val
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let (_, d) = self.features.dims2().expect("checked in new");
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&self.features.data()[i * d..(i + 1) * d]);
        }
        Batch {
            x: Tensor::matrix(indices.len(), d, data).expect("rows have width d"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub arch_optimizer: OptimizerKind,
    pub weight_optimizer: OptimizerKind,
    pub optimizers: OptimizerSettings,
    pub sgl: SglConfig,
    /// Epochs at the initial λ before the linear schedule starts.
    pub warmup_epochs: usize,
    pub hypergrad: HypergradConfig,
    /// Norm cap for the architecture gradient; 0 disables clipping.
    pub arch_grad_clip: f64,
    /// Norm cap for the network-weight gradient; 0 disables clipping.
    pub weight_grad_clip: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            epochs: 50,
            batch_size: 64,
            arch_optimizer: OptimizerKind::AdamHapg,
            weight_optimizer: OptimizerKind::Sgd,
            optimizers: OptimizerSettings::default(),
            sgl: SglConfig {
                lambda: 0.0,
                alpha: 0.5,
                lambda_step: 0.01,
                lambda_max: f64::INFINITY,
            },
            warmup_epochs: 5,
            hypergrad: HypergradConfig::default(),
            arch_grad_clip: 10.0,
            weight_grad_clip: 5.0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("search epochs and batch_size must be positive".into()));
        }
        self.sgl.validate()?;
        if let Some(g) = self.hypergrad.gamma {
            if !(g >= 0.0) || !g.is_finite() {
                return Err(Error::InvalidArgument(format!("hypergrad.gamma must be >= 0, got {g}")));
            }
        }
        if !(self.hypergrad.epsilon_scale > 0.0) {
            return Err(Error::InvalidArgument("hypergrad.epsilon_scale must be positive".into()));
        }
        Ok(())
    }

    /// λ for an epoch: held at the initial value during warmup, then the
    /// linear schedule.
    pub fn lambda_at(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            self.sgl.lambda
        } else {
            lambda_schedule(epoch - self.warmup_epochs, &self.sgl)
        }
    }
}

/// One row of the search log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub lambda: f64,
    pub element_sparsity: f64,
    pub active_groups: usize,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,val_loss,val_acc,lambda,element_sparsity,active_groups";

pub fn metrics_csv(log: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in log {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            m.epoch, m.train_loss, m.val_loss, m.val_acc, m.lambda, m.element_sparsity, m.active_groups
        );
    }
    out
}

#[derive(Clone, Debug)]
pub struct SearchResult {
    pub w: Vec<f64>,
    pub arch: ArchWeights,
    pub log: Vec<EpochMetrics>,
}

impl SearchResult {
    pub fn final_val_acc(&self) -> f64 {
        self.log.last().map_or(0.0, |m| m.val_acc)
    }
}

fn evaluate(model: &SupernetModel, w: &[f64], a: &[f64], batch: &Batch) -> Result<(f64, f64)> {
    let loss = model.loss_grad(w, a, &batch.x, &batch.labels, false, false)?.loss;
    let pred = model.predict(w, a, &batch.x)?;
    Ok((loss, accuracy(&pred, &batch.labels)))
}

/// Runs the alternating search. Each iteration first updates the
/// architecture weights with the hypergradient, then takes one step on the
/// network weights.
pub fn search_loop(model: &SupernetModel, data: &SearchData, config: &SearchConfig, seed: u64) -> Result<SearchResult> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = model.init_params(&mut rng);
    let mut arch = ArchWeights::init(model.cell(), &mut rng);
    let w_groups = GroupIndex::singletons(w.len());

    let mut arch_opt = config.optimizers.build(config.arch_optimizer);
    let mut weight_opt = config.optimizers.build(config.weight_optimizer);
    let arch_lr0 = config.optimizers.initial_lr(config.arch_optimizer);
    let weight_lr0 = config.optimizers.initial_lr(config.weight_optimizer);
    // Adaptive optimizers keep a constant rate; the others follow a cosine.
    let anneal = |kind: OptimizerKind| matches!(kind, OptimizerKind::Sgd | OptimizerKind::Hapg);

    let val_all = data.batch(&data.val);
    let mut train_order = data.train.clone();
    let mut val_order = data.val.clone();
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let lambda = config.lambda_at(epoch);
        if anneal(config.arch_optimizer) {
            arch_opt.set_lr(cosine_lr(epoch, config.epochs, arch_lr0));
        }
        if anneal(config.weight_optimizer) {
            weight_opt.set_lr(cosine_lr(epoch, config.epochs, weight_lr0));
        }
        let gamma = config.hypergrad.gamma.unwrap_or_else(|| weight_opt.lr());
        train_order.shuffle(&mut rng);
        val_order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in train_order.chunks(config.batch_size).enumerate() {
            let train = data.batch(chunk);
            let vstart = (b * config.batch_size) % val_order.len();
            let vidx: Vec<usize> = (0..config.batch_size.min(val_order.len()))
                .map(|k| val_order[(vstart + k) % val_order.len()])
                .collect();
            let val = data.batch(&vidx);

            let mut g_a = hypergradient(model, &w, arch.values(), &train, &val, gamma, &config.hypergrad)?;
            if config.arch_grad_clip > 0.0 {
                clip_grad_norm(&mut g_a, config.arch_grad_clip);
            }
            let groups = arch.groups().clone();
            arch_opt.step(arch.values_mut(), &g_a, Regularizer::new(&groups, lambda, config.sgl.alpha))?;

            let lg = model.loss_grad(&w, arch.values(), &train.x, &train.labels, true, false)?;
            let mut g_w = lg.grad_w;
            if config.weight_grad_clip > 0.0 {
                clip_grad_norm(&mut g_w, config.weight_grad_clip);
            }
            weight_opt.step(&mut w, &g_w, Regularizer::none(&w_groups))?;
            loss_sum += lg.loss;
            batches += 1;
        }

        let (val_loss, val_acc) = evaluate(model, &w, arch.values(), &val_all)?;
        let m = sparsity_metrics(arch.values(), arch.groups(), lambda, config.sgl.alpha);
        if m.active_groups == 0 {
            log::warn!("epoch {epoch}: every node group of A is zero; continuing the search");
        }
        log::debug!(
            "epoch {epoch}: val_acc {val_acc:.4} lambda {lambda:.4} sparsity {:.3}",
            m.element_sparsity
        );
        log.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_loss,
            val_acc,
            lambda,
            element_sparsity: m.element_sparsity,
            active_groups: m.active_groups,
        });
    }
    Ok(SearchResult { w, arch, log })
}
