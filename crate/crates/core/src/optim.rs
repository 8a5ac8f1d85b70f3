//! Stochastic optimizers sharing one step interface.
//!
//! [`Sgd`] and [`Adam`] are the non-proximal baselines: a penalty is handled
//! by adding its subgradient to the gradient. [`Hapg`] and [`AdamHapg`] take a
//! forward step and then apply the hierarchical sparse-group-lasso proximal
//! map, followed by the accelerated recombination
//!
//! ```text
//! v_t = p_t − A_{t−1} + u_{t−1} v_{t−1}
//! A_t = p_t + u_t v_t,        u_t = (t − 2) / (t + 1)
//! ```
//!
//! with `v_0 = 0` and `t` counting steps from 1.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prox::{prox_sgl_adaptive_in_place, sgl_subgradient, GroupIndex, SglConfig};

/// Penalty applied by an optimizer step. `lambda == 0` disables it.
#[derive(Clone, Copy, Debug)]
pub struct Regularizer<'a> {
    pub groups: &'a GroupIndex,
    pub lambda: f64,
    pub alpha: f64,
}

impl<'a> Regularizer<'a> {
    pub fn new(groups: &'a GroupIndex, lambda: f64, alpha: f64) -> Self {
        Regularizer { groups, lambda, alpha }
    }

    pub fn none(groups: &'a GroupIndex) -> Self {
        Regularizer {
            groups,
            lambda: 0.0,
            alpha: 0.0,
        }
    }

    fn active(&self) -> bool {
        self.lambda > 0.0
    }
}

pub trait Optimizer: Send {
    /// Updates `params` in place from the loss gradient `grad`.
    fn step(&mut self, params: &mut [f64], grad: &[f64], reg: Regularizer<'_>) -> Result<()>;

    fn lr(&self) -> f64;

    fn set_lr(&mut self, lr: f64);

    /// Whether zeros produced by this optimizer are exact (no threshold is
    /// needed when reading off sparsity).
    fn is_proximal(&self) -> bool;

    /// Steps taken so far.
    fn steps(&self) -> u64;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    Hapg,
    AdamHapg,
}

impl OptimizerKind {
    pub fn is_proximal(self) -> bool {
        matches!(self, OptimizerKind::Hapg | OptimizerKind::AdamHapg)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
            OptimizerKind::Hapg => "hapg",
            OptimizerKind::AdamHapg => "adam_hapg",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Hyperparameters for every optimizer kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSettings {
    pub sgd_lr: f64,
    pub sgd_momentum: f64,
    pub sgd_weight_decay: f64,
    pub adam_lr: f64,
    pub hapg_lr: f64,
    pub adam_hapg_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Turns the accelerated recombination off, so `A_t = p_t`.
    pub hapg_momentum: bool,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        OptimizerSettings {
            sgd_lr: 0.025,
            sgd_momentum: 0.9,
            sgd_weight_decay: 3e-4,
            adam_lr: 3e-4,
            hapg_lr: 0.025,
            adam_hapg_lr: 3e-4,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            hapg_momentum: true,
        }
    }
}

impl OptimizerSettings {
    pub fn initial_lr(&self, kind: OptimizerKind) -> f64 {
        match kind {
            OptimizerKind::Sgd => self.sgd_lr,
            OptimizerKind::Adam => self.adam_lr,
            OptimizerKind::Hapg => self.hapg_lr,
            OptimizerKind::AdamHapg => self.adam_hapg_lr,
        }
    }

    pub fn build(&self, kind: OptimizerKind) -> Box<dyn Optimizer> {
        match kind {
            OptimizerKind::Sgd => Box::new(Sgd::new(self.sgd_lr, self.sgd_momentum, self.sgd_weight_decay)),
            OptimizerKind::Adam => Box::new(Adam::new(self.adam_lr, self.beta1, self.beta2, self.adam_eps)),
            OptimizerKind::Hapg => Box::new(Hapg::new(self.hapg_lr).with_momentum(self.hapg_momentum)),
            OptimizerKind::AdamHapg => Box::new(
                AdamHapg::new(self.adam_hapg_lr, self.beta1, self.beta2, self.adam_eps)
                    .with_momentum(self.hapg_momentum),
            ),
        }
    }
}

fn check_grad(name: &str, step: u64, params: &[f64], grad: &[f64]) -> Result<()> {
    if params.len() != grad.len() {
        return Err(Error::InvalidArgument(format!(
            "{name} step {step}: gradient has {} entries for {} parameters",
            grad.len(),
            params.len()
        )));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("{name} step {step}: gradient entry {i}")));
    }
    Ok(())
}

fn ensure_len(state: &mut Vec<f64>, len: usize) {
    if state.len() != len {
        *state = vec![0.0; len];
    }
}

/// Gradient plus penalty subgradient.
fn penalized_grad(params: &[f64], grad: &[f64], reg: Regularizer<'_>) -> Vec<f64> {
    if !reg.active() {
        return grad.to_vec();
    }
    let sub = sgl_subgradient(params, reg.groups, reg.lambda, reg.alpha);
    grad.iter().zip(sub).map(|(g, s)| g + s).collect()
}

/// Momentum SGD with L2 weight decay.
#[derive(Clone, Debug)]
pub struct Sgd {
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    buf: Vec<f64>,
    t: u64,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            buf: Vec::new(),
            t: 0,
        }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut [f64], grad: &[f64], reg: Regularizer<'_>) -> Result<()> {
        check_grad("sgd", self.t + 1, params, grad)?;
        ensure_len(&mut self.buf, params.len());
        let g = penalized_grad(params, grad, reg);
        for ((p, b), g) in params.iter_mut().zip(&mut self.buf).zip(g) {
            let d = g + self.weight_decay * *p;
            *b = self.momentum * *b + d;
            *p -= self.lr * *b;
        }
        self.t += 1;
        Ok(())
    }

    fn lr(&self) -> f64 {
        self.lr
    }

    fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    fn is_proximal(&self) -> bool {
        false
    }

    fn steps(&self) -> u64 {
        self.t
    }
}

/// Bias-corrected first and second moments shared by [`Adam`] and
/// [`AdamHapg`].
#[derive(Clone, Debug)]
struct Moments {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v2: Vec<f64>,
}

impl Moments {
    fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Moments {
            beta1,
            beta2,
            eps,
            m: Vec::new(),
            v2: Vec::new(),
        }
    }

    /// Updates the moments with `grad` at step `t` (from 1) and returns, per
    /// coordinate, the bias-corrected direction `m̂` and the effective step
    /// `lr / (√v̂ + ε)`.
    fn update(&mut self, grad: &[f64], t: u64, lr: f64) -> (Vec<f64>, Vec<f64>) {
        ensure_len(&mut self.m, grad.len());
        ensure_len(&mut self.v2, grad.len());
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        let mut direction = Vec::with_capacity(grad.len());
        let mut eff = Vec::with_capacity(grad.len());
        for ((m, v), &g) in self.m.iter_mut().zip(&mut self.v2).zip(grad) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            direction.push(*m / bc1);
            eff.push(lr / ((*v / bc2).sqrt() + self.eps));
        }
        (direction, eff)
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    moments: Moments,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            moments: Moments::new(beta1, beta2, eps),
            t: 0,
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut [f64], grad: &[f64], reg: Regularizer<'_>) -> Result<()> {
        check_grad("adam", self.t + 1, params, grad)?;
        self.t += 1;
        let g = penalized_grad(params, grad, reg);
        let (dir, eff) = self.moments.update(&g, self.t, self.lr);
        for ((p, d), e) in params.iter_mut().zip(dir).zip(eff) {
            *p -= e * d;
        }
        Ok(())
    }

    fn lr(&self) -> f64 {
        self.lr
    }

    fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    fn is_proximal(&self) -> bool {
        false
    }

    fn steps(&self) -> u64 {
        self.t
    }
}

/// Momentum coefficient `u_t = (t − 2) / (t + 1)`.
pub fn momentum_coefficient(t: u64) -> f64 {
    (t as f64 - 2.0) / (t as f64 + 1.0)
}

/// Accelerated recombination state shared by both proximal optimizers.
#[derive(Clone, Debug)]
struct Recombination {
    enabled: bool,
    v: Vec<f64>,
}

impl Recombination {
    /// Replaces `params` (holding `A_{t−1}`) with `A_t` given the prox point.
    fn apply(&mut self, params: &mut [f64], prox_point: &[f64], t: u64) {
        ensure_len(&mut self.v, params.len());
        let (u_prev, u_t) = if self.enabled {
            (momentum_coefficient(t - 1), momentum_coefficient(t))
        } else {
            (0.0, 0.0)
        };
        for ((a, v), &p) in params.iter_mut().zip(&mut self.v).zip(prox_point) {
            *v = p - *a + u_prev * *v;
            *a = p + u_t * *v;
        }
    }
}

/// Hierarchical accelerated proximal gradient.
#[derive(Clone, Debug)]
pub struct Hapg {
    lr: f64,
    recombination: Recombination,
    t: u64,
}

impl Hapg {
    pub fn new(lr: f64) -> Self {
        Hapg {
            lr,
            recombination: Recombination {
                enabled: true,
                v: Vec::new(),
            },
            t: 0,
        }
    }

    pub fn with_momentum(mut self, enabled: bool) -> Self {
        self.recombination.enabled = enabled;
        self
    }

    /// `v_{t}` after the last step.
    pub fn velocity(&self) -> &[f64] {
        &self.recombination.v
    }
}

impl Optimizer for Hapg {
    fn step(&mut self, params: &mut [f64], grad: &[f64], reg: Regularizer<'_>) -> Result<()> {
        check_grad("hapg", self.t + 1, params, grad)?;
        reg.groups.check_len(params.len())?;
        self.t += 1;
        let eta = self.lr;
        let mut p: Vec<f64> = params.iter().zip(grad).map(|(a, g)| a - eta * g).collect();
        if reg.active() {
            let l1 = vec![eta * reg.lambda * reg.alpha; p.len()];
            let group = vec![eta * reg.lambda * (1.0 - reg.alpha); reg.groups.num_groups()];
            prox_sgl_adaptive_in_place(&mut p, reg.groups, &l1, &group);
        }
        self.recombination.apply(params, &p, self.t);
        Ok(())
    }

    fn lr(&self) -> f64 {
        self.lr
    }

    fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    fn is_proximal(&self) -> bool {
        true
    }

    fn steps(&self) -> u64 {
        self.t
    }
}

/// Lower median: the `⌊(m−1)/2⌋`-th smallest value.
pub fn lower_median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted[(sorted.len() - 1) / 2]
}

/// HAPG with the forward step replaced by an Adam step. The L1 threshold of
/// each coordinate uses its own effective step; each group threshold uses the
/// median effective step over the group.
#[derive(Clone, Debug)]
pub struct AdamHapg {
    lr: f64,
    moments: Moments,
    recombination: Recombination,
    t: u64,
}

impl AdamHapg {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamHapg {
            lr,
            moments: Moments::new(beta1, beta2, eps),
            recombination: Recombination {
                enabled: true,
                v: Vec::new(),
            },
            t: 0,
        }
    }

    pub fn with_momentum(mut self, enabled: bool) -> Self {
        self.recombination.enabled = enabled;
        self
    }
}

/// Per-coordinate L1 thresholds and per-group thresholds for effective
/// steps `eff`.
pub(crate) fn adaptive_thresholds(eff: &[f64], groups: &GroupIndex, lambda: f64, alpha: f64) -> (Vec<f64>, Vec<f64>) {
    let l1 = eff.iter().map(|e| e * lambda * alpha).collect();
    let group = groups
        .groups()
        .iter()
        .map(|g| {
            let steps: Vec<f64> = g.iter().map(|&i| eff[i]).collect();
            lower_median(&steps) * lambda * (1.0 - alpha)
        })
        .collect();
    (l1, group)
}

impl Optimizer for AdamHapg {
    fn step(&mut self, params: &mut [f64], grad: &[f64], reg: Regularizer<'_>) -> Result<()> {
        check_grad("adam_hapg", self.t + 1, params, grad)?;
        reg.groups.check_len(params.len())?;
        self.t += 1;
        let (dir, eff) = self.moments.update(grad, self.t, self.lr);
        let mut p: Vec<f64> = params
            .iter()
            .zip(dir.iter().zip(&eff))
            .map(|(a, (d, e))| a - e * d)
            .collect();
        if reg.active() {
            let (l1, group) = adaptive_thresholds(&eff, reg.groups, reg.lambda, reg.alpha);
            prox_sgl_adaptive_in_place(&mut p, reg.groups, &l1, &group);
        }
        self.recombination.apply(params, &p, self.t);
        Ok(())
    }

    fn lr(&self) -> f64 {
        self.lr
    }

    fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    fn is_proximal(&self) -> bool {
        true
    }

    fn steps(&self) -> u64 {
        self.t
    }
}

/// Pathwise schedule `min(λ₀ + epoch·step, λ_max)`.
pub fn lambda_schedule(epoch: usize, config: &SglConfig) -> f64 {
    (config.lambda + epoch as f64 * config.lambda_step).min(config.lambda_max)
}

/// Cosine annealing `lr₀ · ½(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_initial: f64) -> f64 {
    if total_steps == 0 {
        return lr_initial;
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    lr_initial * 0.5 * (1.0 + (PI * frac).cos())
}

/// Rescales `grad` in place so its L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let c = max_norm / norm;
        for g in grad.iter_mut() {
            *g *= c;
        }
    }
    norm
}
