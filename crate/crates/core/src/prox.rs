//! Proximal maps for the sparse-group-lasso penalty
//!
//! `Ω(x) = λα‖x‖₁ + λ(1−α) Σₙ √mₙ ‖x₍ₙ₎‖₂`
//!
//! where `mₙ` is the cardinality of group `n`. Its proximal map is the
//! group shrink applied to the soft-thresholded input (L1 first), and every
//! threshold that binds yields a bitwise `0.0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Disjoint, non-empty coordinate groups covering `0..len`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupIndex {
    groups: Vec<Vec<usize>>,
    len: usize,
}

impl GroupIndex {
    pub fn new(groups: Vec<Vec<usize>>, len: usize) -> Result<Self> {
        let mut seen = vec![false; len];
        for (n, g) in groups.iter().enumerate() {
            if g.is_empty() {
                return Err(Error::InvalidGroups(format!("group {n} is empty")));
            }
            for &i in g {
                if i >= len {
                    return Err(Error::InvalidGroups(format!(
                        "group {n} holds index {i} outside 0..{len}"
                    )));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::InvalidGroups(format!("index {i} appears in more than one group")));
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidGroups(format!("index {i} is not covered by any group")));
        }
        Ok(GroupIndex { groups, len })
    }

    /// Consecutive groups with the given sizes.
    pub fn contiguous(sizes: &[usize]) -> Result<Self> {
        let mut start = 0;
        let groups = sizes
            .iter()
            .map(|&s| {
                let g: Vec<usize> = (start..start + s).collect();
                start += s;
                g
            })
            .collect();
        GroupIndex::new(groups, start)
    }

    /// One group per coordinate.
    pub fn singletons(len: usize) -> Self {
        GroupIndex {
            groups: (0..len).map(|i| vec![i]).collect(),
            len,
        }
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    /// Length of the vector the groups partition.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub(crate) fn check_len(&self, n: usize) -> Result<()> {
        if n != self.len {
            return Err(Error::InvalidGroups(format!(
                "groups cover {} coordinates but the vector has {n}",
                self.len
            )));
        }
        Ok(())
    }
}

/// Penalty strength, balance and the pathwise increase of λ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SglConfig {
    pub lambda: f64,
    pub alpha: f64,
    /// Linear increment of λ per epoch.
    pub lambda_step: f64,
    pub lambda_max: f64,
}

impl Default for SglConfig {
    fn default() -> Self {
        SglConfig {
            lambda: 0.0,
            alpha: 0.5,
            lambda_step: 0.01,
            lambda_max: f64::INFINITY,
        }
    }
}

impl SglConfig {
    pub fn validate(&self) -> Result<()> {
        check_lambda_alpha(self.lambda, self.alpha)?;
        if !(self.lambda_step >= 0.0) {
            return Err(Error::InvalidArgument(format!("lambda_step must be >= 0, got {}", self.lambda_step)));
        }
        if !(self.lambda_max >= self.lambda) {
            return Err(Error::InvalidArgument(format!(
                "lambda_max ({}) must be >= lambda ({})",
                self.lambda_max, self.lambda
            )));
        }
        Ok(())
    }
}

fn check_lambda_alpha(lambda: f64, alpha: f64) -> Result<()> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(())
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau >= 0.0) {
        return Err(Error::InvalidArgument(format!("threshold must be >= 0, got {tau}")));
    }
    Ok(())
}

#[inline]
fn soft_threshold(z: f64, tau: f64) -> f64 {
    let mag = z.abs() - tau;
    if mag > 0.0 {
        mag.copysign(z)
    } else {
        0.0
    }
}

fn l2_norm(values: impl Iterator<Item = f64>) -> f64 {
    values.map(|v| v * v).sum::<f64>().sqrt()
}

/// Elementwise soft-threshold `sgn(zᵢ)(|zᵢ| − τ)₊`.
pub fn prox_l1(z: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    Ok(z.iter().map(|&v| soft_threshold(v, tau)).collect())
}

/// Group shrink `(1 − √mₙ τ / ‖z₍ₙ₎‖₂)₊ z₍ₙ₎`; all-zero groups stay zero.
pub fn prox_group_l2(z: &[f64], groups: &GroupIndex, tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    groups.check_len(z.len())?;
    let mut out = z.to_vec();
    let taus = vec![tau; groups.num_groups()];
    group_shrink_in_place(&mut out, groups, &taus);
    Ok(out)
}

/// Sparse-group-lasso proximal map with step `eta`.
pub fn prox_sgl(z: &[f64], groups: &GroupIndex, eta: f64, lambda: f64, alpha: f64) -> Result<Vec<f64>> {
    if !(eta > 0.0) {
        return Err(Error::InvalidArgument(format!("step size must be > 0, got {eta}")));
    }
    check_lambda_alpha(lambda, alpha)?;
    let l1 = prox_l1(z, eta * lambda * alpha)?;
    prox_group_l2(&l1, groups, eta * lambda * (1.0 - alpha))
}

/// Hierarchical map with per-coordinate L1 thresholds and per-group
/// group thresholds (the √mₙ factor is applied on top of `group_taus[n]`).
pub(crate) fn prox_sgl_adaptive_in_place(
    z: &mut [f64],
    groups: &GroupIndex,
    l1_taus: &[f64],
    group_taus: &[f64],
) {
    debug_assert_eq!(z.len(), l1_taus.len());
    debug_assert_eq!(groups.num_groups(), group_taus.len());
    for (v, &t) in z.iter_mut().zip(l1_taus) {
        *v = soft_threshold(*v, t);
    }
    group_shrink_in_place(z, groups, group_taus);
}

fn group_shrink_in_place(z: &mut [f64], groups: &GroupIndex, taus: &[f64]) {
    for (g, &tau) in groups.groups().iter().zip(taus) {
        if tau == 0.0 {
            continue;
        }
        let norm = l2_norm(g.iter().map(|&i| z[i]));
        let threshold = (g.len() as f64).sqrt() * tau;
        if norm <= threshold {
            for &i in g {
                z[i] = 0.0;
            }
        } else {
            let factor = 1.0 - threshold / norm;
            for &i in g {
                z[i] *= factor;
            }
        }
    }
}

/// `λα‖a‖₁ + λ(1−α) Σₙ √mₙ ‖a₍ₙ₎‖₂`
pub fn sgl_penalty(a: &[f64], groups: &GroupIndex, lambda: f64, alpha: f64) -> f64 {
    let l1: f64 = a.iter().map(|v| v.abs()).sum();
    let group: f64 = groups
        .groups()
        .iter()
        .map(|g| (g.len() as f64).sqrt() * l2_norm(g.iter().map(|&i| a[i])))
        .sum();
    lambda * alpha * l1 + lambda * (1.0 - alpha) * group
}

/// A subgradient of the penalty, using 0 for |x| at 0 and for ‖x₍ₙ₎‖ at an
/// all-zero group. Used by the non-proximal baselines.
pub fn sgl_subgradient(a: &[f64], groups: &GroupIndex, lambda: f64, alpha: f64) -> Vec<f64> {
    let mut out: Vec<f64> = a
        .iter()
        .map(|&v| if v == 0.0 { 0.0 } else { lambda * alpha * v.signum() })
        .collect();
    for g in groups.groups() {
        let norm = l2_norm(g.iter().map(|&i| a[i]));
        if norm > 0.0 {
            let c = lambda * (1.0 - alpha) * (g.len() as f64).sqrt() / norm;
            for &i in g {
                out[i] += c * a[i];
            }
        }
    }
    out
}

const BRUTE_FORCE_MAX_DIM: usize = 32;
const BRUTE_FORCE_MAX_ITERS: usize = 2_000_000;
const BRUTE_FORCE_GAP_TOL: f64 = 1e-14;
const BRUTE_FORCE_SNAP: f64 = 1e-7;

/// Reference solution of `argminₓ ½‖x − z‖² + η Ω(x)` that never calls the
/// closed-form maps above.
///
/// Each group is solved through its dual: `x = z − u − v` with `u` in the
/// box `‖u‖∞ ≤ ηλα` and `v` in the ball `‖v‖₂ ≤ ηλ(1−α)√mₙ`, minimising
/// `½‖z − u − v‖²` by exact alternating minimisation over `u` (a clip) and
/// `v` (a ball projection). Iteration stops once the primal-dual gap is below
/// 1e-14, which bounds `‖x − x*‖ ≤ √(2·gap)` by strong convexity. Coordinates
/// with `|xᵢ| < 1e-7` are snapped to zero.
pub fn brute_force_prox(z: &[f64], groups: &GroupIndex, eta: f64, lambda: f64, alpha: f64) -> Result<Vec<f64>> {
    if z.len() > BRUTE_FORCE_MAX_DIM {
        return Err(Error::InvalidArgument(format!(
            "brute-force prox is limited to {BRUTE_FORCE_MAX_DIM} coordinates, got {}",
            z.len()
        )));
    }
    if !(eta > 0.0) {
        return Err(Error::InvalidArgument(format!("step size must be > 0, got {eta}")));
    }
    check_lambda_alpha(lambda, alpha)?;
    groups.check_len(z.len())?;

    let box_radius = eta * lambda * alpha;
    let mut out = vec![0.0; z.len()];
    for g in groups.groups() {
        let zg: Vec<f64> = g.iter().map(|&i| z[i]).collect();
        let ball_radius = eta * lambda * (1.0 - alpha) * (g.len() as f64).sqrt();
        let xg = dual_alternating_solve(&zg, box_radius, ball_radius)?;
        for (&i, x) in g.iter().zip(xg) {
            out[i] = if x.abs() < BRUTE_FORCE_SNAP { 0.0 } else { x };
        }
    }
    Ok(out)
}

fn dual_alternating_solve(z: &[f64], box_radius: f64, ball_radius: f64) -> Result<Vec<f64>> {
    let m = z.len();
    let mut u = vec![0.0; m];
    let mut v = vec![0.0; m];
    let mut x = z.to_vec();
    let z_sq: f64 = z.iter().map(|a| a * a).sum();
    for _ in 0..BRUTE_FORCE_MAX_ITERS {
        for i in 0..m {
            u[i] = (z[i] - v[i]).clamp(-box_radius, box_radius);
        }
        let r: Vec<f64> = (0..m).map(|i| z[i] - u[i]).collect();
        let rn = l2_norm(r.iter().copied());
        let shrink = if rn > ball_radius { ball_radius / rn } else { 1.0 };
        for i in 0..m {
            v[i] = r[i] * shrink;
            x[i] = z[i] - u[i] - v[i];
        }
        let x_sq: f64 = x.iter().map(|a| a * a).sum();
        let diff_sq: f64 = (0..m).map(|i| (x[i] - z[i]).powi(2)).sum();
        let primal = 0.5 * diff_sq + box_radius * x.iter().map(|a| a.abs()).sum::<f64>() + ball_radius * x_sq.sqrt();
        let dual = 0.5 * z_sq - 0.5 * x_sq;
        if primal - dual <= BRUTE_FORCE_GAP_TOL {
            return Ok(x);
        }
    }
    Err(Error::NoConvergence(BRUTE_FORCE_MAX_ITERS))
}
