//! Define-by-run tape for reverse-mode differentiation.
//!
//! Every primitive evaluates eagerly, appends a node holding its value and
//! its parents, and returns a [`Var`] handle. [`Tape::backward`] walks the
//! nodes in reverse insertion order, which is a valid reverse topological
//! order because parents are always recorded before their children.

use super::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sum(Var),
    SumList(Vec<Var>),
    Concat(Vec<Var>, usize),
    WeightedSum {
        weights: Var,
        indices: Vec<usize>,
        terms: Vec<Var>,
    },
    /// Softmax probabilities are kept for the backward pass.
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros of `shape` if nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn matrix_dims(op: &'static str, a: &Tensor, other: &Tensor) -> Result<(usize, usize)> {
    a.dims2().ok_or_else(|| Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: other.shape().to_vec(),
    })
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf whose gradient is wanted.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push(value, op, requires_grad))
    }

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = matrix_dims("matmul", av, bv)?;
        let (k2, n) = matrix_dims("matmul", bv, av)?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let out = Tensor::new(vec![m, n], matmul_nn(av.data(), bv.data(), m, k, n))?;
        self.record("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("add", av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.record("add", out, Op::Add(a, b), &[a, b])
    }

    /// `[n,m] + [m]`, the bias is added to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, cols) = self.row_broadcast_dims("add_bias", x, bias)?;
        let (xv, bv) = (self.value(x).data(), self.value(bias).data());
        let mut data = xv.to_vec();
        for r in 0..m {
            for (o, b) in data[r * cols..(r + 1) * cols].iter_mut().zip(bv) {
                *o += b;
            }
        }
        let out = Tensor::new(vec![m, cols], data)?;
        self.record("add_bias", out, Op::AddBias(x, bias), &[x, bias])
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("mul", av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.record("mul", out, Op::Mul(a, b), &[a, b])
    }

    /// `[n,m] * [m]`, every row scaled elementwise.
    pub fn mul_row(&mut self, x: Var, scale: Var) -> Result<Var> {
        let (m, cols) = self.row_broadcast_dims("mul_row", x, scale)?;
        let (xv, sv) = (self.value(x).data(), self.value(scale).data());
        let mut data = xv.to_vec();
        for r in 0..m {
            for (o, s) in data[r * cols..(r + 1) * cols].iter_mut().zip(sv) {
                *o *= s;
            }
        }
        let out = Tensor::new(vec![m, cols], data)?;
        self.record("mul_row", out, Op::MulRow(x, scale), &[x, scale])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let av = self.value(a);
        let out = Tensor::new(av.shape().to_vec(), av.data().iter().map(|x| x * c).collect())?;
        self.record("scale", out, Op::Scale(a, c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.record("relu", out, Op::Relu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let out = Tensor::new(av.shape().to_vec(), av.data().iter().map(|x| x.tanh()).collect())?;
        self.record("tanh", out, Op::Tanh(a), &[a])
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data().iter().sum();
        self.record("sum", Tensor::scalar(total), Op::Sum(a), &[a])
    }

    pub fn sum_list(&mut self, terms: &[Var]) -> Result<Var> {
        let first = terms
            .first()
            .ok_or_else(|| Error::InvalidArgument("sum_list of no tensors".into()))?;
        let mut acc = self.value(*first).clone();
        for t in &terms[1..] {
            let tv = self.value(*t);
            same_shape("sum_list", &acc, tv)?;
            acc.add_assign(tv);
        }
        self.record("sum_list", acc, Op::SumList(terms.to_vec()), terms)
    }

    /// Concatenate along `axis`. Only the last axis of 2-D tensors and axis 0
    /// of any rank are supported, which is all the models here need.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of no tensors".into()))?;
        let shape0 = self.value(*first).shape().to_vec();
        match (axis, shape0.len()) {
            (0, _) => {
                let mut data = Vec::new();
                let mut rows = 0;
                for p in parts {
                    let pv = self.value(*p);
                    if pv.shape()[1..] != shape0[1..] {
                        return Err(Error::ShapeMismatch {
                            op: "concat",
                            lhs: shape0.clone(),
                            rhs: pv.shape().to_vec(),
                        });
                    }
                    rows += pv.shape()[0];
                    data.extend_from_slice(pv.data());
                }
                let mut shape = shape0.clone();
                shape[0] = rows;
                let out = Tensor::new(shape, data)?;
                self.record("concat", out, Op::Concat(parts.to_vec(), 0), parts)
            }
            (1, 2) => {
                let m = shape0[0];
                let mut widths = Vec::with_capacity(parts.len());
                for p in parts {
                    let pv = self.value(*p);
                    match pv.dims2() {
                        Some((r, c)) if r == m => widths.push(c),
                        _ => {
                            return Err(Error::ShapeMismatch {
                                op: "concat",
                                lhs: shape0.clone(),
                                rhs: pv.shape().to_vec(),
                            })
                        }
                    }
                }
                let total: usize = widths.iter().sum();
                let mut data = Vec::with_capacity(m * total);
                for r in 0..m {
                    for (p, &w) in parts.iter().zip(&widths) {
                        data.extend_from_slice(&self.value(*p).data()[r * w..(r + 1) * w]);
                    }
                }
                let out = Tensor::new(vec![m, total], data)?;
                self.record("concat", out, Op::Concat(parts.to_vec(), 1), parts)
            }
            _ => Err(Error::InvalidArgument(format!(
                "concat along axis {axis} of rank-{} tensors is not supported",
                shape0.len()
            ))),
        }
    }

    /// `sum_k weights[indices[k]] * terms[k]`.
    ///
    /// This is the mixed-edge combination: each candidate operation output is
    /// scaled by one scalar architecture weight and the results are summed.
    pub fn weighted_sum(&mut self, weights: Var, indices: &[usize], terms: &[Var]) -> Result<Var> {
        if indices.len() != terms.len() || terms.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "weighted_sum needs matching non-empty indices/terms, got {} and {}",
                indices.len(),
                terms.len()
            )));
        }
        let wv = self.value(weights);
        if let Some(&bad) = indices.iter().find(|&&i| i >= wv.len()) {
            return Err(Error::InvalidArgument(format!(
                "weighted_sum index {bad} out of range for {} weights",
                wv.len()
            )));
        }
        let coeffs: Vec<f64> = indices.iter().map(|&i| wv.data()[i]).collect();
        let mut acc = Tensor::zeros(self.value(terms[0]).shape());
        for (t, c) in terms.iter().zip(&coeffs) {
            let tv = self.value(*t);
            same_shape("weighted_sum", &acc, tv)?;
            for (o, x) in acc.data_mut().iter_mut().zip(tv.data()) {
                *o += c * x;
            }
        }
        let mut parents = terms.to_vec();
        parents.push(weights);
        let op = Op::WeightedSum {
            weights,
            indices: indices.to_vec(),
            terms: terms.to_vec(),
        };
        self.record("weighted_sum", acc, op, &parents)
    }

    /// Mean softmax cross-entropy of `[batch, classes]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (batch, classes) = lv.dims2().ok_or_else(|| {
            Error::InvalidArgument(format!("cross_entropy expects 2-D logits, got {:?}", lv.shape()))
        })?;
        if labels.len() != batch {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let mut probs = vec![0.0; batch * classes];
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &lv.data()[r * classes..(r + 1) * classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let norm: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let log_norm = norm.ln() + max;
            total += log_norm - row[label];
            for (p, x) in probs[r * classes..(r + 1) * classes].iter_mut().zip(row) {
                *p = (x - log_norm).exp();
            }
        }
        let loss = Tensor::scalar(total / batch as f64);
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.record("cross_entropy", loss, op, &[logits])
    }

    fn row_broadcast_dims(&self, op: &'static str, x: Var, row: Var) -> Result<(usize, usize)> {
        let (xv, rv) = (self.value(x), self.value(row));
        match (xv.dims2(), rv.shape()) {
            (Some((m, c)), [n]) if *n == c => Ok((m, c)),
            (Some((m, c)), [1, n]) if *n == c => Ok((m, c)),
            _ => Err(Error::ShapeMismatch {
                op,
                lhs: xv.shape().to_vec(),
                rhs: rv.shape().to_vec(),
            }),
        }
    }

    /// Reverse sweep from a scalar `loss`. Only nodes that require a gradient
    /// receive one.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        let mut seed = Tensor::zeros(lv.shape());
        seed.data_mut()[0] = 1.0;
        grads[loss.0] = Some(seed);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut accumulate = |var: Var, delta: Tensor| {
            if !self.nodes[var.0].requires_grad {
                return;
            }
            match &mut grads[var.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        let shaped = |like: &Tensor, data: Vec<f64>| {
            Tensor::new(like.shape().to_vec(), data).expect("gradient shape follows its node")
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.dims2().expect("matmul operand is 2-D");
                let n = bv.shape()[1];
                if self.requires_grad(*a) {
                    accumulate(*a, shaped(av, matmul_nt(g.data(), bv.data(), m, n, k)));
                }
                if self.requires_grad(*b) {
                    accumulate(*b, shaped(bv, matmul_tn(av.data(), g.data(), m, k, n)));
                }
            }
            Op::Add(a, b) => {
                accumulate(*a, g.clone());
                accumulate(*b, g.clone());
            }
            Op::AddBias(x, bias) => {
                accumulate(*x, g.clone());
                let bv = self.value(*bias);
                let cols = bv.len();
                let mut db = vec![0.0; cols];
                for row in g.data().chunks(cols) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                accumulate(*bias, shaped(bv, db));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = g.data().iter().zip(bv.data()).map(|(g, y)| g * y).collect();
                let db = g.data().iter().zip(av.data()).map(|(g, x)| g * x).collect();
                accumulate(*a, shaped(av, da));
                accumulate(*b, shaped(bv, db));
            }
            Op::MulRow(x, scale) => {
                let (xv, sv) = (self.value(*x), self.value(*scale));
                let cols = sv.len();
                let mut dx = g.data().to_vec();
                let mut ds = vec![0.0; cols];
                for (r, grow) in g.data().chunks(cols).enumerate() {
                    let xrow = &xv.data()[r * cols..(r + 1) * cols];
                    for c in 0..cols {
                        dx[r * cols + c] = grow[c] * sv.data()[c];
                        ds[c] += grow[c] * xrow[c];
                    }
                }
                accumulate(*x, shaped(xv, dx));
                accumulate(*scale, shaped(sv, ds));
            }
            Op::Scale(a, c) => {
                accumulate(*a, shaped(g, g.data().iter().map(|v| v * c).collect()));
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(*a, shaped(av, d));
            }
            Op::Tanh(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect();
                accumulate(*a, shaped(&node.value, d));
            }
            Op::Sum(a) => {
                let av = self.value(*a);
                accumulate(*a, shaped(av, vec![g.data()[0]; av.len()]));
            }
            Op::SumList(terms) => {
                for t in terms {
                    accumulate(*t, g.clone());
                }
            }
            Op::Concat(parts, axis) => {
                let out_shape = node.value.shape();
                if *axis == 0 {
                    let mut offset = 0;
                    for p in parts {
                        let pv = self.value(*p);
                        let len = pv.len();
                        accumulate(*p, shaped(pv, g.data()[offset..offset + len].to_vec()));
                        offset += len;
                    }
                } else {
                    let (m, total) = (out_shape[0], out_shape[1]);
                    let mut offset = 0;
                    for p in parts {
                        let pv = self.value(*p);
                        let w = pv.shape()[1];
                        let mut d = Vec::with_capacity(m * w);
                        for r in 0..m {
                            d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(*p, shaped(pv, d));
                        offset += w;
                    }
                }
            }
            Op::WeightedSum {
                weights,
                indices,
                terms,
            } => {
                let wv = self.value(*weights);
                let mut dw = vec![0.0; wv.len()];
                for (t, &i) in terms.iter().zip(indices) {
                    let tv = self.value(*t);
                    dw[i] += g.data().iter().zip(tv.data()).map(|(g, x)| g * x).sum::<f64>();
                    if self.requires_grad(*t) {
                        let c = wv.data()[i];
                        accumulate(*t, shaped(tv, g.data().iter().map(|v| v * c).collect()));
                    }
                }
                accumulate(*weights, shaped(wv, dw));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let lv = self.value(*logits);
                let classes = lv.shape()[1];
                let scale = g.data()[0] / labels.len() as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &label) in labels.iter().enumerate() {
                    d[r * classes + label] -= scale;
                }
                accumulate(*logits, shaped(lv, d));
            }
        }
    }
}
