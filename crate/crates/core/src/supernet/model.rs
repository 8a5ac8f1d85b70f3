use rand::Rng;

use super::cell::{cell_forward, CellOutput, CellSpec};
use super::derive::DerivedArch;
use crate::autodiff::{ParamLayout, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Loss value with gradients for the network weights and the architecture
/// weights. Either gradient is empty when it was not requested.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad_w: Vec<f64>,
    pub grad_a: Vec<f64>,
}

/// One `tanh(x W + b)` stem per cell input.
#[derive(Clone, Debug, PartialEq)]
struct Stems {
    slots: Vec<(usize, usize)>,
}

impl Stems {
    fn new(layout: &mut ParamLayout, count: usize, input_dim: usize, dim: usize) -> Self {
        let slots = (0..count)
            .map(|_| (layout.push(&[input_dim, dim]), layout.push(&[dim])))
            .collect();
        Stems { slots }
    }

    fn forward(&self, tape: &mut Tape, x: Var, vars: &[Var]) -> Result<Vec<Var>> {
        self.slots
            .iter()
            .map(|&(w, b)| {
                let h = tape.matmul(x, vars[w])?;
                let h = tape.add_bias(h, vars[b])?;
                tape.tanh(h)
            })
            .collect()
    }

    fn init<R: Rng>(&self, layout: &ParamLayout, flat: &mut [f64], rng: &mut R) {
        for &(w, _) in &self.slots {
            let fan_in = layout.shape(w)[0] as f64;
            let bound = 1.0 / fan_in.sqrt();
            for v in &mut flat[layout.range(w)] {
                *v = rng.random_range(-bound..bound);
            }
        }
    }
}

fn init_head<R: Rng>(layout: &ParamLayout, slot: usize, flat: &mut [f64], rng: &mut R) {
    let bound = 1.0 / (layout.shape(slot)[0] as f64).sqrt();
    for v in &mut flat[layout.range(slot)] {
        *v = rng.random_range(-bound..bound);
    }
}

fn check_batch(x: &Tensor, labels: &[usize], input_dim: usize) -> Result<()> {
    match x.dims2() {
        Some((n, d)) if d == input_dim && n == labels.len() => Ok(()),
        _ => Err(Error::ShapeMismatch {
            op: "batch",
            lhs: x.shape().to_vec(),
            rhs: vec![labels.len(), input_dim],
        }),
    }
}

fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let (_, c) = logits.dims2().expect("logits are a matrix");
    logits
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// Stems, one searched cell and a linear classifier over the cell output.
///
/// Network weights live in one flat vector described by a [`ParamLayout`];
/// the architecture weights are a separate vector.
#[derive(Clone, Debug, PartialEq)]
pub struct SupernetModel {
    cell: CellSpec,
    input_dim: usize,
    num_classes: usize,
    layout: ParamLayout,
    stems: Stems,
    /// Parameter slots of the operation at each architecture index.
    op_slots: Vec<Vec<usize>>,
    head: (usize, usize),
}

impl SupernetModel {
    pub fn new(cell: CellSpec, input_dim: usize, num_classes: usize) -> Result<Self> {
        cell.validate()?;
        if input_dim == 0 || num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "need a positive input width and at least 2 classes, got {input_dim} and {num_classes}"
            )));
        }
        let d = cell.feature_dim;
        let mut layout = ParamLayout::new();
        let stems = Stems::new(&mut layout, cell.num_inputs, input_dim, d);
        let mut op_slots = Vec::with_capacity(cell.num_arch_weights());
        for _ in cell.edges() {
            for op in &cell.op_set {
                op_slots.push(op.param_shapes(d).iter().map(|s| layout.push(s)).collect());
            }
        }
        let head = (layout.push(&[cell.output_dim(), num_classes]), layout.push(&[num_classes]));
        Ok(SupernetModel {
            cell,
            input_dim,
            num_classes,
            layout,
            stems,
            op_slots,
            head,
        })
    }

    pub fn cell(&self) -> &CellSpec {
        &self.cell
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_params(&self) -> usize {
        self.layout.total()
    }

    pub fn init_params<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let mut flat = vec![0.0; self.layout.total()];
        self.stems.init(&self.layout, &mut flat, rng);
        for (k, slots) in self.op_slots.iter().enumerate() {
            let op = self.cell.op_set[k % self.cell.op_set.len()];
            for (slot, values) in slots.iter().zip(op.init_params(self.cell.feature_dim, rng)) {
                flat[self.layout.range(*slot)].copy_from_slice(&values);
            }
        }
        init_head(&self.layout, self.head.0, &mut flat, rng);
        flat
    }

    /// Records the forward pass and returns the logits.
    pub fn forward(&self, tape: &mut Tape, x: Var, w: &[Var], arch: Var) -> Result<Var> {
        let inputs = self.stems.forward(tape, x, w)?;
        let op_params: Vec<Vec<Var>> = self
            .op_slots
            .iter()
            .map(|slots| slots.iter().map(|&s| w[s]).collect())
            .collect();
        let out = cell_forward(tape, &self.cell, &inputs, arch, &op_params)?;
        let logits = tape.matmul(out, w[self.head.0])?;
        tape.add_bias(logits, w[self.head.1])
    }

    fn check(&self, w: &[f64], a: &[f64]) -> Result<()> {
        if w.len() != self.num_params() || a.len() != self.cell.num_arch_weights() {
            return Err(Error::InvalidArgument(format!(
                "model needs {} network and {} architecture weights, got {} and {}",
                self.num_params(),
                self.cell.num_arch_weights(),
                w.len(),
                a.len()
            )));
        }
        Ok(())
    }

    /// Mean cross-entropy and the requested gradients.
    pub fn loss_grad(
        &self,
        w: &[f64],
        a: &[f64],
        x: &Tensor,
        labels: &[usize],
        need_w: bool,
        need_a: bool,
    ) -> Result<LossGrad> {
        self.check(w, a)?;
        check_batch(x, labels, self.input_dim)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = self.layout.bind(&mut tape, w, need_w);
        let av = if need_a {
            tape.param(Tensor::vector(a.to_vec()))
        } else {
            tape.constant(Tensor::vector(a.to_vec()))
        };
        let logits = self.forward(&mut tape, xv, &wv, av)?;
        let loss = tape.cross_entropy(logits, labels)?;
        let value = tape.value(loss).data()[0];
        if !need_w && !need_a {
            return Ok(LossGrad {
                loss: value,
                grad_w: Vec::new(),
                grad_a: Vec::new(),
            });
        }
        let grads = tape.backward(loss)?;
        Ok(LossGrad {
            loss: value,
            grad_w: if need_w { self.layout.gather(&grads, &wv) } else { Vec::new() },
            grad_a: if need_a {
                grads.get_or_zeros(av, &[a.len()]).into_data()
            } else {
                Vec::new()
            },
        })
    }

    pub fn logits(&self, w: &[f64], a: &[f64], x: &Tensor) -> Result<Tensor> {
        self.check(w, a)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = self.layout.bind(&mut tape, w, false);
        let av = tape.constant(Tensor::vector(a.to_vec()));
        let logits = self.forward(&mut tape, xv, &wv, av)?;
        Ok(tape.value(logits).clone())
    }

    pub fn predict(&self, w: &[f64], a: &[f64], x: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(w, a, x)?))
    }
}

/// Stand-alone network built from a derived architecture. Only active nodes
/// are computed and concatenated; the kept edge weights are trainable and
/// stored in the last parameter slot.
#[derive(Clone, Debug, PartialEq)]
pub struct DerivedModel {
    arch: DerivedArch,
    feature_dim: usize,
    output: CellOutput,
    input_dim: usize,
    num_classes: usize,
    layout: ParamLayout,
    stems: Stems,
    edge_slots: Vec<Vec<usize>>,
    head: (usize, usize),
    edge_weights: usize,
}

impl DerivedModel {
    pub fn new(
        arch: DerivedArch,
        feature_dim: usize,
        output: CellOutput,
        input_dim: usize,
        num_classes: usize,
    ) -> Result<Self> {
        arch.validate()?;
        if feature_dim == 0 || input_dim == 0 || num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "invalid derived model sizes: feature_dim {feature_dim}, input_dim {input_dim}, classes {num_classes}"
            )));
        }
        let mut layout = ParamLayout::new();
        let stems = Stems::new(&mut layout, arch.num_inputs, input_dim, feature_dim);
        let edge_slots = arch
            .kept_edges
            .iter()
            .map(|e| e.op.param_shapes(feature_dim).iter().map(|s| layout.push(s)).collect())
            .collect();
        let out_dim = match output {
            CellOutput::Concat => arch.active_nodes.len() * feature_dim,
            CellOutput::Sum => feature_dim,
        };
        let head = (layout.push(&[out_dim, num_classes]), layout.push(&[num_classes]));
        let edge_weights = layout.push(&[arch.kept_edges.len()]);
        Ok(DerivedModel {
            arch,
            feature_dim,
            output,
            input_dim,
            num_classes,
            layout,
            stems,
            edge_slots,
            head,
            edge_weights,
        })
    }

    pub fn arch(&self) -> &DerivedArch {
        &self.arch
    }

    pub fn num_params(&self) -> usize {
        self.layout.total()
    }

    /// Fresh operation, stem and head parameters. Edge weights start from
    /// the derived values.
    pub fn init_params<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let mut flat = vec![0.0; self.layout.total()];
        self.stems.init(&self.layout, &mut flat, rng);
        for (e, slots) in self.arch.kept_edges.iter().zip(&self.edge_slots) {
            for (slot, values) in slots.iter().zip(e.op.init_params(self.feature_dim, rng)) {
                flat[self.layout.range(*slot)].copy_from_slice(&values);
            }
        }
        init_head(&self.layout, self.head.0, &mut flat, rng);
        let weights: Vec<f64> = self.arch.kept_edges.iter().map(|e| e.weight).collect();
        flat[self.layout.range(self.edge_weights)].copy_from_slice(&weights);
        flat
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, w: &[Var]) -> Result<Var> {
        let stems = self.stems.forward(tape, x, w)?;
        let n_nodes = self.arch.active_nodes.last().map_or(0, |n| n + 1);
        let mut nodes: Vec<Option<Var>> = vec![None; n_nodes.max(self.arch.num_inputs)];
        for (i, s) in stems.into_iter().enumerate() {
            nodes[i] = Some(s);
        }
        for &node in &self.arch.active_nodes {
            let mut terms = Vec::new();
            let mut indices = Vec::new();
            for (k, e) in self.arch.kept_edges.iter().enumerate().filter(|(_, e)| e.to == node) {
                let src = nodes[e.from].expect("validated edges start at computed nodes");
                let params: Vec<Var> = self.edge_slots[k].iter().map(|&s| w[s]).collect();
                terms.push(e.op.apply(tape, src, &params)?);
                indices.push(k);
            }
            nodes[node] = Some(tape.weighted_sum(w[self.edge_weights], &indices, &terms)?);
        }
        let outputs: Vec<Var> = self
            .arch
            .active_nodes
            .iter()
            .map(|&n| nodes[n].expect("active node computed"))
            .collect();
        let out = match self.output {
            CellOutput::Concat => tape.concat(&outputs, 1)?,
            CellOutput::Sum => tape.sum_list(&outputs)?,
        };
        let logits = tape.matmul(out, w[self.head.0])?;
        tape.add_bias(logits, w[self.head.1])
    }

    pub fn loss_grad(&self, w: &[f64], x: &Tensor, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
        if w.len() != self.num_params() {
            return Err(Error::InvalidArgument(format!(
                "derived model needs {} weights, got {}",
                self.num_params(),
                w.len()
            )));
        }
        check_batch(x, labels, self.input_dim)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = self.layout.bind(&mut tape, w, true);
        let logits = self.forward(&mut tape, xv, &wv)?;
        let loss = tape.cross_entropy(logits, labels)?;
        let grads = tape.backward(loss)?;
        Ok((tape.value(loss).data()[0], self.layout.gather(&grads, &wv)))
    }

    pub fn predict(&self, w: &[f64], x: &Tensor) -> Result<Vec<usize>> {
        if x.dims2().map(|(_, d)| d) != Some(self.input_dim) {
            return Err(Error::ShapeMismatch {
                op: "predict",
                lhs: x.shape().to_vec(),
                rhs: vec![0, self.input_dim],
            });
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = self.layout.bind(&mut tape, w, false);
        let logits = self.forward(&mut tape, xv, &wv)?;
        Ok(argmax_rows(tape.value(logits)))
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }
}
