use rand::Rng;

use crate::autodiff::{ParamLayout, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::prox::GroupIndex;

/// Fully connected ReLU network. Weight matrices are stored `[in, out]`
/// row-major in one flat vector, biases in another, so a penalty can act on
/// the weights alone.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    weights: ParamLayout,
    biases: ParamLayout,
}

/// Flat weight and bias vectors of an [`Mlp`].
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Mlp {
    /// `sizes` lists input width, hidden widths and the class count.
    pub fn new(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!("invalid layer sizes {sizes:?}")));
        }
        let mut weights = ParamLayout::new();
        let mut biases = ParamLayout::new();
        for pair in sizes.windows(2) {
            weights.push(&[pair[0], pair[1]]);
            biases.push(&[pair[1]]);
        }
        Ok(Mlp {
            sizes: sizes.to_vec(),
            weights,
            biases,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn num_weights(&self) -> usize {
        self.weights.total()
    }

    pub fn weight_range(&self, layer: usize) -> std::ops::Range<usize> {
        self.weights.range(layer)
    }

    /// One group per row of every weight matrix: the outgoing weights of
    /// each input feature and of each hidden neuron.
    pub fn weight_groups(&self) -> GroupIndex {
        let sizes: Vec<usize> = self
            .sizes
            .windows(2)
            .flat_map(|p| std::iter::repeat_n(p[1], p[0]))
            .collect();
        GroupIndex::contiguous(&sizes).expect("rows are non-empty")
    }

    /// Uniform `±1/√fan_in` weights and zero biases.
    pub fn init<R: Rng>(&self, rng: &mut R) -> MlpParams {
        let mut weights = vec![0.0; self.weights.total()];
        for layer in 0..self.num_layers() {
            let bound = 1.0 / (self.sizes[layer] as f64).sqrt();
            for w in &mut weights[self.weights.range(layer)] {
                *w = rng.random_range(-bound..bound);
            }
        }
        MlpParams {
            weights,
            biases: vec![0.0; self.biases.total()],
        }
    }

    fn forward(&self, tape: &mut Tape, x: Var, w: &[Var], b: &[Var]) -> Result<Var> {
        let mut h = x;
        for layer in 0..self.num_layers() {
            h = tape.matmul(h, w[layer])?;
            h = tape.add_bias(h, b[layer])?;
            if layer + 1 < self.num_layers() {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    fn check(&self, p: &MlpParams) -> Result<()> {
        if p.weights.len() != self.weights.total() || p.biases.len() != self.biases.total() {
            return Err(Error::InvalidArgument(format!(
                "network needs {} weights and {} biases, got {} and {}",
                self.weights.total(),
                self.biases.total(),
                p.weights.len(),
                p.biases.len()
            )));
        }
        Ok(())
    }

    /// Mean cross-entropy with gradients `(loss, d weights, d biases)`.
    pub fn loss_grad(&self, p: &MlpParams, x: &Tensor, labels: &[usize]) -> Result<(f64, MlpParams)> {
        self.check(p)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = self.weights.bind(&mut tape, &p.weights, true);
        let bv = self.biases.bind(&mut tape, &p.biases, true);
        let logits = self.forward(&mut tape, xv, &wv, &bv)?;
        let loss = tape.cross_entropy(logits, labels)?;
        let grads = tape.backward(loss)?;
        Ok((
            tape.value(loss).data()[0],
            MlpParams {
                weights: self.weights.gather(&grads, &wv),
                biases: self.biases.gather(&grads, &bv),
            },
        ))
    }

    pub fn logits(&self, p: &MlpParams, x: &Tensor) -> Result<Tensor> {
        self.check(p)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = self.weights.bind(&mut tape, &p.weights, false);
        let bv = self.biases.bind(&mut tape, &p.biases, false);
        let logits = self.forward(&mut tape, xv, &wv, &bv)?;
        Ok(tape.value(logits).clone())
    }

    pub fn predict(&self, p: &MlpParams, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(p, x)?;
        let classes = self.sizes[self.sizes.len() - 1];
        Ok(logits
            .data()
            .chunks(classes)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }

    /// Input features with at least one nonzero outgoing weight.
    pub fn selected_features(&self, weights: &[f64]) -> usize {
        self.live_rows(weights, 0)
    }

    /// Hidden neurons with at least one nonzero outgoing weight.
    pub fn remaining_neurons(&self, weights: &[f64]) -> usize {
        (1..self.num_layers()).map(|l| self.live_rows(weights, l)).sum()
    }

    fn live_rows(&self, weights: &[f64], layer: usize) -> usize {
        let cols = self.sizes[layer + 1];
        weights[self.weights.range(layer)]
            .chunks(cols)
            .filter(|row| row.iter().any(|w| *w != 0.0))
            .count()
    }
}

/// The network with dead input features and hidden neurons physically
/// removed. Only the shapes shrink; surviving weights are copied unchanged.
#[derive(Clone, Debug, PartialEq)]
pub struct PrunedMlp {
    /// Kept input feature indices.
    pub inputs: Vec<usize>,
    pub net: Mlp,
    pub params: MlpParams,
}

impl PrunedMlp {
    /// Drops input features and hidden neurons whose outgoing rows are all
    /// zero. A dropped hidden neuron's bias can still reach later layers
    /// through its (zero) outgoing row only, so removing it is exact.
    pub fn from_masked(net: &Mlp, p: &MlpParams) -> Result<Self> {
        net.check(p)?;
        let sizes = net.sizes();
        let mut keep: Vec<Vec<usize>> = Vec::with_capacity(sizes.len());
        for layer in 0..net.num_layers() {
            let cols = sizes[layer + 1];
            keep.push(
                p.weights[net.weights.range(layer)]
                    .chunks(cols)
                    .enumerate()
                    .filter(|(_, row)| row.iter().any(|w| *w != 0.0))
                    .map(|(i, _)| i)
                    .collect(),
            );
        }
        keep.push((0..sizes[sizes.len() - 1]).collect());
        if keep.iter().any(Vec::is_empty) {
            return Err(Error::DegenerateArchitecture("a layer lost every unit".into()));
        }
        let new_sizes: Vec<usize> = keep.iter().map(Vec::len).collect();
        let pruned = Mlp::new(&new_sizes)?;
        let mut weights = Vec::with_capacity(pruned.num_weights());
        let mut biases = Vec::new();
        for layer in 0..net.num_layers() {
            let cols = sizes[layer + 1];
            let block = &p.weights[net.weights.range(layer)];
            for &r in &keep[layer] {
                for &c in &keep[layer + 1] {
                    weights.push(block[r * cols + c]);
                }
            }
            let b = &p.biases[net.biases.range(layer)];
            biases.extend(keep[layer + 1].iter().map(|&c| b[c]));
        }
        Ok(PrunedMlp {
            inputs: keep.swap_remove(0),
            net: pruned,
            params: MlpParams { weights, biases },
        })
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let (n, d) = x
            .dims2()
            .ok_or_else(|| Error::InvalidArgument("input must be a matrix".into()))?;
        let mut data = Vec::with_capacity(n * self.inputs.len());
        for row in x.data().chunks(d) {
            data.extend(self.inputs.iter().map(|&i| row[i]));
        }
        self.net.logits(&self.params, &Tensor::matrix(n, self.inputs.len(), data)?)
    }
}
