use super::{Gradients, Tape, Tensor, Var};

/// Shapes of a list of parameter tensors stored back to back in one flat
/// `f64` vector, so optimizers can work on plain slices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamLayout {
    shapes: Vec<Vec<usize>>,
    offsets: Vec<usize>,
    total: usize,
}

impl ParamLayout {
    pub fn new() -> Self {
        ParamLayout::default()
    }

    /// Appends a slot and returns its index.
    pub fn push(&mut self, shape: &[usize]) -> usize {
        self.shapes.push(shape.to_vec());
        self.offsets.push(self.total);
        self.total += shape.iter().product::<usize>();
        self.shapes.len() - 1
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn num_slots(&self) -> usize {
        self.shapes.len()
    }

    pub fn shape(&self, slot: usize) -> &[usize] {
        &self.shapes[slot]
    }

    pub fn range(&self, slot: usize) -> std::ops::Range<usize> {
        let start = self.offsets[slot];
        start..start + self.shapes[slot].iter().product::<usize>()
    }

    /// Records every slot of `flat` as a leaf.
    pub fn bind(&self, tape: &mut Tape, flat: &[f64], requires_grad: bool) -> Vec<Var> {
        debug_assert_eq!(flat.len(), self.total);
        (0..self.num_slots())
            .map(|s| {
                let t = Tensor::new(self.shapes[s].clone(), flat[self.range(s)].to_vec())
                    .expect("slot shape matches its range");
                if requires_grad {
                    tape.param(t)
                } else {
                    tape.constant(t)
                }
            })
            .collect()
    }

    /// Flattens the gradients of bound slots; slots that received nothing
    /// contribute zeros.
    pub fn gather(&self, grads: &Gradients, vars: &[Var]) -> Vec<f64> {
        let mut out = vec![0.0; self.total];
        for (s, v) in vars.iter().enumerate() {
            if let Some(g) = grads.get(*v) {
                out[self.range(s)].copy_from_slice(g.data());
            }
        }
        out
    }
}
