use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{grad_check, Tape, Tensor, Var};

fn small_cell() -> CellSpec {
    CellSpec {
        feature_dim: 4,
        ..CellSpec::default()
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Fixed inputs and operation parameters for one cell.
struct Fixture {
    cell: CellSpec,
    inputs: Vec<Tensor>,
    params: Vec<Vec<Tensor>>,
}

impl Fixture {
    fn new(cell: CellSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cell.feature_dim;
        let inputs = (0..cell.num_inputs).map(|_| random_tensor(&mut rng, &[3, d])).collect();
        let mut params = Vec::new();
        for _ in cell.edges() {
            for op in &cell.op_set {
                let p = op
                    .param_shapes(d)
                    .into_iter()
                    .map(|s| random_tensor(&mut rng, &s))
                    .collect();
                params.push(p);
            }
        }
        Fixture { cell, inputs, params }
    }

    fn record(&self, tape: &mut Tape, arch: Var) -> Var {
        let inputs: Vec<Var> = self.inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let params: Vec<Vec<Var>> = self
            .params
            .iter()
            .map(|ps| ps.iter().map(|t| tape.constant(t.clone())).collect())
            .collect();
        cell_forward(tape, &self.cell, &inputs, arch, &params).unwrap()
    }

    fn forward(&self, a: &[f64]) -> Tensor {
        let mut tape = Tape::new();
        let arch = tape.constant(Tensor::vector(a.to_vec()));
        let out = self.record(&mut tape, arch);
        tape.value(out).clone()
    }
}

fn random_arch(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

#[test]
fn arch_gradient_matches_finite_differences() {
    for seed in 0..5 {
        let fx = Fixture::new(small_cell(), seed);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let a = Tensor::vector(random_arch(&mut rng, fx.cell.num_arch_weights()));
        let err = grad_check(
            |tape, arch| {
                let out = fx.record(tape, arch);
                let t = tape.tanh(out)?;
                tape.sum(t)
            },
            &a,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

/// Only a single layer of nodes is linear in A: deeper nodes multiply
/// weights of successive edges.
#[test]
fn single_node_forward_is_linear_in_arch_weights() {
    let cell = CellSpec {
        num_intermediate: 1,
        ..small_cell()
    };
    let fx = Fixture::new(cell, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = fx.cell.num_arch_weights();
    let a1 = random_arch(&mut rng, n);
    let a2 = random_arch(&mut rng, n);
    let sum: Vec<f64> = a1.iter().zip(&a2).map(|(x, y)| x + y).collect();
    let f1 = fx.forward(&a1);
    let f2 = fx.forward(&a2);
    let fs = fx.forward(&sum);
    for ((s, x), y) in fs.data().iter().zip(f1.data()).zip(f2.data()) {
        assert!((s - (x + y)).abs() < 1e-10);
    }
    let scaled: Vec<f64> = a1.iter().map(|x| 2.5 * x).collect();
    let fc = fx.forward(&scaled);
    for (c, x) in fc.data().iter().zip(f1.data()) {
        assert!((c - 2.5 * x).abs() < 1e-10);
    }
}

#[test]
fn deeper_cells_are_not_linear_in_arch_weights() {
    let fx = Fixture::new(small_cell(), 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random_arch(&mut rng, fx.cell.num_arch_weights());
    let doubled: Vec<f64> = a.iter().map(|x| 2.0 * x).collect();
    let f1 = fx.forward(&a);
    let f2 = fx.forward(&doubled);
    let gap = f2.data().iter().zip(f1.data()).map(|(y, x)| (y - 2.0 * x).abs()).fold(0.0, f64::max);
    assert!(gap > 1e-3);
}

#[test]
fn one_hot_weight_selects_a_single_operation() {
    let fx = Fixture::new(small_cell(), 5);
    let mut a = vec![0.0; fx.cell.num_arch_weights()];
    // edge 0 is 0 -> 2; op 1 is linear
    a[fx.cell.arch_index(0, 1)] = 1.0;
    let out = fx.forward(&a);

    let mut tape = Tape::new();
    let x = tape.constant(fx.inputs[0].clone());
    let w = tape.constant(fx.params[1][0].clone());
    let expected = tape.matmul(x, w).unwrap();
    let expected = tape.value(expected);

    let d = fx.cell.feature_dim;
    let width = fx.cell.output_dim();
    for r in 0..3 {
        let row = &out.data()[r * width..(r + 1) * width];
        assert_eq!(&row[..d], &expected.data()[r * d..(r + 1) * d]);
        assert!(row[d..].iter().all(|v| *v == 0.0));
    }
}

#[test]
fn zero_weights_give_zero_nodes() {
    let fx = Fixture::new(small_cell(), 6);
    let out = fx.forward(&vec![0.0; fx.cell.num_arch_weights()]);
    assert!(out.data().iter().all(|v| *v == 0.0));
}

#[test]
fn convex_combination_of_identities_is_the_input() {
    let cell = CellSpec {
        num_inputs: 1,
        num_intermediate: 1,
        op_set: vec![OpKind::Identity, OpKind::ElementwiseScale],
        feature_dim: 3,
        output: CellOutput::Concat,
    };
    let mut fx = Fixture::new(cell, 7);
    fx.params[1] = vec![Tensor::vector(vec![1.0; 3])];
    let out = fx.forward(&[0.3, 0.7]);
    for (o, x) in out.data().iter().zip(fx.inputs[0].data()) {
        assert!((o - x).abs() < 1e-15);
    }
}

#[test]
fn zeroing_pruned_weights_is_bitwise_neutral() {
    let fx = Fixture::new(small_cell(), 8);
    let cell = &fx.cell;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for trial in 0..20 {
        let mut a = random_arch(&mut rng, cell.num_arch_weights());
        for v in a.iter_mut() {
            if rng.random_bool(0.5) {
                *v = 0.0;
            }
        }
        // Zero a whole node group so that its outgoing edges die transitively.
        let group = &cell.group_index().groups()[trial % 3].clone();
        for &i in group {
            a[i] = 0.0;
        }
        let weights = ArchWeights::from_values(cell, a.clone()).unwrap();
        let Ok(derived) = derive_architecture(cell, &weights, None) else {
            continue;
        };
        let mut pruned = vec![0.0; a.len()];
        for (pos, e) in cell.edges().iter().enumerate() {
            for (o, op) in cell.op_set.iter().enumerate() {
                let kept = derived
                    .kept_edges
                    .iter()
                    .any(|k| k.from == e.from && k.to == e.to && k.op == *op);
                if kept {
                    pruned[cell.arch_index(pos, o)] = a[cell.arch_index(pos, o)];
                }
            }
        }
        let full = fx.forward(&a);
        let cut = fx.forward(&pruned);
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&full), bits(&cut), "trial {trial}");
    }
}

#[test]
fn group_cardinalities_follow_predecessors() {
    for n in 1..6 {
        let cell = CellSpec {
            num_intermediate: n,
            ..CellSpec::default()
        };
        let groups = cell.group_index();
        for (g, node) in groups.groups().iter().zip(cell.intermediate_nodes()) {
            assert_eq!(g.len(), node * cell.op_set.len());
        }
        assert_eq!(groups.len(), cell.num_arch_weights());
    }
}

#[test]
fn dimension_mismatch_is_an_error() {
    let fx = Fixture::new(small_cell(), 1);
    let mut tape = Tape::new();
    let arch = tape.constant(Tensor::vector(vec![0.1; 70]));
    let bad = tape.constant(Tensor::zeros(&[3, 5]));
    let params: Vec<Vec<Var>> = fx
        .params
        .iter()
        .map(|ps| ps.iter().map(|t| tape.constant(t.clone())).collect())
        .collect();
    assert!(cell_forward(&mut tape, &fx.cell, &[bad, bad], arch, &params).is_err());
    let ok = tape.constant(fx.inputs[0].clone());
    assert!(cell_forward(&mut tape, &fx.cell, &[ok], arch, &params).is_err());
}

fn toy_batch(seed: u64, n: usize, d: usize, classes: usize) -> (Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_tensor(&mut rng, &[n, d]);
    let labels = (0..n).map(|i| i % classes).collect();
    (x, labels)
}

#[test]
fn supernet_model_gradients_match_finite_differences() {
    let model = SupernetModel::new(small_cell(), 5, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let w = model.init_params(&mut rng);
    let a = ArchWeights::init(model.cell(), &mut rng).values().to_vec();
    let (x, labels) = toy_batch(12, 6, 5, 3);
    let lg = model.loss_grad(&w, &a, &x, &labels, true, true).unwrap();
    assert_eq!(lg.grad_w.len(), model.num_params());
    assert_eq!(lg.grad_a.len(), a.len());

    let h = 1e-6;
    let loss = |w: &[f64], a: &[f64]| model.loss_grad(w, a, &x, &labels, false, false).unwrap().loss;
    for i in (0..a.len()).step_by(7) {
        let mut up = a.clone();
        up[i] += h;
        let mut down = a.clone();
        down[i] -= h;
        let fd = (loss(&w, &up) - loss(&w, &down)) / (2.0 * h);
        assert!((fd - lg.grad_a[i]).abs() < 1e-6, "a[{i}]: {fd} vs {}", lg.grad_a[i]);
    }
    for i in (0..w.len()).step_by(97) {
        let mut up = w.clone();
        up[i] += h;
        let mut down = w.clone();
        down[i] -= h;
        let fd = (loss(&up, &a) - loss(&down, &a)) / (2.0 * h);
        assert!((fd - lg.grad_w[i]).abs() < 1e-6, "w[{i}]: {fd} vs {}", lg.grad_w[i]);
    }
}

#[test]
fn derived_model_trains_and_differentiates() {
    let cell = small_cell();
    let mut v = vec![0.0; cell.num_arch_weights()];
    v[cell.arch_index(0, 1)] = 0.8;
    v[cell.arch_index(2, 2)] = -0.5;
    let derived = derive_architecture(&cell, &ArchWeights::from_values(&cell, v).unwrap(), None).unwrap();
    assert_eq!(derived.active_nodes, vec![2, 3]);
    let model = DerivedModel::new(derived, cell.feature_dim, CellOutput::Concat, 5, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let w = model.init_params(&mut rng);
    let (x, labels) = toy_batch(14, 6, 5, 3);
    let (_, grad) = model.loss_grad(&w, &x, &labels).unwrap();
    let h = 1e-6;
    for i in (0..w.len()).step_by(11).chain([w.len() - 1, w.len() - 2]) {
        let mut up = w.clone();
        up[i] += h;
        let mut down = w.clone();
        down[i] -= h;
        let fd = (model.loss_grad(&up, &x, &labels).unwrap().0 - model.loss_grad(&down, &x, &labels).unwrap().0)
            / (2.0 * h);
        assert!((fd - grad[i]).abs() < 1e-6, "w[{i}]: {fd} vs {}", grad[i]);
    }
    assert_eq!(model.predict(&w, &x).unwrap().len(), 6);
}
