use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

#[test]
fn matmul_by_identity() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let i = tape.constant(Tensor::identity(2));
    let out = tape.matmul(a, i).unwrap();
    assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn relu_and_scale_definitions() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
    let r = tape.relu(x).unwrap();
    assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
    let y = tape.constant(Tensor::vector(vec![1.0, -2.0]));
    let s = tape.scale(y, 0.5).unwrap();
    assert_eq!(tape.value(s).data(), &[0.5, -1.0]);
}

#[test]
fn shape_errors_name_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    let c = tape.constant(Tensor::zeros(&[3]));
    assert!(matches!(tape.add(a, c), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::vector(vec![f64::MAX, 1.0]));
    assert!(matches!(tape.scale(a, 10.0), Err(Error::NonFinite(_))));
}

#[test]
fn cross_entropy_uniform_and_saturated() {
    let mut tape = Tape::new();
    let logits = tape.constant(Tensor::matrix(2, 4, vec![0.3; 8]).unwrap());
    let l = tape.cross_entropy(logits, &[0, 3]).unwrap();
    assert!((tape.value(l).data()[0] - 4f64.ln()).abs() < 1e-12);

    let logits = tape.constant(Tensor::matrix(1, 2, vec![10.0, -10.0]).unwrap());
    let l = tape.cross_entropy(logits, &[0]).unwrap();
    assert!(tape.value(l).data()[0] < 1e-4);
}

#[test]
fn cross_entropy_matches_hand_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let logits = random_tensor(&mut rng, &[3, 3]);
    let labels = [2usize, 0, 1];
    // Hand evaluation: -log(exp(z_y) / sum exp(z)), averaged.
    let mut expected = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = &logits.data()[r * 3..r * 3 + 3];
        let denom: f64 = row.iter().map(|z| z.exp()).sum();
        expected -= (row[y].exp() / denom).ln();
    }
    expected /= 3.0;
    let mut tape = Tape::new();
    let z = tape.constant(logits);
    let l = tape.cross_entropy(z, &labels).unwrap();
    assert!((tape.value(l).data()[0] - expected).abs() < 1e-12);
}

#[test]
fn cross_entropy_rejects_bad_label() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::zeros(&[1, 3]));
    assert!(matches!(
        tape.cross_entropy(z, &[3]),
        Err(Error::LabelOutOfRange { label: 3, classes: 3 })
    ));
}

#[test]
fn backward_square_and_relu() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(3.0));
    let y = tape.mul(x, x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[6.0]);

    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![-1.0, 2.0]));
    let r = tape.relu(x).unwrap();
    let s = tape.sum(r).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0]);
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![0.0]));
    let r = tape.relu(x).unwrap();
    let s = tape.sum(r).unwrap();
    assert_eq!(tape.backward(s).unwrap().get(x).unwrap().data(), &[0.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
}

#[test]
fn grad_check_exact_cases() {
    let point = Tensor::vector(vec![0.3, -1.2, 2.0]);
    let linear = |t: &mut Tape, x: Var| {
        let s = t.scale(x, 2.5)?;
        t.sum(s)
    };
    assert!(grad_check(linear, &point, 1e-3).unwrap() < 1e-10);
    let quadratic = |t: &mut Tape, x: Var| {
        let sq = t.mul(x, x)?;
        t.sum(sq)
    };
    assert!(grad_check(quadratic, &point, 1e-5).unwrap() < 1e-8);
    assert!(grad_check(quadratic, &point, 0.0).is_err());
}

/// Two-layer tanh MLP with cross-entropy, differentiated w.r.t. its first
/// weight matrix.
#[test]
fn mlp_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor(&mut rng, &[5, 4]);
    let w2 = random_tensor(&mut rng, &[6, 3]);
    let b1 = random_tensor(&mut rng, &[6]);
    let w1 = random_tensor(&mut rng, &[4, 6]);
    let labels = [0usize, 2, 1, 1, 0];
    let f = |t: &mut Tape, w: Var| {
        let xv = t.constant(x.clone());
        let b = t.constant(b1.clone());
        let w2v = t.constant(w2.clone());
        let h = t.matmul(xv, w)?;
        let h = t.add_bias(h, b)?;
        let h = t.tanh(h)?;
        let z = t.matmul(h, w2v)?;
        t.cross_entropy(z, &labels)
    };
    assert!(grad_check(f, &w1, 1e-5).unwrap() < 1e-4);
}

#[test]
fn gradients_are_linear_in_the_objective() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let p = random_tensor(&mut rng, &[3, 3]);
    let (a, b) = (0.7, -1.9);
    let grad_of = |ca: f64, cb: f64| {
        let mut t = Tape::new();
        let x = t.param(p.clone());
        let f = t.tanh(x).unwrap();
        let f = t.sum(f).unwrap();
        let sq = t.mul(x, x).unwrap();
        let g = t.sum(sq).unwrap();
        let fa = t.scale(f, ca).unwrap();
        let gb = t.scale(g, cb).unwrap();
        let out = t.add(fa, gb).unwrap();
        t.backward(out).unwrap().get(x).unwrap().clone()
    };
    let combined = grad_of(a, b);
    let (gf, gg) = (grad_of(1.0, 0.0), grad_of(0.0, 1.0));
    for i in 0..p.len() {
        let expect = a * gf.data()[i] + b * gg.data()[i];
        assert!((combined.data()[i] - expect).abs() < 1e-12);
    }
}

#[test]
fn concat_and_sum_list_route_gradients() {
    let mut tape = Tape::new();
    let a = tape.param(Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap());
    let b = tape.param(Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap());
    let c = tape.concat(&[a, b], 1).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    let w = tape.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let prod = tape.mul(c, w).unwrap();
    let s = tape.sum(prod).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(a).unwrap().data(), &[1.0, 4.0]);
    assert_eq!(g.get(b).unwrap().data(), &[2.0, 3.0, 5.0, 6.0]);

    let mut tape = Tape::new();
    let a = tape.param(Tensor::vector(vec![1.0, 2.0]));
    let b = tape.param(Tensor::vector(vec![3.0]));
    let c = tape.concat(&[a, b], 0).unwrap();
    let d = tape.sum_list(&[c, c]).unwrap();
    let s = tape.sum(d).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(a).unwrap().data(), &[2.0, 2.0]);
    assert_eq!(g.get(b).unwrap().data(), &[2.0]);
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = random_tensor(&mut rng, &[8, 5]);
        let w = random_tensor(&mut rng, &[5, 4]);
        let mut t = Tape::new();
        let xv = t.constant(x);
        let wv = t.param(w);
        let h = t.matmul(xv, wv).unwrap();
        let z = t.tanh(h).unwrap();
        let l = t.cross_entropy(z, &[0, 1, 2, 3, 0, 1, 2, 3]).unwrap();
        let g = t.backward(l).unwrap();
        (t.value(l).data().to_vec(), g.get(wv).unwrap().data().to_vec())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(a.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}
