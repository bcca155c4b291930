mod common;

use common::checks::{op_gradchecks, property_suites, GRAD_TOL};
use common::rand_tensor;
use stare_core::nn::{Graph, NnError, Tensor};

#[test]
fn every_op_matches_central_differences() {
    for (name, err) in op_gradchecks() {
        assert!(err <= GRAD_TOL, "{name}: {err}");
    }
}

#[test]
fn property_suites_hold_over_ten_thousand_cases() {
    for (name, r) in property_suites(10_000) {
        assert!(r.is_ok(), "{name}: {r:?}");
    }
}

#[test]
fn split_then_merge_is_identity() {
    let t = rand_tensor(&[10, 12], 25);
    let mut g = Graph::new(&[]);
    let x = g.constant(t.clone());
    let h = g.split_heads(x, 2, 5, 3).unwrap();
    let m = g.merge_heads(h, 2, 5, 3).unwrap();
    assert_eq!(g.value(m), t.data());
}

#[test]
fn cross_entropy_ignored_rows_get_zero_gradient() {
    let mut g = Graph::new(&[]);
    let x = g.variable(rand_tensor(&[3, 4], 29));
    let loss = g.cross_entropy(x, &[2, 99, 1], Some(99)).unwrap();
    let grads = g.backward(loss).unwrap();
    let gx = grads.get(x).unwrap();
    assert!(gx[4..8].iter().all(|&v| v == 0.0));
    assert!(gx[0..4].iter().any(|&v| v != 0.0));
}

#[test]
fn cross_entropy_confident_logits_near_zero() {
    let mut g = Graph::new(&[]);
    let mut logits = vec![0.0; 5];
    logits[3] = 1e6;
    let x = g.constant(Tensor::new(vec![1, 5], logits).unwrap());
    let loss = g.cross_entropy(x, &[3], None).unwrap();
    assert!(g.value(loss)[0].abs() < 1e-12);
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut g = Graph::new(&[]);
    let x = g.constant(Tensor::zeros(vec![3]));
    let y = g.softmax(x, None).unwrap();
    for &p in g.value(y) {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn masked_keys_get_exactly_zero_weight() {
    let mut g = Graph::new(&[]);
    let x = g.constant(rand_tensor(&[2, 3, 4], 30));
    let mask = [0.0, f64::NEG_INFINITY, 0.0, 0.0, 0.0, 0.0, 0.0, f64::NEG_INFINITY];
    let y = g.softmax(x, Some(&mask)).unwrap();
    let v = g.value(y);
    for r in 0..3 {
        assert_eq!(v[r * 4 + 1], 0.0);
        assert_eq!(v[12 + r * 4 + 3], 0.0);
    }
}

#[test]
fn shape_errors_name_both_shapes() {
    let mut g = Graph::new(&[]);
    let a = g.constant(Tensor::zeros(vec![2, 3]));
    let b = g.constant(Tensor::zeros(vec![4, 5]));
    match g.matmul(a, b) {
        Err(NnError::ShapeMismatch { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 5]);
        }
        other => panic!("expected shape mismatch, got {:?}", other.map(|_| ())),
    }
    assert!(g.add(a, b).is_err());
    assert!(g.embedding(b, &[4]).is_err());
}
