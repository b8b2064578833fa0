mod common;

use std::sync::Arc;

use heatv2x::autograd::{grad_check, grad_check_fn, Graph, OpKind, ParamStore, WarpPlan};
use heatv2x::{Error, Tensor};
use proptest::prelude::*;

/// Direct nested-loop convolution, channels-last, zero padding.
fn conv_oracle(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> Tensor {
    let (h, wd, ci) = (x.shape[0], x.shape[1], x.shape[2]);
    let (k, co) = (w.shape[0], w.shape[3]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[ho, wo, co]);
    for oy in 0..ho {
        for ox in 0..wo {
            for o in 0..co {
                let mut s = b[o];
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                            continue;
                        }
                        for c in 0..ci {
                            s += x.at(&[iy as usize, ix as usize, c]) * w.at(&[ky, kx, c, o]);
                        }
                    }
                }
                out.set(&[oy, ox, o], s);
            }
        }
    }
    out
}

#[test]
fn softmax_over_unit_axis_is_one() {
    let mut g = Graph::new();
    let x = g.input("x", Tensor::new(vec![3, 1], vec![-4.0, 0.3, 17.0]), false);
    let y = g.apply(OpKind::Softmax { axis: 1 }, &[x]).unwrap();
    assert!(g.value(y).data.iter().all(|&v| v == 1.0));
}

#[test]
fn identity_pointwise_conv_is_identity() {
    let c = 3;
    let x = Tensor::new(vec![4, 4, c], (0..48).map(|i| (i as f64).sin()).collect());
    let mut w = Tensor::zeros(&[1, 1, c, c]);
    for i in 0..c {
        w.set(&[0, 0, i, i], 1.0);
    }
    let mut g = Graph::new();
    let xi = g.input("x", x.clone(), false);
    let wi = g.constant(w);
    let bi = g.constant(Tensor::zeros(&[c]));
    let y = g.conv2d(xi, wi, bi, 1).unwrap();
    assert!(g.value(y).bitwise_eq(&x));
}

#[test]
fn conv3x3_matches_nested_loop_oracle_on_ramp() {
    let x = Tensor::new(vec![5, 5, 1], (0..25).map(f64::from).collect());
    let w = Tensor::new(vec![3, 3, 1, 2], (0..18).map(|i| 0.1 * i as f64 - 0.7).collect());
    let b = [0.25, -1.5];
    for stride in [1, 2] {
        let mut g = Graph::new();
        let xi = g.input("x", x.clone(), false);
        let wi = g.constant(w.clone());
        let bi = g.constant(Tensor::new(vec![2], b.to_vec()));
        let y = g.conv2d(xi, wi, bi, stride).unwrap();
        let expect = conv_oracle(&x, &w, &b, stride, 1);
        assert_eq!(g.shape(y), &expect.shape[..]);
        for (a, e) in g.value(y).data.iter().zip(&expect.data) {
            assert!((a - e).abs() <= 1e-12, "{a} vs {e}");
        }
    }
}

#[test]
fn gradient_of_sum_is_ones() {
    let mut g = Graph::new();
    let x = g.input("x", Tensor::new(vec![2, 3, 2], (0..12).map(|i| i as f64 * 0.3).collect()), true);
    let s = g.sum(x).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.of(x).unwrap().data.iter().all(|&v| v == 1.0));
}

#[test]
fn mean_gelu_linear_matches_finite_differences() {
    let x = Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64 * 0.7).cos()).collect());
    let w = Tensor::new(vec![4, 5], (0..20).map(|i| (i as f64 * 1.3).sin() * 0.5).collect());
    let err = grad_check_fn(&[x, w], 1, |g, ids| {
        let y = g.matmul(ids[0], ids[1], None)?;
        let a = g.gelu(y)?;
        g.mean(a)
    })
    .unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn frozen_parameters_are_excluded_from_gradients() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]), true).unwrap();
    store.insert("frozen", Tensor::new(vec![2], vec![0.5, 0.5]), false).unwrap();
    store.insert("unused", Tensor::new(vec![3], vec![1.0; 3]), true).unwrap();
    let mut g = Graph::new();
    let x = g.input("x", Tensor::new(vec![1, 2], vec![1.0, -1.0]), false);
    let w = g.param(&store, "w").unwrap();
    let b = g.param(&store, "frozen").unwrap();
    let y = g.matmul(x, w, Some(b)).unwrap();
    let l = g.sum(y).unwrap();
    let grads = g.backward(l).unwrap().param_grads(&g, &store);
    assert!(!grads.contains_key("frozen"));
    assert_eq!(grads["unused"].data, vec![0.0; 3]);
    assert_eq!(grads["w"].data, vec![1.0, 1.0, -1.0, -1.0]);
}

#[test]
fn non_scalar_loss_rejected() {
    let mut g = Graph::new();
    let x = g.input("x", Tensor::zeros(&[2]), true);
    assert!(matches!(g.backward(x), Err(Error::NonScalarLoss { node: 0, .. })));
}

#[test]
fn shape_mismatch_names_node() {
    let mut g = Graph::new();
    let a = g.input("a", Tensor::zeros(&[2, 3]), false);
    let b = g.input("b", Tensor::zeros(&[4, 5]), false);
    match g.matmul(a, b, None) {
        Err(Error::Shape { node, .. }) => assert_eq!(node, 2),
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn non_finite_intermediate_names_node() {
    let mut g = Graph::new();
    let a = g.input("a", Tensor::full(&[2], 1e300), false);
    let b = g.input("b", Tensor::full(&[2], 1e300), false);
    match g.mul(a, b) {
        Err(Error::NonFinite { node, .. }) => assert_eq!(node, 2),
        other => panic!("expected non-finite error, got {other:?}"),
    }
}

#[test]
fn masked_sparse_conv_equals_dense_under_full_mask() {
    let x = Tensor::new(vec![6, 6, 2], (0..72).map(|i| (i as f64 * 0.37).sin()).collect());
    let w = Tensor::new(vec![3, 3, 2, 4], (0..72).map(|i| (i as f64 * 0.11).cos()).collect());
    let b = Tensor::new(vec![4], vec![0.1, -0.2, 0.3, 0.0]);
    let mut g = Graph::new();
    let xi = g.input("x", x, false);
    let wi = g.constant(w);
    let bi = g.constant(b);
    let m = g.constant(Tensor::ones(&[6, 6]));
    let dense = g.conv2d(xi, wi, bi, 1).unwrap();
    let sparse = g.sparse_conv(xi, wi, bi, m).unwrap();
    assert!(g.value(dense).bitwise_eq(g.value(sparse)));
}

#[test]
fn masked_sparse_conv_does_not_dilate() {
    let mut x = Tensor::zeros(&[5, 5, 1]);
    x.set(&[2, 2, 0], 1.0);
    let mut mask = Tensor::zeros(&[5, 5]);
    mask.set(&[2, 2], 1.0);
    let mut g = Graph::new();
    let xi = g.input("x", x, false);
    let wi = g.constant(Tensor::ones(&[3, 3, 1, 1]));
    let bi = g.constant(Tensor::zeros(&[1]));
    let mi = g.constant(mask);
    let y = g.sparse_conv(xi, wi, bi, mi).unwrap();
    let nonzero: Vec<usize> = g.value(y).data.iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(i, _)| i).collect();
    assert_eq!(nonzero, vec![12]);
}

#[test]
fn identity_warp_is_exact() {
    let x = Tensor::new(vec![4, 5, 3], (0..60).map(|i| (i as f64).sqrt() - 3.0).collect());
    let mut g = Graph::new();
    let xi = g.input("x", x.clone(), false);
    let y = g.warp(xi, Arc::new(WarpPlan::identity(4, 5))).unwrap();
    assert!(g.value(y).bitwise_eq(&x));
}

#[test]
fn add_grad_check_is_exact() {
    for seed in 0..3 {
        let err = grad_check(&OpKind::Add, &[4], seed).unwrap();
        assert!(err < 1e-10, "seed {seed}: {err}");
    }
}

#[test]
fn softmax_and_sparse_conv_grad_checks() {
    assert!(grad_check(&OpKind::Softmax { axis: 1 }, &[2, 5], 3).unwrap() < 1e-4);
    assert!(grad_check(&OpKind::MaskedSparseConv { k: 3 }, &[8, 8, 2], 3).unwrap() < 1e-4);
}

#[test]
fn every_op_kind_passes_grad_check_at_three_seeds() {
    for (op, shape) in common::all_op_cases() {
        for seed in [11, 22, 33] {
            let err = grad_check(&op, &shape, seed).unwrap();
            assert!(err < 1e-4, "{op} {shape:?} seed {seed}: {err}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn forward_is_bitwise_deterministic(seed in 0u64..1000) {
        let run = || {
            let mut g = Graph::new();
            let x = g.input("x", Tensor::new(vec![4, 4, 2], (0..32).map(|i| ((i as u64 * 31 + seed) as f64).sin()).collect()), true);
            let w = g.input("w", Tensor::new(vec![3, 3, 2, 2], (0..36).map(|i| ((i as u64 + seed) as f64).cos()).collect()), true);
            let b = g.constant(Tensor::zeros(&[2]));
            let y = g.conv2d(x, w, b, 1).unwrap();
            let a = g.gelu(y).unwrap();
            let l = g.mean(a).unwrap();
            let gr = g.backward(l).unwrap();
            (g.value(a).clone(), gr.of(w).unwrap().clone())
        };
        let (a1, g1) = run();
        let (a2, g2) = run();
        prop_assert!(a1.bitwise_eq(&a2));
        prop_assert!(g1.bitwise_eq(&g2));
    }

    #[test]
    fn softmax_rows_sum_to_one(vals in prop::collection::vec(-30.0f64..30.0, 12)) {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::new(vec![3, 4], vals), false);
        let y = g.softmax_last(x).unwrap();
        for row in g.value(y).data.chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }
}
