mod common;

use common::*;
use ilnorm::norm::{batch_norm_train, combine, group_norm, instance_norm, layer_norm, Rho};
use ilnorm::{Combiner, Graph, Shape, Tensor};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

/// Channels with scale in [1, 3], so every statistics group has a variance
/// far above epsilon.
fn well_scaled(seed: u64, shape: Shape) -> Tensor<f64> {
    let mut r = rng(seed);
    let scales: Vec<f64> = (0..shape.c()).map(|_| r.random_range(1.0..3.0)).collect();
    let offsets: Vec<f64> = (0..shape.c()).map(|_| r.random_range(-5.0..5.0)).collect();
    Tensor::from_fn(shape, |_, _, _, c| offsets[c] + scales[c] * r.sample::<f64, _>(StandardNormal))
}

fn assert_normalized(y: &Tensor<f64>, groups: StatGroups, what: &str) {
    let (m, lo, hi) = stats_extremes(y, groups);
    assert!(m <= 1e-6, "{what}: |mean| {m}");
    assert!(lo >= 1.0 - 1e-3 && hi <= 1.0 + 1e-3, "{what}: variance in [{lo}, {hi}]");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn normalizer_postconditions(
        seed in any::<u64>(),
        n in 1usize..=8,
        h in 2usize..=8,
        w in 2usize..=8,
        wide in any::<bool>(),
    ) {
        let c = if wide { 32 } else { 16 };
        let x = well_scaled(seed, Shape::new(n, h, w, c));
        assert_normalized(&instance_norm(&x, EPS).unwrap(), StatGroups::PerSample { size: 1 }, "IN");
        assert_normalized(&layer_norm(&x, EPS).unwrap(), StatGroups::PerSample { size: c }, "LN");
        assert_normalized(&batch_norm_train(&x, EPS).unwrap(), StatGroups::PerChannel, "BN");
        for g in [1, 4, 16] {
            assert_normalized(&group_norm(&x, g, EPS).unwrap(), StatGroups::PerSample { size: c / g }, "GN");
        }
    }

    #[test]
    fn collapse_to_instance_and_layer(seed in any::<u64>(), c in 1usize..=8) {
        let x = stats_tensor(seed, c);
        let a = group_norm(&x, c, EPS).unwrap();
        let b = instance_norm(&x, EPS).unwrap();
        prop_assert!(a.data().iter().zip(b.data()).all(|(p, q)| (p - q).abs() <= 1e-10));
        let a = group_norm(&x, 1, EPS).unwrap();
        let b = layer_norm(&x, EPS).unwrap();
        prop_assert!(a.data().iter().zip(b.data()).all(|(p, q)| (p - q).abs() <= 1e-10));
    }

    #[test]
    fn softmax_weights_shift_invariant(a in -4.0f64..4.0, b in -4.0f64..4.0, shift in -10.0f64..10.0) {
        let mut r = rng(5);
        let shape = Shape::new(1, 3, 3, 2);
        let f_in = normal(&mut r, shape, 1.0, 0.0);
        let f_ln = normal(&mut r, shape, 1.0, 1.0);
        let y0 = combine(&f_in, &f_ln, &Rho::Pair(a, b), Combiner::Softmax).unwrap();
        let y1 = combine(&f_in, &f_ln, &Rho::Pair(a + shift, b + shift), Combiner::Softmax).unwrap();
        prop_assert!(y0.data().iter().zip(y1.data()).all(|(p, q)| (p - q).abs() <= 1e-12));
    }
}

#[test]
fn mixture_is_not_normalized_until_gn16() {
    let w = mixture_witness(200).expect("a witness exists");
    assert!(!(0.9..=1.1).contains(&w.worst_variance));
    assert!(w.post_mean <= 1e-4 && w.post_var_dev <= 1e-4, "{w:?}");
}

#[test]
fn affine_is_invertible() {
    let mut r = rng(3);
    let f = normal(&mut r, Shape::new(2, 3, 3, 4), 1.0, 0.0);
    let gamma = Tensor::new(Shape::channels(4), vec![0.5, -2.0, 3.0, 1e-3]).unwrap();
    let beta = normal(&mut r, Shape::channels(4), 1.0, 0.0);
    let mut g = Graph::new();
    let (fv, gv, bv) = (g.constant(f.clone()), g.constant(gamma.clone()), g.constant(beta.clone()));
    let y = ilnorm::norm::affine(&mut g, fv, gv, bv).unwrap();
    let y = g.value(y);
    let back = Tensor::from_fn(f.shape(), |n, h, w, c| (y.get(n, h, w, c) - beta.get(0, 0, 0, c)) / gamma.get(0, 0, 0, c));
    for (a, b) in back.data().iter().zip(f.data()) {
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
    }
}

#[test]
fn sigmoid_weights_sum_to_one() {
    let mut r = rng(8);
    let shape = Shape::new(1, 2, 2, 3);
    let f = normal(&mut r, shape, 1.0, 0.0);
    // Identical branches: any convex weighting returns them unchanged.
    for rho in [-7.0, -1.0, 0.0, 0.5, 3.0, 9.0] {
        let y = combine(&f, &f, &Rho::Single(rho), Combiner::Sigmoid).unwrap();
        assert!(y.data().iter().zip(f.data()).all(|(a, b)| (a - b).abs() <= 1e-15));
    }
}

#[test]
fn conv_and_cross_entropy_match_brute_force() {
    for seed in 0..10u64 {
        let mut r = rng(seed);
        let (h, w) = (5 + seed as usize % 4, 8 - seed as usize % 4);
        let x = normal(&mut r, Shape::new(1, h, w, 2), 1.0, 0.0);
        let wt = normal(&mut r, Shape::new(3, 3, 2, 3), 1.0, 0.0);
        let b = normal(&mut r, Shape::channels(3), 1.0, 0.0);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(wt.clone()), g.constant(b.clone()));
        let y = g.conv2d(xv, wv, bv).unwrap();
        let expect = naive_conv2d(&x, &wt, &b);
        assert!(g.value(y).data().iter().zip(expect.data()).all(|(a, b)| (a - b).abs() <= 1e-10));

        let logits = normal(&mut r, Shape::new(1, h, w, 2), 4.0, 0.0);
        let labels: Vec<usize> = (0..h * w).map(|_| r.random_range(0..2)).collect();
        let mut g = Graph::new();
        let lv = g.constant(logits.clone());
        let loss = g.cross_entropy(lv, &labels).unwrap();
        assert!((g.value(loss).item() - naive_cross_entropy(&logits, &labels)).abs() <= 1e-10);
    }
}
