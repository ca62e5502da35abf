mod common;

use common::oracles::{bilinear_at, naive_conv, naive_maxpool};
use lesion_core::tensor::kernels::align_corners_coords;
use lesion_core::tensor::{
    adam_step, Activation, AdamState, Conv2dSpec, Graph, LossKind, LossKind as L, Tensor,
};
use proptest::prelude::*;

fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[test]
fn ones_conv_sums_the_window() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[3, 3, 1], 1.0));
    let k = g.constant(Tensor::full(&[2, 2, 1, 1], 1.0));
    let b = g.constant(Tensor::zeros(&[1]));
    let y = g
        .conv2d(
            x,
            k,
            b,
            Conv2dSpec {
                stride: 1,
                padding: 0,
                dilation: 1,
            },
        )
        .unwrap();
    assert_eq!(g.value(y), &Tensor::full(&[2, 2, 1], 4.0));
}

#[test]
fn align_corners_resize_of_two_by_two() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2, 2, 1], vec![0.0, 1.0, 2.0, 3.0]));
    let y = g.bilinear_resize(x, 3, 3).unwrap();
    assert_eq!(
        g.value(y).data(),
        &[0.0, 0.5, 1.0, 1.0, 1.5, 2.0, 2.0, 2.5, 3.0]
    );
}

#[test]
fn maxpool_ties_pick_first() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[2, 2, 1], vec![1.0, 1.0, 1.0, 1.0]), true);
    let y = g.maxpool2d(x, 2, 2).unwrap();
    let s = g.loss(y, Tensor::zeros(&[1, 1, 1]), L::Mse).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 0.0, 0.0, 0.0]);
}

#[test]
fn loss_reference_values() {
    let mut g = Graph::new();
    let p = g.constant(Tensor::full(&[4], 0.5));
    let bce = g
        .loss(p, t(&[4], vec![1.0, 0.0, 1.0, 0.0]), L::BinaryCrossEntropy)
        .unwrap();
    assert!((g.value(bce).item() - 2f64.ln()).abs() < 1e-12);
    let q = g.constant(Tensor::full(&[3, 2], 0.5));
    let cce = g
        .loss(
            q,
            t(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]),
            L::CategoricalCrossEntropy,
        )
        .unwrap();
    assert!((g.value(cce).item() - 2f64.ln()).abs() < 1e-12);
    let r = g.constant(t(&[2], vec![1.0, 3.0]));
    let mse = g.loss(r, t(&[2], vec![0.0, 1.0]), L::Mse).unwrap();
    assert_eq!(g.value(mse).item(), 2.5);
    let zero = g.constant(Tensor::zeros(&[2]));
    let clamped = g
        .loss(zero, t(&[2], vec![1.0, 1.0]), L::BinaryCrossEntropy)
        .unwrap();
    assert!(g.value(clamped).item().is_finite());
}

#[test]
fn dice_analytic_examples() {
    let onehot = |lesion: &[u8]| {
        let data = lesion
            .iter()
            .flat_map(|&l| if l == 1 { [0.0, 1.0] } else { [1.0, 0.0] })
            .collect();
        t(&[1, lesion.len(), 2], data)
    };
    let mut g = Graph::new();
    let y = onehot(&[1, 0, 1, 0]);
    let p = g.constant(y.clone());
    let perfect = g.loss(p, y.clone(), L::Dice).unwrap();
    assert!(g.value(perfect).item().abs() < 1e-6);
    let half = g.constant(Tensor::full(&[1, 4, 2], 0.5));
    let uniform = g.loss(half, y, L::Dice).unwrap();
    assert!((g.value(uniform).item() - 0.5).abs() < 1e-6);
    let empty = onehot(&[0, 0, 0, 0]);
    let pe = g.constant(empty.clone());
    let no_lesion = g.loss(pe, empty, L::Dice).unwrap();
    assert!((g.value(no_lesion).item() - 0.5).abs() < 1e-6);
    let bad = g.constant(Tensor::full(&[1, 2, 2], 0.5));
    assert!(g.loss(bad, Tensor::full(&[1, 2, 2], 0.5), L::Dice).is_err());
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut p = Tensor::full(&[2], 1.0);
    let grad = t(&[2], vec![0.3, -5.0]);
    let mut state = AdamState::new([p.shape()]);
    adam_step(&mut [&mut p], &[&grad], &mut state, 0.001).unwrap();
    assert!((p.data()[0] - 0.999).abs() < 1e-7);
    assert!((p.data()[1] - 1.001).abs() < 1e-7);
}

#[test]
fn parsing_rejects_unknown_kinds() {
    assert!("relu".parse::<Activation>().is_ok());
    assert!("swish".parse::<Activation>().is_err());
    assert!("dice".parse::<LossKind>().is_ok());
    assert!("hinge".parse::<LossKind>().is_err());
}

#[test]
fn shape_errors() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[3, 3, 2]));
    let k = g.constant(Tensor::zeros(&[3, 3, 1, 1]));
    let b = g.constant(Tensor::zeros(&[1]));
    assert!(g.conv2d(x, k, b, Conv2dSpec::same(1)).is_err());
    let y = g.constant(Tensor::zeros(&[3, 2, 2]));
    assert!(g.add(x, y).is_err());
    assert!(g.backward(x).is_err());
    assert!(Tensor::new(vec![2, 0], vec![]).is_err());
}

#[test]
fn replay_reproduces_values() {
    let mut g = Graph::new();
    let x = g.leaf(
        Tensor::from_fn(&[4, 4, 2], |i| (i as f64 * 0.37).sin()),
        true,
    );
    let k = g.leaf(
        Tensor::from_fn(&[3, 3, 2, 2], |i| (i as f64 * 0.11).cos()),
        true,
    );
    let b = g.leaf(Tensor::zeros(&[2]), true);
    let y = g.conv2d(x, k, b, Conv2dSpec::same(1)).unwrap();
    let y = g.relu(y).unwrap();
    let y = g.maxpool2d(y, 2, 2).unwrap();
    let _ = g.softmax(y).unwrap();
    let replayed = g.replay().unwrap();
    for (a, b) in replayed.iter().zip(g.values()) {
        assert_eq!(a, b);
    }
}

#[test]
fn stacked_dilations_reach_thirty_one_pixels() {
    let n = 41;
    let mut impulse = Tensor::zeros(&[n, n, 1]);
    impulse.data_mut()[20 * n + 20] = 1.0;
    let mut g = Graph::new();
    let mut x = g.constant(impulse);
    for rate in [1, 2, 4, 8] {
        let k = g.constant(Tensor::full(&[3, 3, 1, 1], 1.0));
        let b = g.constant(Tensor::zeros(&[1]));
        x = g.conv2d(x, k, b, Conv2dSpec::same(rate)).unwrap();
    }
    let out = g.value(x);
    let cols: Vec<usize> = (0..n).filter(|&c| out.at3(20, c, 0) != 0.0).collect();
    assert_eq!(cols.last().unwrap() - cols[0] + 1, 31);
    assert_eq!(lesion_core::skinnet::receptive_field(&[1, 2, 4, 8]), 31);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_matches_direct_sum(
        h in 3usize..8, w in 3usize..8, cin in 1usize..3, cout in 1usize..3,
        k in 1usize..4, stride in 1usize..3, pad in 0usize..3, dil in 1usize..3, seed in 0u64..1000,
    ) {
        let span = dil * (k - 1) + 1;
        prop_assume!(h + 2 * pad >= span && w + 2 * pad >= span);
        let f = |i: usize| ((i as f64 + seed as f64) * 0.7131).sin();
        let x = Tensor::from_fn(&[h, w, cin], f);
        let ker = Tensor::from_fn(&[k, k, cin, cout], |i| f(i + 97));
        let bias = Tensor::from_fn(&[cout], |i| f(i + 13));
        let (want, oh, ow) = naive_conv(x.data(), (h, w, cin), ker.data(), (k, k, cout), bias.data(), stride, pad, dil);
        let mut g = Graph::new();
        let (xv, kv, bv) = (g.constant(x), g.constant(ker), g.constant(bias));
        let y = g.conv2d(xv, kv, bv, Conv2dSpec { stride, padding: pad, dilation: dil }).unwrap();
        prop_assert_eq!(g.value(y).shape(), &[oh, ow, cout]);
        for (a, b) in g.value(y).data().iter().zip(&want) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn maxpool_matches_window_max(h in 2usize..9, w in 2usize..9, c in 1usize..3, win in 1usize..3, stride in 1usize..3, seed in 0u64..1000) {
        prop_assume!(h >= win && w >= win);
        let x = Tensor::from_fn(&[h, w, c], |i| ((i as f64 + seed as f64) * 1.913).cos());
        let want = naive_maxpool(x.data(), (h, w, c), win, stride);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let y = g.maxpool2d(xv, win, stride).unwrap();
        prop_assert_eq!(g.value(y).data(), want.as_slice());
    }

    #[test]
    fn resize_matches_pointwise_bilinear(h in 1usize..6, w in 1usize..6, oh in 1usize..9, ow in 1usize..9, seed in 0u64..1000) {
        let x = Tensor::from_fn(&[h, w, 2], |i| ((i as f64 + seed as f64) * 0.377).sin());
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = g.bilinear_resize(xv, oh, ow).unwrap();
        let ys = align_corners_coords(h, oh);
        let xs = align_corners_coords(w, ow);
        for (i, &yy) in ys.iter().enumerate() {
            for (j, &xx) in xs.iter().enumerate() {
                for ch in 0..2 {
                    let want = bilinear_at(x.data(), (h, w, 2), yy, xx, ch);
                    prop_assert!((g.value(y).at3(i, j, ch) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-30.0f64..30.0, 6)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 3], vals).unwrap());
        let y = g.softmax(x).unwrap();
        for row in g.value(y).data().chunks(3) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
