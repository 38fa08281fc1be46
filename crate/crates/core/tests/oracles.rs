mod common;

use common::*;
use segforge::eval::ConfusionMatrix;
use segforge::gradcheck::{run_gradcheck, GradcheckOptions};
use segforge::tensor::{conv2d, conv2d_backward, ConvParams, Tensor};

#[test]
fn conv_matches_direct_sum_in_f32() {
    let mut rng = rng(10);
    for (k, s, d, groups) in
        [(3, 1, 1, 1), (3, 2, 1, 1), (3, 1, 6, 4), (3, 1, 12, 1), (3, 1, 18, 8), (7, 2, 1, 1), (1, 2, 1, 2)]
    {
        let pad = d * (k - 1) / 2;
        let x = uniform(&mut rng, &[1, 8, 2 * d + 11, 2 * d + 7]);
        let w = uniform(&mut rng, &[16, 8 / groups, k, k]);
        let p = ConvParams::new(s, pad, d, groups);
        let fast = conv2d(&x.cast::<f32>(), &w.cast::<f32>(), None, p).unwrap().cast::<f64>();
        let slow = naive_conv2d(&x, &w, None, p);
        let err = max_rel_diff(fast.data(), slow.data());
        assert!(err < 1e-5, "k{k} s{s} d{d} g{groups}: {err:e}");
    }
}

#[test]
fn conv_padding_larger_than_needed() {
    let mut rng = rng(11);
    let x = uniform(&mut rng, &[2, 4, 5, 6]);
    let w = uniform(&mut rng, &[4, 2, 3, 2]);
    let p = ConvParams::new(2, 3, 2, 2);
    let fast = conv2d(&x, &w, None, p).unwrap();
    let slow = naive_conv2d(&x, &w, None, p);
    assert_eq!(fast.shape(), slow.shape());
    assert!(max_rel_diff(fast.data(), slow.data()) < 1e-12);
}

/// The convolution is linear in both input and weight, so each gradient entry
/// is the forward response to a unit basis tensor, dotted with the upstream gradient.
#[test]
fn conv_backward_matches_basis_responses() {
    let mut rng = rng(12);
    for (s, d, groups) in [(1, 1, 1), (2, 1, 1), (1, 2, 2), (1, 1, 4)] {
        let x = uniform(&mut rng, &[2, 4, 6, 5]);
        let w = uniform(&mut rng, &[4, 4 / groups, 3, 3]);
        let p = ConvParams::new(s, d, d, groups);
        let y = naive_conv2d(&x, &w, None, p);
        let gy = uniform(&mut rng, y.shape());
        let dot = |a: &Tensor<f64>| a.data().iter().zip(gy.data()).map(|(u, v)| u * v).sum::<f64>();
        let grads = conv2d_backward(&x, &w, true, p, &gy, true).unwrap();

        for i in 0..w.numel() {
            let e = Tensor::from_fn(w.shape(), |j| f64::from(u8::from(i == j)));
            let want = dot(&naive_conv2d(&x, &e, None, p));
            assert!((grads.weight.data()[i] - want).abs() < 1e-12, "weight {i}");
        }
        let dx = grads.input.unwrap();
        for i in 0..x.numel() {
            let e = Tensor::from_fn(x.shape(), |j| f64::from(u8::from(i == j)));
            let want = dot(&naive_conv2d(&e, &w, None, p));
            assert!((dx.data()[i] - want).abs() < 1e-12, "input {i}");
        }
        let db = grads.bias.unwrap();
        let (n, o, oh, ow) = gy.dims4("gy").unwrap();
        for c in 0..o {
            let want: f64 = (0..n)
                .flat_map(|b| (0..oh * ow).map(move |q| (b, q)))
                .map(|(b, q)| gy.data()[(b * o + c) * oh * ow + q])
                .sum();
            assert!((db.data()[c] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn confusion_matches_sets_on_larger_masks() {
    let mut r = rng(13);
    for k in [2u8, 3, 5, 7] {
        let pred: Vec<u8> = (0..1000).map(|_| rand::Rng::random_range(&mut r, 0..k)).collect();
        let truth: Vec<u8> =
            pred.iter().map(|&p| if rand::Rng::random_bool(&mut r, 0.7) { p } else { (p + 1) % k }).collect();
        let cm = ConfusionMatrix::from_masks(k as usize, &pred, &truth).unwrap();
        for c in 0..k {
            assert_eq!(cm.class_iou(c as usize), set_iou(&pred, &truth, c));
        }
        assert_eq!(cm.mean_iou().unwrap(), set_mean_iou(&pred, &truth, k));
    }
}

#[test]
fn gradient_suite_is_seed_stable() {
    for seed in [1, 2] {
        let report = run_gradcheck(&GradcheckOptions { instances: 5, seed, composites: true }).unwrap();
        assert!(report.passed(), "seed {seed}:\n{}", report.to_table());
    }
}
