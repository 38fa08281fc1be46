//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segforge::tensor::{ConvParams, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Direct convolution: one loop per index, no unfolding, no GEMM.
pub fn naive_conv2d(
    input: &Tensor<f64>,
    weight: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
    p: ConvParams,
) -> Tensor<f64> {
    let s = input.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let ws = weight.shape();
    let (o, cg, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    assert_eq!(cg * p.groups, c);
    let og = o / p.groups;
    let oh = (h + 2 * p.padding - p.dilation * (kh - 1) - 1) / p.stride + 1;
    let ow = (w + 2 * p.padding - p.dilation * (kw - 1) - 1) / p.stride + 1;
    let x = input.data();
    let k = weight.data();
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            let g = oc / og;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |b| b.data()[oc]);
                    for ic in 0..cg {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * p.stride + ky * p.dilation) as isize - p.padding as isize;
                                let ix = (ox * p.stride + kx * p.dilation) as isize - p.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let ci = g * cg + ic;
                                acc += x[((b * c + ci) * h + iy as usize) * w + ix as usize]
                                    * k[((oc * cg + ic) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((b * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, o, oh, ow], out).unwrap()
}

/// Largest elementwise difference relative to the largest reference magnitude.
pub fn max_rel_diff(actual: &[f64], reference: &[f64]) -> f64 {
    assert_eq!(actual.len(), reference.len());
    let scale = reference.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    actual.iter().zip(reference).map(|(a, r)| (a - r).abs()).fold(0.0, f64::max) / scale
}

/// IoU of `class` from explicit pixel sets; `None` when both sets are empty.
pub fn set_iou(predicted: &[u8], truth: &[u8], class: u8) -> Option<f64> {
    let p: HashSet<usize> = predicted.iter().enumerate().filter(|(_, &v)| v == class).map(|(i, _)| i).collect();
    let t: HashSet<usize> = truth.iter().enumerate().filter(|(_, &v)| v == class).map(|(i, _)| i).collect();
    let union = p.union(&t).count();
    (union > 0).then(|| p.intersection(&t).count() as f64 / union as f64)
}

pub fn set_mean_iou(predicted: &[u8], truth: &[u8], k: u8) -> f64 {
    let v: Vec<f64> = (0..k).filter_map(|c| set_iou(predicted, truth, c)).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("img_{i:04}")).collect()
}

/// Softmax over one pixel's logits, computed directly.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}
