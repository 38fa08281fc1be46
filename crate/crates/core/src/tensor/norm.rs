use super::{Element, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchNormParams {
    pub training: bool,
    /// Weight of the current batch in the running-stat update,
    /// `running = (1 - momentum) * running + momentum * batch`.
    pub momentum: f64,
    pub epsilon: f64,
}

impl Default for BatchNormParams {
    fn default() -> Self {
        BatchNormParams { training: true, momentum: 0.1, epsilon: 1e-5 }
    }
}

pub struct BatchNormOutput<T> {
    pub output: Tensor<T>,
    /// `(x - mean) * inv_std` with the statistics that were applied.
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
    /// Updated running statistics (training mode only).
    pub running: Option<(Tensor<T>, Tensor<T>)>,
}

/// Per-channel batch normalization over N, H and W.
///
/// In training mode the batch statistics (biased variance) normalize the
/// input and the running statistics advance by exponential moving average
/// using the unbiased variance; in eval mode the running statistics are used
/// directly. Channel sums accumulate in f64.
pub fn batch_norm2d<T: Element>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    p: BatchNormParams,
) -> Result<BatchNormOutput<T>> {
    let (n, c, h, w) = input.dims4("batch_norm2d")?;
    for (name, t) in [("gamma", gamma), ("beta", beta), ("running_mean", running_mean), ("running_var", running_var)] {
        if t.shape() != [c] {
            return Err(Error::shape(
                "batch_norm2d",
                format!("{name} has shape {:?}, input has {c} channels", t.shape()),
            ));
        }
    }
    if p.epsilon.is_nan() || p.epsilon <= 0.0 {
        return Err(Error::InvalidArgument(format!("batch norm epsilon must be > 0, got {}", p.epsilon)));
    }
    let hw = h * w;
    let count = (n * hw) as f64;
    let x = input.data();

    let (mean, var): (Vec<f64>, Vec<f64>) = if p.training {
        (0..c)
            .map(|ch| {
                let mut sum = 0.0;
                for b in 0..n {
                    sum += x[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let mean = sum / count;
                let mut sq = 0.0;
                for b in 0..n {
                    sq += x[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                        .iter()
                        .map(|v| {
                            let d = v.as_f64() - mean;
                            d * d
                        })
                        .sum::<f64>();
                }
                (mean, sq / count)
            })
            .unzip()
    } else {
        (
            running_mean.data().iter().map(|v| v.as_f64()).collect(),
            running_var.data().iter().map(|v| v.as_f64()).collect(),
        )
    };

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + p.epsilon).sqrt()).collect();
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let m = T::of(mean[ch]);
            let is = T::of(inv_std[ch]);
            let (gm, bt) = (gamma.data()[ch], beta.data()[ch]);
            let range = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            for ((o, xh), &v) in out[range.clone()].iter_mut().zip(&mut xhat[range.clone()]).zip(&x[range]) {
                *xh = (v - m) * is;
                *o = gm * *xh + bt;
            }
        }
    }

    let running = if p.training {
        let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        let mom = p.momentum;
        let rm =
            running_mean.data().iter().zip(&mean).map(|(&r, &m)| T::of((1.0 - mom) * r.as_f64() + mom * m)).collect();
        let rv = running_var
            .data()
            .iter()
            .zip(&var)
            .map(|(&r, &v)| T::of((1.0 - mom) * r.as_f64() + mom * v * unbiased))
            .collect();
        Some((Tensor::new(&[c], rm)?, Tensor::new(&[c], rv)?))
    } else {
        None
    };

    let output = Tensor::new(input.shape(), out)?;
    output.check_finite("batch_norm2d")?;
    Ok(BatchNormOutput {
        output,
        normalized: Tensor::new(input.shape(), xhat)?,
        inv_std: inv_std.into_iter().map(T::of).collect(),
        running,
    })
}

/// Returns `(d_input, d_gamma, d_beta)`.
pub(crate) fn batch_norm2d_backward<T: Element>(
    normalized: &Tensor<T>,
    inv_std: &[T],
    gamma: &Tensor<T>,
    training: bool,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = normalized.dims4("batch_norm2d_backward")?;
    let hw = h * w;
    let count = (n * hw) as f64;
    let xh = normalized.data();
    let dy = grad_out.data();
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for b in 0..n {
        for ch in 0..c {
            let range = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            for (&g, &x) in dy[range.clone()].iter().zip(&xh[range]) {
                dbeta[ch] += g.as_f64();
                dgamma[ch] += g.as_f64() * x.as_f64();
            }
        }
    }
    let mut dx = vec![T::zero(); xh.len()];
    for b in 0..n {
        for ch in 0..c {
            let gm = gamma.data()[ch].as_f64();
            let is = inv_std[ch].as_f64();
            let range = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            for ((d, &g), &x) in dx[range.clone()].iter_mut().zip(&dy[range.clone()]).zip(&xh[range]) {
                let v = if training {
                    // dx = gamma*inv_std/M * (M*dy - sum(dy) - xhat*sum(dy*xhat))
                    gm * is / count * (count * g.as_f64() - dbeta[ch] - x.as_f64() * dgamma[ch])
                } else {
                    gm * is * g.as_f64()
                };
                *d = T::of(v);
            }
        }
    }
    Ok((
        Tensor::new(normalized.shape(), dx)?,
        Tensor::new(&[c], dgamma.into_iter().map(T::of).collect())?,
        Tensor::new(&[c], dbeta.into_iter().map(T::of).collect())?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn affine(c: usize) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        (Tensor::ones(&[c]), Tensor::zeros(&[c]), Tensor::zeros(&[c]), Tensor::ones(&[c]))
    }

    #[test]
    fn constant_input_normalizes_to_zero() {
        let x = Tensor::<f64>::full(&[2, 3, 4, 4], 7.5);
        let (g, b, rm, rv) = affine(3);
        let out = batch_norm2d(&x, &g, &b, &rm, &rv, BatchNormParams::default()).unwrap();
        assert!(out.output.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_pixel_batch_is_defined() {
        let x = Tensor::<f64>::full(&[1, 2, 1, 1], 3.0);
        let (g, b, rm, rv) = affine(2);
        let out = batch_norm2d(&x, &g, &b, &rm, &rv, BatchNormParams::default()).unwrap();
        assert!(out.output.all_finite());
    }

    #[test]
    fn eval_with_unit_stats_is_identity() {
        let x = Tensor::<f64>::from_fn(&[1, 2, 3, 3], |i| i as f64 - 9.0);
        let (g, b, rm, rv) = affine(2);
        let p = BatchNormParams { training: false, momentum: 0.1, epsilon: 1e-12 };
        let out = batch_norm2d(&x, &g, &b, &rm, &rv, p).unwrap();
        assert!(out.output.max_abs_diff(&x) < 1e-9);
        assert!(out.running.is_none());
    }

    #[test]
    fn running_stats_follow_ema() {
        let x = Tensor::<f64>::new(&[2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
        let (g, b, rm, rv) = affine(1);
        let out = batch_norm2d(&x, &g, &b, &rm, &rv, BatchNormParams::default()).unwrap();
        let (m, v) = out.running.unwrap();
        assert!((m.item() - 0.2).abs() < 1e-12); // 0.9*0 + 0.1*2
        assert!((v.item() - (0.9 + 0.1 * 2.0)).abs() < 1e-12); // unbiased var of {1,3} = 2
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let x = Tensor::<f64>::zeros(&[1, 3, 2, 2]);
        let (g, b, rm, rv) = affine(2);
        assert!(batch_norm2d(&x, &g, &b, &rm, &rv, BatchNormParams::default()).is_err());
    }
}
