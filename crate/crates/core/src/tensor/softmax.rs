use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Softmax over the channel axis of an NCHW tensor, max-subtracted.
pub fn softmax_channelwise<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let mut out = log_softmax_channelwise(input)?;
    for v in out.data_mut() {
        *v = v.exp();
    }
    Ok(out)
}

/// `x - logsumexp(x)` over the channel axis.
pub fn log_softmax_channelwise<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4("softmax")?;
    if !input.all_finite() {
        return Err(Error::NonFinite { op: "softmax" });
    }
    let hw = h * w;
    let x = input.data();
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        let base = b * c * hw;
        for p in 0..hw {
            let mut max = T::neg_infinity();
            for k in 0..c {
                max = max.max(x[base + k * hw + p]);
            }
            let mut sum = T::zero();
            for k in 0..c {
                sum = sum + (x[base + k * hw + p] - max).exp();
            }
            let lse = max + sum.ln();
            for k in 0..c {
                out[base + k * hw + p] = x[base + k * hw + p] - lse;
            }
        }
    }
    Tensor::new(input.shape(), out)
}

/// Softmax backward given the softmax output `y`:
/// `dx = y * (dy - sum_k(dy * y))` per pixel.
pub(crate) fn softmax_backward<T: Element>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = y.dims4("softmax_backward")?;
    let hw = h * w;
    let (yd, gd) = (y.data(), grad_out.data());
    let mut dx = vec![T::zero(); yd.len()];
    for b in 0..n {
        let base = b * c * hw;
        for p in 0..hw {
            let dot: T = (0..c).map(|k| yd[base + k * hw + p] * gd[base + k * hw + p]).sum();
            for k in 0..c {
                let i = base + k * hw + p;
                dx[i] = yd[i] * (gd[i] - dot);
            }
        }
    }
    Tensor::new(y.shape(), dx)
}

/// Mean per-pixel negative log-likelihood of `targets` under the channel
/// softmax of `logits`. Returns `(loss, softmax probabilities)`.
pub fn cross_entropy<T: Element>(logits: &Tensor<T>, targets: &[u8]) -> Result<(T, Tensor<T>)> {
    let (n, c, h, w) = logits.dims4("cross_entropy")?;
    let hw = h * w;
    if targets.len() != n * hw {
        return Err(Error::shape("cross_entropy", format!("{} targets for {n}x{h}x{w} logits", targets.len())));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= c) {
        return Err(Error::InvalidArgument(format!("target class {bad} out of range for {c} classes")));
    }
    let logp = log_softmax_channelwise(logits)?;
    let lp = logp.data();
    let mut total = 0.0f64;
    for b in 0..n {
        for p in 0..hw {
            let t = targets[b * hw + p] as usize;
            total -= lp[b * c * hw + t * hw + p].as_f64();
        }
    }
    let loss = T::of(total / (n * hw) as f64);
    let probs = logp.map(|v| v.exp());
    if super::finite_checks_enabled() && !loss.is_finite() {
        return Err(Error::NonFinite { op: "cross_entropy" });
    }
    Ok((loss, probs))
}

/// `(softmax - one_hot(target)) * grad / pixel_count`.
pub(crate) fn cross_entropy_backward<T: Element>(probs: &Tensor<T>, targets: &[u8], grad: T) -> Result<Tensor<T>> {
    let (n, c, h, w) = probs.dims4("cross_entropy_backward")?;
    let hw = h * w;
    let scale = grad / T::of((n * hw) as f64);
    let mut dx = probs.map(|p| p * scale);
    let d = dx.data_mut();
    for b in 0..n {
        for p in 0..hw {
            let t = targets[b * hw + p] as usize;
            let i = b * c * hw + t * hw + p;
            d[i] = d[i] - scale;
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_logits_give_uniform_probabilities() {
        let x = Tensor::<f64>::full(&[1, 5, 2, 2], 0.3);
        let y = softmax_channelwise(&x).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn two_class_closed_form() {
        let x = Tensor::<f64>::new(&[1, 2, 1, 1], vec![0.0, 3f64.ln()]).unwrap();
        let y = softmax_channelwise(&x).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-15);
        assert!((y.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let x = Tensor::<f32>::new(&[1, 2, 1, 1], vec![1000.0, 0.0]).unwrap();
        let y = softmax_channelwise(&x).unwrap();
        assert_eq!(y.data(), &[1.0, 0.0]);
    }

    #[test]
    fn uniform_logits_loss_is_ln_k() {
        let x = Tensor::<f64>::zeros(&[2, 5, 3, 3]);
        let targets: Vec<u8> = (0..18).map(|i| (i % 5) as u8).collect();
        let (loss, _) = cross_entropy(&x, &targets).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_prediction_has_near_zero_loss() {
        let x = Tensor::<f64>::new(&[1, 3, 1, 1], vec![-50.0, 60.0, -50.0]).unwrap();
        let (loss, _) = cross_entropy(&x, &[1]).unwrap();
        assert!((0.0..1e-40).contains(&loss));
    }

    #[test]
    fn out_of_range_target_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 3, 1, 1]);
        assert!(cross_entropy(&x, &[3]).is_err());
    }
}
