use super::conv::conv_output_dim;
use super::{Element, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolParams {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolParams {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        PoolParams { kernel, stride, padding }
    }
}

pub struct MaxPoolOutput<T> {
    pub output: Tensor<T>,
    /// Flat input index selected for every output element.
    pub argmax: Vec<usize>,
}

/// Max pooling with implicit `-inf` padding. Ties go to the first element in
/// row-major window order.
pub fn max_pool2d<T: Element>(input: &Tensor<T>, p: PoolParams) -> Result<MaxPoolOutput<T>> {
    let (n, c, h, w) = input.dims4("max_pool2d")?;
    if p.kernel == 0 || p.stride == 0 {
        return Err(Error::shape("max_pool2d", "kernel and stride must be positive"));
    }
    if 2 * p.padding > p.kernel {
        return Err(Error::shape("max_pool2d", "padding must be at most half the kernel"));
    }
    let oh = conv_output_dim(h, p.kernel, p.stride, p.padding, 1);
    let ow = conv_output_dim(w, p.kernel, p.stride, p.padding, 1);
    let (Some(oh), Some(ow)) = (oh, ow) else {
        return Err(Error::shape("max_pool2d", format!("spatial {h}x{w} smaller than kernel {}", p.kernel)));
    };
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let pad = p.padding as isize;
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_idx = usize::MAX;
                for ki in 0..p.kernel {
                    let iy = (oy * p.stride + ki) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..p.kernel {
                        let ix = (ox * p.stride + kj) as isize - pad;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        if best_idx == usize::MAX || x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    let output = Tensor::new(&[n, c, oh, ow], out)?;
    output.check_finite("max_pool2d")?;
    Ok(MaxPoolOutput { output, argmax })
}

pub(crate) fn max_pool2d_backward<T: Element>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        d[idx] = d[idx] + g;
    }
    Ok(dx)
}

/// Spatial mean per channel, `N x C x 1 x 1`.
pub fn global_avg_pool2d<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4("global_avg_pool2d")?;
    let hw = h * w;
    let out: Vec<T> =
        input.data().chunks(hw).map(|plane| T::of(plane.iter().map(|v| v.as_f64()).sum::<f64>() / hw as f64)).collect();
    let output = Tensor::new(&[n, c, 1, 1], out)?;
    output.check_finite("global_avg_pool2d")?;
    Ok(output)
}

pub(crate) fn global_avg_pool2d_backward<T: Element>(input_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let hw = input_shape[2] * input_shape[3];
    let scale = T::of(1.0 / hw as f64);
    let mut dx = Tensor::zeros(input_shape);
    for (plane, &g) in dx.data_mut().chunks_mut(hw).zip(grad_out.data()) {
        plane.fill(g * scale);
    }
    Ok(dx)
}
