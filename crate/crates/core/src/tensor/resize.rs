use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Source taps for one output coordinate: `(i0, i1, weight of i1)`.
#[derive(Debug, Clone, Copy)]
struct Tap {
    i0: usize,
    i1: usize,
    frac: f64,
}

fn taps(in_size: usize, out_size: usize, align_corners: bool) -> Vec<Tap> {
    (0..out_size)
        .map(|o| {
            let src = if align_corners {
                if out_size > 1 {
                    o as f64 * (in_size - 1) as f64 / (out_size - 1) as f64
                } else {
                    0.0
                }
            } else {
                let scale = in_size as f64 / out_size as f64;
                ((o as f64 + 0.5) * scale - 0.5).max(0.0)
            };
            let i0 = (src.floor() as usize).min(in_size - 1);
            let i1 = (i0 + 1).min(in_size - 1);
            Tap { i0, i1, frac: src - i0 as f64 }
        })
        .collect()
}

/// Bilinear resize of each NCHW plane to `out_h x out_w`.
///
/// With `align_corners = false` source coordinates use half-pixel centres,
/// `src = (dst + 0.5) * in / out - 0.5`, clamped at 0.
pub fn bilinear_upsample<T: Element>(
    input: &Tensor<T>,
    out_h: usize,
    out_w: usize,
    align_corners: bool,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4("bilinear_upsample")?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("bilinear_upsample", "output size must be >= 1"));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(input.clone());
    }
    let ty = taps(h, out_h, align_corners);
    let tx = taps(w, out_w, align_corners);
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in input.data().chunks(h * w) {
        for y in &ty {
            let (r0, r1) = (&plane[y.i0 * w..(y.i0 + 1) * w], &plane[y.i1 * w..(y.i1 + 1) * w]);
            let fy = T::of(y.frac);
            let gy = T::one() - fy;
            for x in &tx {
                let fx = T::of(x.frac);
                let gx = T::one() - fx;
                let top = r0[x.i0] * gx + r0[x.i1] * fx;
                let bottom = r1[x.i0] * gx + r1[x.i1] * fx;
                out.push(top * gy + bottom * fy);
            }
        }
    }
    let output = Tensor::new(&[n, c, out_h, out_w], out)?;
    output.check_finite("bilinear_upsample")?;
    Ok(output)
}

pub(crate) fn bilinear_upsample_backward<T: Element>(
    input_shape: &[usize],
    align_corners: bool,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (out_h, out_w) = (grad_out.shape()[2], grad_out.shape()[3]);
    if (out_h, out_w) == (h, w) {
        return Ok(grad_out.clone());
    }
    let ty = taps(h, out_h, align_corners);
    let tx = taps(w, out_w, align_corners);
    let mut dx = Tensor::zeros(input_shape);
    for (plane, gplane) in dx.data_mut().chunks_mut(h * w).zip(grad_out.data().chunks(out_h * out_w)) {
        for (oy, y) in ty.iter().enumerate() {
            let fy = T::of(y.frac);
            let gy = T::one() - fy;
            for (ox, x) in tx.iter().enumerate() {
                let g = gplane[oy * out_w + ox];
                let fx = T::of(x.frac);
                let gx = T::one() - fx;
                plane[y.i0 * w + x.i0] = plane[y.i0 * w + x.i0] + g * gy * gx;
                plane[y.i0 * w + x.i1] = plane[y.i0 * w + x.i1] + g * gy * fx;
                plane[y.i1 * w + x.i0] = plane[y.i1 * w + x.i0] + g * fy * gx;
                plane[y.i1 * w + x.i1] = plane[y.i1 * w + x.i1] + g * fy * fx;
            }
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_stays_constant() {
        let x = Tensor::<f64>::full(&[1, 2, 3, 5], 0.75);
        let y = bilinear_upsample(&x, 11, 4, false).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.75).abs() < 1e-15));
    }

    #[test]
    fn same_size_is_exact_copy() {
        let x = Tensor::<f32>::from_fn(&[1, 1, 3, 3], |i| i as f32 * 1.1);
        assert_eq!(bilinear_upsample(&x, 3, 3, false).unwrap(), x);
    }

    #[test]
    fn align_corners_hits_endpoints() {
        let x = Tensor::<f64>::new(&[1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
        let y = bilinear_upsample(&x, 1, 5, true).unwrap();
        assert_eq!(y.data(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
    }
}
