//! 2-D convolution as tiled im2col + GEMM.
//!
//! Output positions are processed in tiles so the column buffer stays bounded
//! (a 3x3 conv over 304 channels at 168x320 would otherwise need ~150M
//! entries). Tile boundaries depend only on shapes, so results are
//! reproducible.

use serde::{Deserialize, Serialize};

use super::gemm::{gemm, MatMut, MatRef};
use super::{Element, Tensor};
use crate::error::{Error, Result};

const TILE_ELEMS: usize = 1 << 21;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvParams {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for ConvParams {
    fn default() -> Self {
        ConvParams { stride: 1, padding: 0, dilation: 1, groups: 1 }
    }
}

impl ConvParams {
    pub fn new(stride: usize, padding: usize, dilation: usize, groups: usize) -> Self {
        ConvParams { stride, padding, dilation, groups }
    }
}

/// `floor((size + 2*padding - dilation*(kernel-1) - 1) / stride) + 1`, or
/// `None` when the dilated kernel does not fit.
pub fn conv_output_dim(size: usize, kernel: usize, stride: usize, padding: usize, dilation: usize) -> Option<usize> {
    let span = dilation * (kernel - 1) + 1;
    let padded = size + 2 * padding;
    if padded < span || stride == 0 {
        return None;
    }
    Some((padded - span) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    cg: usize,
    og: usize,
    p: ConvParams,
}

impl Geometry {
    fn new(input: &[usize], weight: &[usize], p: ConvParams) -> Result<Self> {
        let [n, c, h, w] = *input else {
            return Err(Error::shape("conv2d", format!("input must be NCHW, got {input:?}")));
        };
        let [o, cg, kh, kw] = *weight else {
            return Err(Error::shape("conv2d", format!("weight must be OIHW, got {weight:?}")));
        };
        if p.stride == 0 || p.dilation == 0 || p.groups == 0 {
            return Err(Error::shape("conv2d", "stride, dilation and groups must be >= 1"));
        }
        if c % p.groups != 0 || o % p.groups != 0 {
            return Err(Error::shape(
                "conv2d",
                format!("channels in={c} out={o} not divisible by groups={}", p.groups),
            ));
        }
        if cg != c / p.groups {
            return Err(Error::shape(
                "conv2d",
                format!("weight expects {cg} input channels per group, input has {}", c / p.groups),
            ));
        }
        let oh = conv_output_dim(h, kh, p.stride, p.padding, p.dilation);
        let ow = conv_output_dim(w, kw, p.stride, p.padding, p.dilation);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(Error::shape(
                "conv2d",
                format!("non-positive output for input {h}x{w}, kernel {kh}x{kw}, {p:?}"),
            ));
        };
        Ok(Geometry { n, c, h, w, o, kh, kw, oh, ow, cg, og: o / p.groups, p })
    }

    fn kg(&self) -> usize {
        self.cg * self.kh * self.kw
    }

    fn ohw(&self) -> usize {
        self.oh * self.ow
    }

    fn hw(&self) -> usize {
        self.h * self.w
    }

    /// 1x1, stride 1, no padding: the input plane block is already the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.p.stride == 1 && self.p.padding == 0
    }

    fn tile_len(&self) -> usize {
        (TILE_ELEMS / self.kg().max(1)).clamp(1, self.ohw())
    }
}

/// Range of output columns `ox in [lo, hi)` within `[ox0, ox1)` whose input
/// column `ox*stride + offset` lies in `[0, width)`.
fn valid_cols(ox0: usize, ox1: usize, stride: usize, offset: isize, width: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    let last = width as isize - 1 - offset;
    let hi = if last < 0 { 0 } else { last / s + 1 };
    let lo = (lo.max(0) as usize).clamp(ox0, ox1);
    let hi = (hi.max(0) as usize).clamp(lo, ox1);
    (lo, hi)
}

/// Splits output positions `[p0, p1)` into per-row segments and calls
/// `visit(offset_in_tile, oy, ox0, ox1)` for each.
fn for_each_segment(g: &Geometry, p0: usize, p1: usize, mut visit: impl FnMut(usize, usize, usize, usize)) {
    let mut pos = p0;
    while pos < p1 {
        let oy = pos / g.ow;
        let ox0 = pos % g.ow;
        let ox1 = g.ow.min(ox0 + (p1 - pos));
        visit(pos - p0, oy, ox0, ox1);
        pos += ox1 - ox0;
    }
}

fn im2col<T: Element>(g: &Geometry, plane_block: &[T], p0: usize, p1: usize, cols: &mut [T]) {
    let len = p1 - p0;
    let (s, d, pad) = (g.p.stride, g.p.dilation, g.p.padding as isize);
    for ci in 0..g.cg {
        let plane = &plane_block[ci * g.hw()..(ci + 1) * g.hw()];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (ci * g.kh + ki) * g.kw + kj;
                let row = &mut cols[r * len..(r + 1) * len];
                let offset = (kj * d) as isize - pad;
                for_each_segment(g, p0, p1, |t, oy, ox0, ox1| {
                    let seg = &mut row[t..t + (ox1 - ox0)];
                    let iy = (oy * s + ki * d) as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        seg.fill(T::zero());
                        return;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let (lo, hi) = valid_cols(ox0, ox1, s, offset, g.w);
                    seg[..lo - ox0].fill(T::zero());
                    seg[hi - ox0..].fill(T::zero());
                    if hi > lo {
                        let start = (lo as isize * s as isize + offset) as usize;
                        let dst = &mut seg[lo - ox0..hi - ox0];
                        if s == 1 {
                            dst.copy_from_slice(&src[start..start + (hi - lo)]);
                        } else {
                            for (i, v) in dst.iter_mut().enumerate() {
                                *v = src[start + i * s];
                            }
                        }
                    }
                });
            }
        }
    }
}

fn col2im<T: Element>(g: &Geometry, cols: &[T], p0: usize, p1: usize, plane_block: &mut [T]) {
    let len = p1 - p0;
    let (s, d, pad) = (g.p.stride, g.p.dilation, g.p.padding as isize);
    let hw = g.hw();
    for ci in 0..g.cg {
        let plane = &mut plane_block[ci * hw..(ci + 1) * hw];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (ci * g.kh + ki) * g.kw + kj;
                let row = &cols[r * len..(r + 1) * len];
                let offset = (kj * d) as isize - pad;
                for_each_segment(g, p0, p1, |t, oy, ox0, ox1| {
                    let iy = (oy * s + ki * d) as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        return;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let (lo, hi) = valid_cols(ox0, ox1, s, offset, g.w);
                    let seg = &row[t + (lo - ox0)..t + (hi - ox0)];
                    let start = lo as isize * s as isize + offset;
                    for (i, &v) in seg.iter().enumerate() {
                        let ix = (start + (i * s) as isize) as usize;
                        dst[ix] = dst[ix] + v;
                    }
                });
            }
        }
    }
}

/// Forward convolution. `bias` has shape `[O]`.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    params: ConvParams,
) -> Result<Tensor<T>> {
    let g = Geometry::new(input.shape(), weight.shape(), params)?;
    if let Some(b) = bias {
        if b.shape() != [g.o] {
            return Err(Error::shape("conv2d", format!("bias shape {:?}, expected [{}]", b.shape(), g.o)));
        }
    }
    let (ohw, hw, kg) = (g.ohw(), g.hw(), g.kg());
    let mut out = vec![T::zero(); g.n * g.o * ohw];
    if let Some(b) = bias {
        for (chunk, &bv) in out.chunks_mut(ohw).zip(b.data().iter().cycle()) {
            chunk.fill(bv);
        }
    }
    let x = input.data();
    let wt = weight.data();
    let tile = g.tile_len();
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kg * tile] };
    for b in 0..g.n {
        for grp in 0..g.p.groups {
            let block = &x[(b * g.c + grp * g.cg) * hw..(b * g.c + (grp + 1) * g.cg) * hw];
            let w_view = MatRef::rows(&wt[grp * g.og * kg..(grp + 1) * g.og * kg], g.og, kg);
            let out_base = (b * g.o + grp * g.og) * ohw;
            let mut p0 = 0;
            while p0 < ohw {
                let p1 = (p0 + tile).min(ohw);
                let len = p1 - p0;
                let rhs = if g.is_pointwise() {
                    MatRef { data: &block[p0..], rows: g.cg, cols: len, rs: hw, cs: 1 }
                } else {
                    im2col(&g, block, p0, p1, &mut cols[..kg * len]);
                    MatRef::rows(&cols[..kg * len], kg, len)
                };
                let dst = MatMut { data: &mut out[out_base + p0..], rows: g.og, cols: len, rs: ohw, cs: 1 };
                gemm(T::one(), w_view, rhs, T::one(), dst);
                p0 = p1;
            }
        }
    }
    let out = Tensor::new(&[g.n, g.o, g.oh, g.ow], out)?;
    out.check_finite("conv2d")?;
    Ok(out)
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

/// Gradients of a convolution with respect to its input (when requested),
/// weight and bias (when present).
pub fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    params: ConvParams,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let g = Geometry::new(input.shape(), weight.shape(), params)?;
    if grad_out.shape() != [g.n, g.o, g.oh, g.ow] {
        return Err(Error::shape("conv2d_backward", format!("grad shape {:?}", grad_out.shape())));
    }
    let (ohw, hw, kg) = (g.ohw(), g.hw(), g.kg());
    let x = input.data();
    let wt = weight.data();
    let dy = grad_out.data();
    let mut dw = vec![T::zero(); weight.numel()];
    let mut dx = if need_input { vec![T::zero(); input.numel()] } else { Vec::new() };
    let tile = g.tile_len();
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kg * tile] };
    let mut dcols = if g.is_pointwise() || !need_input { Vec::new() } else { vec![T::zero(); kg * tile] };

    for b in 0..g.n {
        for grp in 0..g.p.groups {
            let x_range = (b * g.c + grp * g.cg) * hw..(b * g.c + (grp + 1) * g.cg) * hw;
            let block = &x[x_range.clone()];
            let dy_base = (b * g.o + grp * g.og) * ohw;
            let w_slice = &wt[grp * g.og * kg..(grp + 1) * g.og * kg];
            let mut p0 = 0;
            while p0 < ohw {
                let p1 = (p0 + tile).min(ohw);
                let len = p1 - p0;
                let dy_view = MatRef { data: &dy[dy_base + p0..], rows: g.og, cols: len, rs: ohw, cs: 1 };

                let cols_t = if g.is_pointwise() {
                    MatRef { data: &block[p0..], rows: len, cols: g.cg, rs: 1, cs: hw }
                } else {
                    im2col(&g, block, p0, p1, &mut cols[..kg * len]);
                    MatRef::transposed(&cols[..kg * len], len, kg)
                };
                let dw_view = MatMut::rows(&mut dw[grp * g.og * kg..(grp + 1) * g.og * kg], g.og, kg);
                gemm(T::one(), dy_view, cols_t, T::one(), dw_view);

                if need_input {
                    let w_t = MatRef::transposed(w_slice, kg, g.og);
                    if g.is_pointwise() {
                        let dst = MatMut {
                            data: &mut dx[x_range.start + p0..x_range.end],
                            rows: g.cg,
                            cols: len,
                            rs: hw,
                            cs: 1,
                        };
                        gemm(T::one(), w_t, dy_view, T::one(), dst);
                    } else {
                        let dc = &mut dcols[..kg * len];
                        gemm(T::one(), w_t, dy_view, T::zero(), MatMut::rows(dc, kg, len));
                        col2im(&g, dc, p0, p1, &mut dx[x_range.clone()]);
                    }
                }
                p0 = p1;
            }
        }
    }

    let bias = if has_bias {
        let mut db = vec![T::zero(); g.o];
        for b in 0..g.n {
            for (oc, acc) in db.iter_mut().enumerate() {
                let row = &dy[(b * g.o + oc) * ohw..(b * g.o + oc + 1) * ohw];
                *acc = *acc + row.iter().copied().sum::<T>();
            }
        }
        Some(Tensor::new(&[g.o], db)?)
    } else {
        None
    };
    Ok(ConvGrads {
        input: if need_input { Some(Tensor::new(input.shape(), dx)?) } else { None },
        weight: Tensor::new(weight.shape(), dw)?,
        bias,
    })
}
