//! Dense NCHW tensors, the differentiable operator set used by the models,
//! and a reverse-mode tape.
//!
//! Tensors are plain row-major buffers generic over [`Element`] (`f32` for
//! training and inference, `f64` for finite-difference checks). Gradient
//! tracking lives on the [`Tape`]: each operator method on the tape computes
//! its forward result eagerly and, when recording, pushes a node holding the
//! activations its backward pass needs.

mod autograd;
mod conv;
mod elementwise;
mod gemm;
mod norm;
mod param;
mod pool;
mod resize;
mod softmax;

use std::fmt;
use std::iter::Sum;
use std::sync::atomic::{AtomicBool, Ordering};

use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use autograd::{Gradients, Tape, Var, VarId};
pub use conv::{conv2d, conv2d_backward, conv_output_dim, ConvParams};
pub use elementwise::{dropout, dropout_mask, relu};
pub use norm::{batch_norm2d, BatchNormOutput, BatchNormParams};
pub use param::{ParamId, ParamKind, ParamStore, Parameter};
pub use pool::{global_avg_pool2d, max_pool2d, MaxPoolOutput, PoolParams};
pub use resize::bilinear_upsample;
pub use softmax::{cross_entropy, log_softmax_channelwise, softmax_channelwise};

static CHECK_FINITE: AtomicBool = AtomicBool::new(false);

/// Enables output validation in every forward operator. Off by default;
/// when on, an operator producing NaN/Inf returns [`Error::NonFinite`].
pub fn set_finite_checks(enabled: bool) {
    CHECK_FINITE.store(enabled, Ordering::Relaxed);
}

pub fn finite_checks_enabled() -> bool {
    CHECK_FINITE.load(Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }
}

/// Floating-point element type of a tensor.
pub trait Element: Float + FromPrimitive + Default + fmt::Debug + fmt::Display + Send + Sync + Sum + 'static {
    const DTYPE: DType;

    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `C = alpha * A * B + beta * C` on strided row/column-major views.
    ///
    /// # Safety
    /// Every index reachable through the given dimensions and strides must
    /// be in bounds for the corresponding pointer.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn write_le(self, out: &mut Vec<u8>);
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    fn of(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    fn of(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

/// Dense row-major tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor").field("shape", &self.shape).field("data", &preview).finish()
    }
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape("tensor", format!("zero-sized dimension in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {numel} elements, buffer has {}", data.len()),
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..numel).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    /// Splits an NCHW shape into its four dimensions.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(op, format!("expected NCHW tensor, got {:?}", self.shape))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape("reshape", format!("cannot view {:?} as {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape("zip", format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// `self += other`, shapes must agree.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("add_assign", format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data.iter().zip(&other.data).map(|(&a, &b)| (a - b).abs().as_f64()).fold(0.0, f64::max)
    }

    /// Converts element precision (used when moving between f32 and f64 models).
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::of(v.as_f64())).collect() }
    }

    pub(crate) fn check_finite(&self, op: &'static str) -> Result<()> {
        if finite_checks_enabled() && !self.all_finite() {
            return Err(Error::NonFinite { op });
        }
        Ok(())
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let (n, _, h, w) = first.dims4("concat")?;
        let mut total_c = 0;
        for p in parts {
            let (pn, pc, ph, pw) = p.dims4("concat")?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::shape("concat", format!("{:?} incompatible with {:?}", p.shape, first.shape)));
            }
            total_c += pc;
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * total_c * hw);
        for b in 0..n {
            for p in parts {
                let pc = p.shape[1];
                data.extend_from_slice(&p.data[b * pc * hw..(b + 1) * pc * hw]);
            }
        }
        Ok(Tensor { shape: vec![n, total_c, h, w], data })
    }

    /// Inverse of [`Tensor::concat_channels`].
    pub fn split_channels(&self, sizes: &[usize]) -> Result<Vec<Self>> {
        let (n, c, h, w) = self.dims4("split")?;
        if sizes.iter().sum::<usize>() != c {
            return Err(Error::shape("split", format!("sizes {sizes:?} do not sum to {c}")));
        }
        let hw = h * w;
        let mut out: Vec<Vec<T>> = sizes.iter().map(|&s| Vec::with_capacity(n * s * hw)).collect();
        for b in 0..n {
            let mut offset = b * c * hw;
            for (buf, &s) in out.iter_mut().zip(sizes) {
                buf.extend_from_slice(&self.data[offset..offset + s * hw]);
                offset += s * hw;
            }
        }
        Ok(out.into_iter().zip(sizes).map(|(data, &s)| Tensor { shape: vec![n, s, h, w], data }).collect())
    }

    /// Per-pixel argmax over channels; ties resolve to the lowest channel.
    pub fn argmax_channels(&self) -> Result<Vec<u8>> {
        let (n, c, h, w) = self.dims4("argmax")?;
        if c > u8::MAX as usize + 1 {
            return Err(Error::shape("argmax", "more than 256 classes"));
        }
        let hw = h * w;
        let mut out = vec![0u8; n * hw];
        for b in 0..n {
            let base = b * c * hw;
            for p in 0..hw {
                let mut best = self.data[base + p];
                let mut best_k = 0;
                for k in 1..c {
                    let v = self.data[base + k * hw + p];
                    if v > best {
                        best = v;
                        best_k = k;
                    }
                }
                out[b * hw + p] = best_k as u8;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_buffer() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(&[2, 0], vec![]).is_err());
        let t = Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
    }

    #[test]
    fn concat_then_split_restores_parts() {
        let a = Tensor::<f64>::from_fn(&[2, 1, 2, 2], |i| i as f64);
        let b = Tensor::<f64>::from_fn(&[2, 3, 2, 2], |i| -(i as f64));
        let cat = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), &[2, 4, 2, 2]);
        let parts = cat.split_channels(&[1, 3]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn argmax_tie_goes_to_lowest_channel() {
        let t = Tensor::<f32>::new(&[1, 3, 1, 2], vec![1.0, 0.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
        assert_eq!(t.argmax_channels().unwrap(), vec![0, 1]);
    }
}
