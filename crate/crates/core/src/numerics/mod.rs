//! Tensor type, compute kernels and the reverse-mode tape.
//!
//! The free functions here are the eager (no-tape) versions of the
//! differentiable operations recorded by [`Graph`].

mod float;
mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use float::{DType, Float};
pub use gradcheck::{grad_check, grad_check_with, GradCheck};
pub use graph::{Gradients, Graph, Var};
pub use kernels::ConvGeometry;
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Layer-norm epsilon used throughout the model.
pub const LAYER_NORM_EPS: f64 = 1e-6;

pub fn matmul<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, k) = a.dims2()?;
    let (k2, m) = b.dims2()?;
    if k != k2 {
        return Err(Error::dim(format!("matmul: {n}x{k} times {k2}x{m}")));
    }
    let mut out = vec![T::zero(); n * m];
    kernels::matmul_nn(a.data(), b.data(), &mut out, n, k, m);
    Tensor::new(&[n, m], out)
}

pub fn transpose<T: Float>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = a.dims2()?;
    Tensor::new(&[c, r], kernels::transpose(a.data(), r, c))
}

/// Softmax along `axis`, with the axis maximum subtracted first.
pub fn softmax_axis<T: Float>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::dim(format!(
            "softmax axis {axis} for shape {:?}",
            x.shape()
        )));
    }
    let (outer, len, inner) = kernels::axis_split(x.shape(), axis);
    let mut out = vec![T::zero(); x.numel()];
    kernels::softmax_strided(x.data(), &mut out, outer, len, inner);
    Tensor::new(x.shape(), out)
}

/// Normalizes over the last axis, then applies `gain` and `bias`.
pub fn layer_norm<T: Float>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let d = x.last_dim();
    if gain.numel() != d || bias.numel() != d {
        return Err(Error::dim(format!("layer_norm: affine params for width {d}")));
    }
    if eps <= 0.0 {
        return Err(Error::param("layer_norm eps must be positive"));
    }
    let mut out = vec![T::zero(); x.numel()];
    kernels::layer_norm_forward(x.data(), gain.data(), bias.data(), T::of(eps), d, &mut out);
    Tensor::new(x.shape(), out)
}

/// Channelwise "same" correlation of `x: H×W×C` with `kernel: kh×kw×C`
/// using reflect padding.
pub fn depthwise_conv2d<T: Float>(x: &Tensor<T>, kernel: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = match *x.shape() {
        [h, w, c] => (h, w, c),
        ref s => return Err(Error::dim(format!("depthwise_conv2d: input {s:?} is not HxWxC"))),
    };
    let (kh, kw) = match *kernel.shape() {
        [kh, kw, kc] if kc == c => (kh, kw),
        ref s => return Err(Error::dim(format!("depthwise_conv2d: kernel {s:?} for {c} channels"))),
    };
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::dim(format!("depthwise_conv2d: kernel {kh}x{kw} must have odd extents")));
    }
    let mut out = vec![T::zero(); x.numel()];
    kernels::depthwise_conv2d(x.data(), kernel.data(), h, w, c, kh, kw, &mut out);
    Tensor::new(x.shape(), out)
}

pub fn gelu<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    x.map(kernels::gelu)
}
