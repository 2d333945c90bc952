//! Gaussian smoothing and same-resolution Laplacian pyramids.
//!
//! Level `l` of the pyramid is `G_l(x) − G_{l+1}(x)` where `G_0` is the
//! identity and `G_l` for `l ≥ 1` is a Gaussian blur with standard
//! deviation `σ_l`. The coarsest blur `G_L` is kept as the residual, so
//! the bands and the residual telescope back to the input.

use crate::error::{Error, Result};
use crate::numerics::{kernels, Float, Graph, Tensor, Var};

/// Blur scales of a pyramid with `L = sigmas.len()` band-pass levels.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSpec {
    sigmas: Vec<f64>,
}

impl Default for GaussianSpec {
    fn default() -> Self {
        Self {
            sigmas: vec![1.0, 2.0, 4.0],
        }
    }
}

impl GaussianSpec {
    pub fn new(sigmas: Vec<f64>) -> Result<Self> {
        if sigmas.is_empty() {
            return Err(Error::param("pyramid needs at least one blur scale"));
        }
        if sigmas.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::param(format!("pyramid sigmas must be positive, got {sigmas:?}")));
        }
        if sigmas.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::param(format!(
                "pyramid sigmas must be strictly increasing, got {sigmas:?}"
            )));
        }
        Ok(Self { sigmas })
    }

    /// Number of band-pass levels `L`.
    pub fn levels(&self) -> usize {
        self.sigmas.len()
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }
}

/// Truncation radius for a blur of standard deviation `sigma`.
pub fn kernel_radius(sigma: f64) -> usize {
    (3.0 * sigma).ceil() as usize
}

/// Unit-sum 1-D Gaussian taps of length `2·radius + 1`.
pub fn gaussian_taps<T: Float>(sigma: f64, radius: usize) -> Result<Vec<T>> {
    if !(sigma > 0.0) {
        return Err(Error::param(format!("gaussian sigma must be positive, got {sigma}")));
    }
    let r = radius as isize;
    let raw: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| T::of(v / sum)).collect())
}

/// 2-D kernel `∝ exp(−(i²+j²)/(2σ²))` on a `(2r+1)×(2r+1)` grid,
/// renormalized to unit sum.
pub fn gaussian_kernel<T: Float>(sigma: f64, radius: usize) -> Result<Tensor<T>> {
    if !(sigma > 0.0) {
        return Err(Error::param(format!("gaussian sigma must be positive, got {sigma}")));
    }
    let n = 2 * radius + 1;
    let r = radius as f64;
    let raw: Vec<f64> = (0..n * n)
        .map(|idx| {
            let i = (idx / n) as f64 - r;
            let j = (idx % n) as f64 - r;
            (-(i * i + j * j) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = raw.iter().sum();
    Tensor::new(&[n, n], raw.into_iter().map(|v| T::of(v / sum)).collect())
}

fn grid(x: &Tensor<impl Float>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(Error::dim(format!("expected an HxWxC map, got {s:?}"))),
    }
}

/// Channelwise Gaussian blur with reflect padding, computed separably.
/// `sigma = 0` returns the input unchanged.
pub fn gaussian_blur<T: Float>(x: &Tensor<T>, sigma: f64) -> Result<Tensor<T>> {
    let (h, w, c) = grid(x)?;
    if sigma == 0.0 {
        return Ok(x.clone());
    }
    let taps = gaussian_taps::<T>(sigma, kernel_radius(sigma))?;
    let mut tmp = vec![T::zero(); x.numel()];
    kernels::conv_axis(x.data(), &taps, h, w, c, 1, &mut tmp);
    let mut out = vec![T::zero(); x.numel()];
    kernels::conv_axis(&tmp, &taps, h, w, c, 0, &mut out);
    Tensor::new(x.shape(), out)
}

/// Band-pass levels plus the coarsest Gaussian residual.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidStack<T: Float = f32> {
    pub bands: Vec<Tensor<T>>,
    pub residual: Tensor<T>,
}

pub fn build_pyramid<T: Float>(x: &Tensor<T>, spec: &GaussianSpec) -> Result<PyramidStack<T>> {
    grid(x)?;
    let mut gaussians = Vec::with_capacity(spec.levels() + 1);
    gaussians.push(x.clone());
    for &s in spec.sigmas() {
        gaussians.push(gaussian_blur(x, s)?);
    }
    let bands = gaussians
        .windows(2)
        .map(|p| {
            let d = p[0].data().iter().zip(p[1].data()).map(|(&a, &b)| a - b).collect();
            Tensor::new(x.shape(), d)
        })
        .collect::<Result<Vec<_>>>()?;
    let residual = gaussians.pop().expect("at least one blur");
    Ok(PyramidStack { bands, residual })
}

/// Sum of all bands plus the residual.
pub fn reconstruct<T: Float>(p: &PyramidStack<T>) -> Result<Tensor<T>> {
    let shape = p.residual.shape();
    let mut out = p.residual.data().to_vec();
    for b in &p.bands {
        if b.shape() != shape {
            return Err(Error::dim(format!(
                "pyramid band {:?} does not match residual {shape:?}",
                b.shape()
            )));
        }
        for (o, &v) in out.iter_mut().zip(b.data()) {
            *o += v;
        }
    }
    Tensor::new(shape, out)
}

/// Recorded pyramid of an `h×w` token grid: returns the `L` bands followed
/// by the residual.
pub fn pyramid_levels<T: Float>(g: &mut Graph<T>, x: Var, h: usize, w: usize, spec: &GaussianSpec) -> Result<Vec<Var>> {
    let mut gaussians = vec![x];
    for &s in spec.sigmas() {
        let taps = gaussian_taps::<T>(s, kernel_radius(s))?;
        gaussians.push(g.separable_blur(x, h, w, &taps)?);
    }
    let mut levels = Vec::with_capacity(gaussians.len());
    for p in gaussians.windows(2) {
        levels.push(g.sub(p[0], p[1])?);
    }
    levels.push(*gaussians.last().expect("non-empty"));
    Ok(levels)
}
