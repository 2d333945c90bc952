//! Frequency-response analysis of feature maps.
//!
//! Energies come from a per-channel 2-D DFT of the map mirrored about its
//! edges (no edge repeat, period `2(n−1)` per axis), the same extension the
//! blur uses, so borders add no spurious high frequencies. A bin's radius
//! is its frequency distance from DC divided by the Nyquist frequency (0.5
//! cycles per pixel), so axis-aligned Nyquist sits at radius 1 and the
//! corner at √2. Energies exclude the DC bin and are summed over channels.

use std::fmt::Write as _;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::model::LaplacianFormer;
use crate::numerics::{Float, Tensor};

/// Default radial cutoff as a fraction of Nyquist.
pub const DEFAULT_CUTOFF: f64 = 0.5;
/// Bins of the radial profile, covering radii `[0, √2]`.
pub const PROFILE_BINS: usize = 16;

fn fft2(x: &[f64], h: usize, w: usize) -> Vec<Complex<f64>> {
    let mut planner = FftPlanner::new();
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    let row = planner.plan_fft_forward(w);
    for r in buf.chunks_exact_mut(w) {
        row.process(r);
    }
    let col = planner.plan_fft_forward(h);
    let mut tmp = vec![Complex::new(0.0, 0.0); h];
    for j in 0..w {
        for i in 0..h {
            tmp[i] = buf[i * w + j];
        }
        col.process(&mut tmp);
        for i in 0..h {
            buf[i * w + j] = tmp[i];
        }
    }
    buf
}

/// Centred DFT magnitude of an `H×W` map; DC lands at `(H/2, W/2)`.
pub fn fft2_magnitude<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w) = x.dims2()?;
    let spec = fft2(&x.to_f64_vec(), h, w);
    let mut out = vec![T::zero(); h * w];
    for i in 0..h {
        for j in 0..w {
            let (ci, cj) = ((i + h / 2) % h, (j + w / 2) % w);
            out[ci * w + cj] = T::of(spec[i * w + j].norm());
        }
    }
    Tensor::new(&[h, w], out)
}

/// Normalized radius of uncentred bin `(i, j)`.
fn radius(i: usize, j: usize, h: usize, w: usize) -> f64 {
    let fy = i.min(h - i) as f64 / h as f64;
    let fx = j.min(w - j) as f64 / w as f64;
    (fy * fy + fx * fx).sqrt() / 0.5
}

fn map_dims<T: Float>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [h, w] => Ok((h, w, 1)),
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(Error::dim(format!("expected an HxW or HxWxC map, got {s:?}"))),
    }
}

/// Source index of each position of the mirrored period of an axis.
fn mirrored(n: usize) -> Vec<usize> {
    (0..n).chain((1..n.saturating_sub(1)).rev()).collect()
}

/// Calls `f(radius, energy)` for every non-DC bin of every channel.
fn for_each_bin<T: Float>(x: &Tensor<T>, mut f: impl FnMut(f64, f64)) -> Result<()> {
    let (h0, w0, c) = map_dims(x)?;
    let (rows, cols) = (mirrored(h0), mirrored(w0));
    let (h, w) = (rows.len(), cols.len());
    let data = x.data();
    let mut plane = vec![0.0; h * w];
    for ch in 0..c {
        for (i, &si) in rows.iter().enumerate() {
            for (j, &sj) in cols.iter().enumerate() {
                plane[i * w + j] = data[(si * w0 + sj) * c + ch].f64();
            }
        }
        let spec = fft2(&plane, h, w);
        // bins at rounding level relative to the total energy are zero
        let floor = 1e-24 * (h * w) as f64 * plane.iter().map(|v| v * v).sum::<f64>();
        for i in 0..h {
            for j in 0..w {
                let e = spec[i * w + j].norm_sqr();
                if (i == 0 && j == 0) || e <= floor {
                    continue;
                }
                f(radius(i, j, h, w), e);
            }
        }
    }
    Ok(())
}

fn check_cutoff(cutoff: f64) -> Result<()> {
    if !(cutoff > 0.0 && cutoff < 1.0) {
        return Err(Error::param(format!("cutoff must lie in (0, 1), got {cutoff}")));
    }
    Ok(())
}

/// Non-DC spectral energy `(inside, outside)` the cutoff radius.
pub fn band_energies<T: Float>(x: &Tensor<T>, cutoff: f64) -> Result<(f64, f64)> {
    check_cutoff(cutoff)?;
    let (mut low, mut high) = (0.0, 0.0);
    for_each_bin(x, |r, e| {
        if r > cutoff {
            high += e;
        } else {
            low += e;
        }
    })?;
    Ok((low, high))
}

/// Fraction of non-DC energy beyond `cutoff`; 0 when there is none.
pub fn high_freq_ratio<T: Float>(x: &Tensor<T>, cutoff: f64) -> Result<f64> {
    let (low, high) = band_energies(x, cutoff)?;
    Ok(ratio(low, high))
}

fn ratio(low: f64, high: f64) -> f64 {
    let total = low + high;
    if total <= 0.0 || !total.is_finite() {
        0.0
    } else {
        high / total
    }
}

/// Non-DC energy in [`PROFILE_BINS`] equal-width radius bins over `[0, √2]`.
pub fn radial_profile<T: Float>(x: &Tensor<T>) -> Result<Vec<f64>> {
    let mut bins = vec![0.0; PROFILE_BINS];
    let width = std::f64::consts::SQRT_2 / PROFILE_BINS as f64;
    for_each_bin(x, |r, e| {
        let b = ((r / width) as usize).min(PROFILE_BINS - 1);
        bins[b] += e;
    })?;
    Ok(bins)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralRow {
    /// 0 for the patch embedding, else the 1-based transformer layer index.
    pub layer: usize,
    pub low: f64,
    pub high: f64,
    pub ratio: f64,
    pub profile: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralReport {
    pub tag: String,
    pub cutoff: f64,
    /// Patch-embedding output, reported as layer 0.
    pub embedding: SpectralRow,
    /// One row per transformer layer, in depth order.
    pub rows: Vec<SpectralRow>,
}

impl SpectralReport {
    /// Ratio of summed energies over `layers`.
    pub fn pooled_ratio(&self, layers: std::ops::Range<usize>) -> f64 {
        let (low, high) = self.rows[layers]
            .iter()
            .fold((0.0, 0.0), |(l, h), r| (l + r.low, h + r.high));
        ratio(low, high)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,low,high,ratio\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{:e},{:e},{}", r.layer, r.low, r.high, r.ratio);
        }
        s
    }

    pub fn profile_csv(&self, layer: usize) -> Option<String> {
        let row = std::iter::once(&self.embedding)
            .chain(&self.rows)
            .find(|r| r.layer == layer)?;
        let width = std::f64::consts::SQRT_2 / PROFILE_BINS as f64;
        let mut s = String::from("bin,radius_lo,radius_hi,energy\n");
        for (b, e) in row.profile.iter().enumerate() {
            let _ = writeln!(s, "{b},{},{},{e:e}", b as f64 * width, (b + 1) as f64 * width);
        }
        Some(s)
    }

    /// Writes `<prefix>.csv` and `<prefix>_layerNN_profile.csv` into `dir`;
    /// the embedding profile is `layer00`.
    pub fn write(&self, dir: impl AsRef<Path>, prefix: &str) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join(format!("{prefix}.csv"));
        std::fs::write(&p, self.to_csv()).map_err(|e| Error::io(&p, e))?;
        for r in std::iter::once(&self.embedding).chain(&self.rows) {
            let p = dir.join(format!("{prefix}_layer{:02}_profile.csv", r.layer));
            let text = self.profile_csv(r.layer).expect("row exists");
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

fn empty_row(layer: usize) -> SpectralRow {
    SpectralRow {
        layer,
        low: 0.0,
        high: 0.0,
        ratio: 0.0,
        profile: vec![0.0; PROFILE_BINS],
    }
}

/// Spectral energies of the patch embedding and of every transformer layer
/// output of `model`, pooled over `images`.
pub fn layerwise_probe<T: Float>(
    model: &LaplacianFormer<T>,
    images: &[Tensor<T>],
    tag: &str,
    cutoff: f64,
) -> Result<SpectralReport> {
    check_cutoff(cutoff)?;
    let layers = model.config().num_layers();
    if layers == 0 {
        return Err(Error::param("model has no transformer layers to probe"));
    }
    if images.is_empty() {
        return Err(Error::param("probe needs at least one input"));
    }
    let mut rows: Vec<SpectralRow> = (0..=layers).map(empty_row).collect();
    for img in images {
        for (row, map) in rows.iter_mut().zip(model.probe(img)?.iter()) {
            let (low, high) = band_energies(map, cutoff)?;
            row.low += low;
            row.high += high;
            for (a, b) in row.profile.iter_mut().zip(radial_profile(map)?) {
                *a += b;
            }
        }
    }
    for r in &mut rows {
        r.ratio = ratio(r.low, r.high);
    }
    let embedding = rows.remove(0);
    Ok(SpectralReport {
        tag: tag.to_string(),
        cutoff,
        embedding,
        rows,
    })
}
