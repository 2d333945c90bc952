//! Slice-level compute kernels shared by the eager functions and the tape.
//!
//! Layout conventions: matrices are row-major; spatial maps are `H×W×C`
//! with channels innermost, which is the same memory layout as an
//! `(H·W)×C` token matrix.

use super::Float;

#[inline]
pub fn axpy<T: Float>(out: &mut [T], a: T, x: &[T]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// Dot product with eight independent partial sums so the loop vectorizes.
#[inline]
pub fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let chunks = n / 8;
    for c in 0..chunks {
        let pa = &a[c * 8..c * 8 + 8];
        let pb = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += pa[l] * pb[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..n {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `out[n×m] += a[n×k] · b[k×m]`
pub fn matmul_nn<T: Float>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av != T::zero() {
                axpy(orow, av, &b[p * m..(p + 1) * m]);
            }
        }
    }
}

/// `out[n×m] += aᵀ · b` with `a` stored as `k×n` and `b` as `k×m`.
pub fn matmul_tn<T: Float>(a: &[T], b: &[T], out: &mut [T], k: usize, n: usize, m: usize) {
    for p in 0..k {
        let brow = &b[p * m..(p + 1) * m];
        let arow = &a[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av != T::zero() {
                axpy(&mut out[i * m..(i + 1) * m], av, brow);
            }
        }
    }
}

/// `out[n×m] += a · bᵀ` with `a` stored as `n×k` and `b` as `m×k`.
pub fn matmul_nt<T: Float>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            out[i * m + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

pub fn transpose<T: Float>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Splits `shape` around `axis` into `(outer, len, inner)`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stable softmax along the middle extent of an
/// `outer × len × inner` view.
pub fn softmax_strided<T: Float>(x: &[T], out: &mut [T], outer: usize, len: usize, inner: usize) {
    if inner == 1 {
        for (xr, or) in x.chunks_exact(len).zip(out.chunks_exact_mut(len)) {
            softmax_row(xr, or);
        }
        return;
    }
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..inner {
            let idx = |j: usize| base + j * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(x[idx(j)]);
            }
            let mut sum = T::zero();
            for j in 0..len {
                let e = (x[idx(j)] - max).exp();
                out[idx(j)] = e;
                sum += e;
            }
            let inv = T::one() / sum;
            for j in 0..len {
                out[idx(j)] *= inv;
            }
        }
    }
}

#[inline]
pub fn softmax_row<T: Float>(x: &[T], out: &mut [T]) {
    let max = x.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    let inv = T::one() / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// Adds the softmax vector-Jacobian product `y ⊙ (dy − Σ dy⊙y)` into `dx`.
pub fn softmax_strided_backward<T: Float>(
    y: &[T],
    dy: &[T],
    dx: &mut [T],
    outer: usize,
    len: usize,
    inner: usize,
) {
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..inner {
            let idx = |j: usize| base + j * inner + i;
            let mut s = T::zero();
            for j in 0..len {
                s += dy[idx(j)] * y[idx(j)];
            }
            for j in 0..len {
                dx[idx(j)] += y[idx(j)] * (dy[idx(j)] - s);
            }
        }
    }
}

/// Layer norm over rows of length `d`. Writes the output and returns the
/// normalized values and per-row inverse standard deviations for backward.
pub fn layer_norm_forward<T: Float>(
    x: &[T],
    gain: &[T],
    bias: &[T],
    eps: T,
    d: usize,
    out: &mut [T],
) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    let inv_d = 1.0 / d as f64;
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().map(|v| v.f64()).sum::<f64>() * inv_d;
        let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() * inv_d;
        let rs = 1.0 / (var + eps.f64()).sqrt();
        rstd[r] = T::of(rs);
        let mean = T::of(mean);
        let rs = T::of(rs);
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gain[j] + bias[j];
        }
    }
    (xhat, rstd)
}

#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<T: Float>(
    dy: &[T],
    xhat: &[T],
    rstd: &[T],
    gain: &[T],
    d: usize,
    dx: Option<&mut [T]>,
    dgain: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
) {
    let rows = dy.len() / d;
    if let Some(dg) = dgain {
        for r in 0..rows {
            for j in 0..d {
                dg[j] += dy[r * d + j] * xhat[r * d + j];
            }
        }
    }
    if let Some(db) = dbias {
        for r in 0..rows {
            for j in 0..d {
                db[j] += dy[r * d + j];
            }
        }
    }
    if let Some(dx) = dx {
        let inv_d = T::one() / T::of(d as f64);
        for r in 0..rows {
            let dyr = &dy[r * d..(r + 1) * d];
            let xh = &xhat[r * d..(r + 1) * d];
            let mut m1 = T::zero();
            let mut m2 = T::zero();
            for j in 0..d {
                let g = dyr[j] * gain[j];
                m1 += g;
                m2 += g * xh[j];
            }
            m1 *= inv_d;
            m2 *= inv_d;
            for j in 0..d {
                let g = dyr[j] * gain[j];
                dx[r * d + j] += rstd[r] * (g - m1 - xh[j] * m2);
            }
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
#[inline]
pub fn gelu<T: Float>(x: T) -> T {
    let k = T::of(GELU_K);
    let c = T::of(GELU_C);
    let half = T::of(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Float>(x: T) -> T {
    let k = T::of(GELU_K);
    let c = T::of(GELU_C);
    let half = T::of(0.5);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::of(3.0) * c * x * x)
}

/// Reflect (mirror without edge repeat) index folding that also works when
/// the offset exceeds the extent, by repeated reflection.
#[inline]
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Precomputed reflected source index for every (output position, tap).
fn reflect_table(n: usize, taps: usize, pad: usize) -> Vec<usize> {
    let mut t = Vec::with_capacity(n * taps);
    for i in 0..n {
        for a in 0..taps {
            t.push(reflect(i as isize + a as isize - pad as isize, n));
        }
    }
    t
}

/// Channelwise "same" cross-correlation with reflect padding.
/// `x: h×w×c`, `kernel: kh×kw×c` (odd extents).
#[allow(clippy::too_many_arguments)]
pub fn depthwise_conv2d<T: Float>(
    x: &[T],
    kernel: &[T],
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    out: &mut [T],
) {
    let rows = reflect_table(h, kh, kh / 2);
    let cols = reflect_table(w, kw, kw / 2);
    for i in 0..h {
        for a in 0..kh {
            let si = rows[i * kh + a];
            for j in 0..w {
                let o = &mut out[(i * w + j) * c..(i * w + j + 1) * c];
                for b in 0..kw {
                    let sj = cols[j * kw + b];
                    let src = &x[(si * w + sj) * c..(si * w + sj + 1) * c];
                    let k = &kernel[(a * kw + b) * c..(a * kw + b + 1) * c];
                    for ch in 0..c {
                        o[ch] += k[ch] * src[ch];
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn depthwise_conv2d_backward<T: Float>(
    x: &[T],
    kernel: &[T],
    dy: &[T],
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    mut dx: Option<&mut [T]>,
    mut dk: Option<&mut [T]>,
) {
    let rows = reflect_table(h, kh, kh / 2);
    let cols = reflect_table(w, kw, kw / 2);
    for i in 0..h {
        for a in 0..kh {
            let si = rows[i * kh + a];
            for j in 0..w {
                let g = &dy[(i * w + j) * c..(i * w + j + 1) * c];
                for b in 0..kw {
                    let sj = cols[j * kw + b];
                    let koff = (a * kw + b) * c;
                    let soff = (si * w + sj) * c;
                    if let Some(dx) = dx.as_deref_mut() {
                        let k = &kernel[koff..koff + c];
                        let d = &mut dx[soff..soff + c];
                        for ch in 0..c {
                            d[ch] += k[ch] * g[ch];
                        }
                    }
                    if let Some(dk) = dk.as_deref_mut() {
                        let src = &x[soff..soff + c];
                        let d = &mut dk[koff..koff + c];
                        for ch in 0..c {
                            d[ch] += src[ch] * g[ch];
                        }
                    }
                }
            }
        }
    }
}

/// 1-D reflect-padded correlation of an `h×w×c` map along rows (`axis = 0`)
/// or columns (`axis = 1`) with an odd-length kernel.
pub fn conv_axis<T: Float>(x: &[T], k: &[T], h: usize, w: usize, c: usize, axis: usize, out: &mut [T]) {
    let taps = k.len();
    let r = taps / 2;
    if axis == 0 {
        let rows = reflect_table(h, taps, r);
        let stride = w * c;
        for i in 0..h {
            let o = &mut out[i * stride..(i + 1) * stride];
            for (a, &kv) in k.iter().enumerate() {
                let si = rows[i * taps + a];
                axpy(o, kv, &x[si * stride..(si + 1) * stride]);
            }
        }
    } else {
        let cols = reflect_table(w, taps, r);
        for i in 0..h {
            for j in 0..w {
                let o = &mut out[(i * w + j) * c..(i * w + j + 1) * c];
                for (b, &kv) in k.iter().enumerate() {
                    let sj = cols[j * taps + b];
                    axpy(o, kv, &x[(i * w + sj) * c..(i * w + sj + 1) * c]);
                }
            }
        }
    }
}

/// Adjoint of [`conv_axis`]: scatters `dy` back through the reflected taps.
pub fn conv_axis_adjoint<T: Float>(dy: &[T], k: &[T], h: usize, w: usize, c: usize, axis: usize, dx: &mut [T]) {
    let taps = k.len();
    let r = taps / 2;
    if axis == 0 {
        let rows = reflect_table(h, taps, r);
        let stride = w * c;
        for i in 0..h {
            let g = &dy[i * stride..(i + 1) * stride];
            for (a, &kv) in k.iter().enumerate() {
                let si = rows[i * taps + a];
                axpy(&mut dx[si * stride..(si + 1) * stride], kv, g);
            }
        }
    } else {
        let cols = reflect_table(w, taps, r);
        for i in 0..h {
            for j in 0..w {
                let g = &dy[(i * w + j) * c..(i * w + j + 1) * c];
                for (b, &kv) in k.iter().enumerate() {
                    let sj = cols[j * taps + b];
                    axpy(&mut dx[(i * w + sj) * c..(i * w + sj + 1) * c], kv, g);
                }
            }
        }
    }
}

/// Geometry of a zero-padded strided convolution lowered to a matrix product.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.c
    }
}

/// Patch matrix `(out_h·out_w) × (k·k·c)`; column order is `(a, b, channel)`.
pub fn im2col<T: Float>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let pl = g.patch_len();
    let mut out = vec![T::zero(); g.out_h() * g.out_w() * pl];
    for_each_tap(g, |row, col, src| {
        out[row * pl + col..row * pl + col + g.c].copy_from_slice(&x[src..src + g.c]);
    });
    out
}

pub fn col2im<T: Float>(cols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let pl = g.patch_len();
    for_each_tap(g, |row, col, src| {
        let d = &mut dx[src..src + g.c];
        for (dv, &cv) in d.iter_mut().zip(&cols[row * pl + col..row * pl + col + g.c]) {
            *dv += cv;
        }
    });
}

fn for_each_tap(g: &ConvGeometry, mut f: impl FnMut(usize, usize, usize)) {
    let (oh, ow) = (g.out_h(), g.out_w());
    for oi in 0..oh {
        for oj in 0..ow {
            let row = oi * ow + oj;
            for a in 0..g.kernel {
                let si = (oi * g.stride + a) as isize - g.pad as isize;
                if si < 0 || si >= g.h as isize {
                    continue;
                }
                for b in 0..g.kernel {
                    let sj = (oj * g.stride + b) as isize - g.pad as isize;
                    if sj < 0 || sj >= g.w as isize {
                        continue;
                    }
                    let src = (si as usize * g.w + sj as usize) * g.c;
                    f(row, (a * g.kernel + b) * g.c, src);
                }
            }
        }
    }
}

/// Gathers each `f×f` neighborhood of an `h×w×c` map into one token of
/// width `f²·c`; block order is `(dy, dx)` row-major.
pub fn space_to_depth<T: Float>(x: &[T], h: usize, w: usize, c: usize, f: usize) -> Vec<T> {
    let (ho, wo) = (h / f, w / f);
    let mut out = vec![T::zero(); x.len()];
    for i in 0..ho {
        for j in 0..wo {
            for dy in 0..f {
                for dx in 0..f {
                    let src = ((i * f + dy) * w + j * f + dx) * c;
                    let dst = (i * wo + j) * f * f * c + (dy * f + dx) * c;
                    out[dst..dst + c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
    }
    out
}

/// Inverse of [`space_to_depth`]: `x` is `h×w×(f²·c)`, output `(f·h)×(f·w)×c`.
pub fn depth_to_space<T: Float>(x: &[T], h: usize, w: usize, c: usize, f: usize) -> Vec<T> {
    let wo = w * f;
    let mut out = vec![T::zero(); x.len()];
    for i in 0..h {
        for j in 0..w {
            for dy in 0..f {
                for dx in 0..f {
                    let src = (i * w + j) * f * f * c + (dy * f + dx) * c;
                    let dst = ((i * f + dy) * wo + j * f + dx) * c;
                    out[dst..dst + c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_folds_repeatedly() {
        // 0 1 2 3 | 2 1 0 1 2 3 ...
        let got: Vec<usize> = (-4..10).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![2, 3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1, 2, 3]);
        assert_eq!(reflect(-7, 1), 0);
    }

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..19).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..19).map(|i| 3.0 - i as f64).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    #[test]
    fn space_depth_roundtrip() {
        let x: Vec<f32> = (0..4 * 6 * 3).map(|i| i as f32).collect();
        let s = space_to_depth(&x, 4, 6, 3, 2);
        assert_eq!(depth_to_space(&s, 2, 3, 3, 2), x);
    }

    #[test]
    fn transposed_products_agree() {
        let a: Vec<f64> = (0..6).map(|i| i as f64 + 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|i| (i as f64) * 0.25 - 1.0).collect(); // 3x4
        let mut c = vec![0.0; 8];
        matmul_nn(&a, &b, &mut c, 2, 3, 4);
        let at = transpose(&a, 2, 3);
        let mut c2 = vec![0.0; 8];
        matmul_tn(&at, &b, &mut c2, 3, 2, 4);
        let bt = transpose(&b, 3, 4);
        let mut c3 = vec![0.0; 8];
        matmul_nt(&a, &bt, &mut c3, 2, 3, 4);
        assert_eq!(c, c2);
        for (x, y) in c.iter().zip(&c3) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
