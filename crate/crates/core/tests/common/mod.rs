//! Naive reference implementations shared by the integration tests. They
//! work on nested `f64` vectors with plain loops and share no code with the
//! library kernels.
#![allow(dead_code)]

use lapformer_core::numerics::{grad_check_with, GradCheck};
use lapformer_core::params::{Bound, ParamStore};
use lapformer_core::{Float, Graph, Result, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn to_mat<T: Float>(t: &Tensor<T>) -> Mat {
    let (n, d) = t.dims2().unwrap();
    (0..n).map(|i| (0..d).map(|j| t.data()[i * d + j].f64()).collect()).collect()
}

pub fn from_mat(m: &Mat) -> Tensor<f64> {
    let d = m[0].len();
    Tensor::new(&[m.len(), d], m.iter().flatten().copied().collect()).unwrap()
}

pub fn max_abs(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(r, s)| {
            assert_eq!(r.len(), s.len());
            r.iter().zip(s).map(|(x, y)| (x - y).abs())
        })
        .fold(0.0, f64::max)
}

pub fn mat_mul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Per-head `ρ_k(K)ᵀV` contexts, `heads × dk × dk`.
pub fn contexts(k: &Mat, v: &Mat, heads: usize) -> Vec<Mat> {
    let (n, d) = (k.len(), k[0].len());
    let dk = d / heads;
    // softmax of every column over tokens
    let mut kn = vec![vec![0.0; d]; n];
    for j in 0..d {
        let col: Vec<f64> = (0..n).map(|t| k[t][j]).collect();
        for (t, p) in softmax(&col).into_iter().enumerate() {
            kn[t][j] = p;
        }
    }
    (0..heads)
        .map(|h| {
            let mut c = vec![vec![0.0; dk]; dk];
            for t in 0..n {
                for i in 0..dk {
                    for j in 0..dk {
                        c[i][j] += kn[t][h * dk + i] * v[t][h * dk + j];
                    }
                }
            }
            c
        })
        .collect()
}

/// `ρ_q(Q)` per head applied to per-head contexts.
pub fn apply_query(q: &Mat, ctx: &[Mat], heads: usize) -> Mat {
    let d = q[0].len();
    let dk = d / heads;
    q.iter()
        .map(|row| {
            let mut out = vec![0.0; d];
            for h in 0..heads {
                let qn = softmax(&row[h * dk..(h + 1) * dk]);
                for j in 0..dk {
                    out[h * dk + j] = (0..dk).map(|i| qn[i] * ctx[h][i][j]).sum();
                }
            }
            out
        })
        .collect()
}

pub fn efficient(q: &Mat, k: &Mat, v: &Mat, heads: usize) -> Mat {
    apply_query(q, &contexts(k, v, heads), heads)
}

pub fn dot_product(q: &Mat, k: &Mat, v: &Mat, heads: usize) -> Mat {
    let (n, d) = (q.len(), q[0].len());
    let dk = d / heads;
    let mut out = vec![vec![0.0; d]; n];
    for h in 0..heads {
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| (0..dk).map(|t| q[i][h * dk + t] * k[j][h * dk + t]).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let p = softmax(&scores);
            for t in 0..dk {
                out[i][h * dk + t] = (0..n).map(|j| p[j] * v[j][h * dk + t]).sum();
            }
        }
    }
    out
}

/// Mirror index without edge repeat, folding as often as needed.
pub fn mirror(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// Direct 2-D Gaussian blur of token rows laid out on an `h×w` grid.
pub fn blur(x: &Mat, h: usize, w: usize, sigma: f64) -> Mat {
    let r = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::new();
    for a in -r..=r {
        for b in -r..=r {
            kernel.push((a, b, (-((a * a + b * b) as f64) / (2.0 * sigma * sigma)).exp()));
        }
    }
    let total: f64 = kernel.iter().map(|k| k.2).sum();
    let c = x[0].len();
    let mut out = vec![vec![0.0; c]; h * w];
    for i in 0..h {
        for j in 0..w {
            for &(a, b, kv) in &kernel {
                let si = mirror(i as isize + a, h);
                let sj = mirror(j as isize + b, w);
                for ch in 0..c {
                    out[i * w + j][ch] += kv / total * x[si * w + sj][ch];
                }
            }
        }
    }
    out
}

/// Bands `G_l − G_{l+1}` followed by the last Gaussian.
pub fn pyramid(x: &Mat, h: usize, w: usize, sigmas: &[f64]) -> Vec<Mat> {
    let mut gs = vec![x.clone()];
    for &s in sigmas {
        gs.push(blur(x, h, w, s));
    }
    let mut levels: Vec<Mat> = gs
        .windows(2)
        .map(|p| p[0].iter().zip(&p[1]).map(|(a, b)| a.iter().zip(b).map(|(u, v)| u - v).collect()).collect())
        .collect();
    levels.push(gs.pop().unwrap());
    levels
}

/// Frequency attention from explicit weights: `wq`, then `(wk, wv)` per level.
pub fn frequency(x: &Mat, h: usize, w: usize, sigmas: &[f64], wq: &Mat, levels: &[(Mat, Mat)], heads: usize) -> Mat {
    let lv = pyramid(x, h, w, sigmas);
    assert_eq!(lv.len(), levels.len());
    let dk = x[0].len() / heads;
    let mut total = vec![vec![vec![0.0; dk]; dk]; heads];
    for (xl, (wk, wv)) in lv.iter().zip(levels) {
        let c = contexts(&mat_mul(xl, wk), &mat_mul(xl, wv), heads);
        for hh in 0..heads {
            total[hh] = add(&total[hh], &c[hh]);
        }
    }
    apply_query(&mat_mul(x, wq), &total, heads)
}

/// Explicit `(a·b)×(a·b)` Kronecker product.
pub fn kron(a: &Mat, b: &Mat) -> Mat {
    let (na, nb) = (a.len(), b.len());
    let mut k = vec![vec![0.0; na * nb]; na * nb];
    for i in 0..na {
        for j in 0..na {
            for p in 0..nb {
                for q in 0..nb {
                    k[i * nb + p][j * nb + q] = a[i][j] * b[p][q];
                }
            }
        }
    }
    k
}

pub fn layer_norm(x: &Mat, gain: &[f64], bias: &[f64], eps: f64) -> Mat {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + eps).sqrt() * gain[j] + bias[j])
                .collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

/// 3×3 depthwise correlation with mirrored borders; `k[a][b][c]`.
pub fn depthwise3(x: &Mat, h: usize, w: usize, k: &[Vec<Vec<f64>>]) -> Mat {
    let c = x[0].len();
    let mut out = vec![vec![0.0; c]; h * w];
    for i in 0..h {
        for j in 0..w {
            for a in 0..3 {
                for b in 0..3 {
                    let si = mirror(i as isize + a as isize - 1, h);
                    let sj = mirror(j as isize + b as isize - 1, w);
                    for ch in 0..c {
                        out[i * w + j][ch] += k[a][b][ch] * x[si * w + sj][ch];
                    }
                }
            }
        }
    }
    out
}

pub fn add_row(x: &Mat, b: &[f64]) -> Mat {
    x.iter().map(|r| r.iter().zip(b).map(|(u, v)| u + v).collect()).collect()
}

pub fn vec_of<T: Float>(t: &Tensor<T>) -> Vec<f64> {
    t.to_f64_vec()
}

/// Gradient check over the coordinates of `inputs` and every tensor of
/// `store`; `f` receives the input handles and the bound parameters.
pub fn param_grad_check<T, F>(
    store: &ParamStore<T>,
    inputs: &[Tensor<T>],
    h: f64,
    coords: usize,
    seed: u64,
    f: F,
) -> Result<GradCheck>
where
    T: Float,
    F: Fn(&mut Graph<T>, &[Var], &Bound) -> Result<Var>,
{
    let mut all: Vec<Tensor<T>> = inputs.to_vec();
    all.extend(store.iter().map(|(_, t)| t.clone()));
    let n = inputs.len();
    grad_check_with(
        |g, vars| {
            let bound = Bound::from_vars(vars[n..].to_vec());
            f(g, &vars[..n], &bound)
        },
        &all,
        h,
        Some(coords),
        seed,
    )
}

/// `Σ y ⊙ r` for a fixed random `r`, a scalar with a dense gradient.
pub fn projected<T: Float>(g: &mut Graph<T>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let r = Tensor::<T>::randn(&shape, 1.0, &mut rng(seed));
    let rv = g.constant(r)?;
    let m = g.mul(y, rv)?;
    g.sum_all(m)
}
