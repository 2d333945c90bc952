//! Attention operators.
//!
//! * dot-product self-attention, `softmax(QKᵀ/√d)·V`, quadratic in tokens;
//! * efficient attention `ρ_q(Q)·(ρ_k(K)ᵀ·V)`, where `ρ_q` normalizes each
//!   token's features (per head) and `ρ_k` normalizes each feature over
//!   tokens. The `d×d` context is built before the query is touched, so
//!   cost is linear in the number of tokens;
//! * frequency attention: the same context construction applied to every
//!   level of a Laplacian pyramid of the feature map, with the per-level
//!   contexts summed before the query is applied;
//! * EF-ATT, the per-channel learned blend of the two;
//! * the diversity-enhanced shortcut `x·(A⊗B)`.

use crate::error::{Error, Result};
use crate::numerics::{kernels, Float, Graph, Tensor, Var};
use crate::params::{Bound, ParamBuilder, ParamId, ParamStore};
use crate::pyramid::{pyramid_levels, GaussianSpec};

/// Standard deviation of the initial projection weights.
pub const PROJ_INIT_STD: f64 = 0.02;
/// Standard deviation of the initial Kronecker factors.
pub const DES_INIT_STD: f64 = 1e-2;

/// Which token mixer a transformer layer uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    /// Efficient attention fused with pyramid frequency attention.
    EfficientFrequency,
    /// Efficient attention alone (frequency branch removed).
    Efficient,
    /// Quadratic dot-product attention.
    DotProduct,
}

fn qkv_dims<T: Float>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, heads: usize) -> Result<(usize, usize, usize)> {
    let (n, d) = q.dims2()?;
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(Error::dim(format!(
            "attention: Q {:?}, K {:?}, V {:?} must agree",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::dim(format!("attention: width {d} not divisible by {heads} heads")));
    }
    Ok((n, d, d / heads))
}

/// Dot-product attention evaluated head by head, in row blocks so the
/// full score matrix is never held at once.
pub fn reference_self_attention<T: Float>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    const BLOCK: usize = 64;
    let (n, d, dk) = qkv_dims(q, k, v, heads)?;
    let scale = T::of(1.0 / (dk as f64).sqrt());
    let mut out = vec![T::zero(); n * d];
    for h in 0..heads {
        let slice = |x: &Tensor<T>| -> Vec<T> {
            (0..n).flat_map(|t| x.data()[t * d + h * dk..t * d + (h + 1) * dk].iter().copied()).collect()
        };
        let (qh, kh, vh) = (slice(q), slice(k), slice(v));
        let mut scores = vec![T::zero(); BLOCK * n];
        let mut oh = vec![T::zero(); BLOCK * dk];
        for start in (0..n).step_by(BLOCK) {
            let rows = BLOCK.min(n - start);
            let s = &mut scores[..rows * n];
            s.fill(T::zero());
            kernels::matmul_nt(&qh[start * dk..(start + rows) * dk], &kh, s, rows, dk, n);
            for row in s.chunks_exact_mut(n) {
                let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x * scale));
                let mut sum = T::zero();
                for x in row.iter_mut() {
                    *x = (*x * scale - max).exp();
                    sum += *x;
                }
                let inv = T::one() / sum;
                for x in row.iter_mut() {
                    *x *= inv;
                }
            }
            let o = &mut oh[..rows * dk];
            o.fill(T::zero());
            kernels::matmul_nn(s, &vh, o, rows, n, dk);
            for r in 0..rows {
                let t = start + r;
                out[t * d + h * dk..t * d + (h + 1) * dk].copy_from_slice(&o[r * dk..(r + 1) * dk]);
            }
        }
    }
    Tensor::new(&[n, d], out)
}

/// `ρ_q(Q)·(ρ_k(K)ᵀ·V)` per head. Cost `O(n·d²/heads)`.
pub fn efficient_attention<T: Float>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    let (n, d, dk) = qkv_dims(q, k, v, heads)?;
    // ρ_k: each feature column normalized over tokens
    let mut kn = vec![T::zero(); n * d];
    kernels::softmax_strided(k.data(), &mut kn, 1, n, d);
    // ρ_q: each token's features normalized within a head
    let mut qn = vec![T::zero(); n * d];
    kernels::softmax_strided(q.data(), &mut qn, n * heads, dk, 1);
    let mut out = vec![T::zero(); n * d];
    let mut ctx = vec![T::zero(); dk * dk];
    for h in 0..heads {
        ctx.fill(T::zero());
        for t in 0..n {
            let krow = &kn[t * d + h * dk..t * d + (h + 1) * dk];
            let vrow = &v.data()[t * d + h * dk..t * d + (h + 1) * dk];
            for i in 0..dk {
                kernels::axpy(&mut ctx[i * dk..(i + 1) * dk], krow[i], vrow);
            }
        }
        for t in 0..n {
            let qrow = &qn[t * d + h * dk..t * d + (h + 1) * dk];
            let o = &mut out[t * d + h * dk..t * d + (h + 1) * dk];
            for i in 0..dk {
                kernels::axpy(o, qrow[i], &ctx[i * dk..(i + 1) * dk]);
            }
        }
    }
    Tensor::new(&[n, d], out)
}

/// Recorded efficient attention on raw (un-normalized) projections.
pub fn efficient_attention_op<T: Float>(g: &mut Graph<T>, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let qn = g.softmax_heads(q, heads)?;
    let kn = g.softmax(k, 0)?;
    let ctx = g.head_context(kn, v, heads)?;
    g.head_apply(qn, ctx, heads)
}

/// The most balanced factor pair `(a, b)` with `a ≤ b` and `a·b = d`.
pub fn kron_factors(d: usize) -> (usize, usize) {
    let mut a = (d as f64).sqrt() as usize;
    while a > 1 && d % a != 0 {
        a -= 1;
    }
    let a = a.max(1);
    (a, d / a)
}

/// Kronecker factors of the diversity-enhanced shortcut.
#[derive(Debug, Clone, PartialEq)]
pub struct DesParams {
    pub a: ParamId,
    pub b: ParamId,
}

impl DesParams {
    pub fn init<T: Float>(pb: &mut ParamBuilder<'_, T>, d_model: usize) -> Result<Self> {
        let (fa, fb) = kron_factors(d_model);
        Ok(Self {
            a: pb.normal("a", &[fa, fa], DES_INIT_STD)?,
            b: pb.normal("b", &[fb, fb], DES_INIT_STD)?,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.kron_project(x, p[self.a], p[self.b])
    }
}

/// `x·(A⊗B)` without forming the Kronecker product.
pub fn des<T: Float>(x: &Tensor<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let (xv, av, bv) = (g.constant(x.clone())?, g.constant(a.clone())?, g.constant(b.clone())?);
    let y = g.kron_project(xv, av, bv)?;
    Ok(g.value(y).clone())
}

/// Per-channel blend weights of the two attention branches.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    /// `2×C`: row 0 weights the efficient branch, row 1 the frequency branch.
    pub w: ParamId,
    pub b: ParamId,
}

impl FusionParams {
    pub fn init<T: Float>(pb: &mut ParamBuilder<'_, T>, d_model: usize) -> Result<Self> {
        Ok(Self {
            w: pb.tensor("w", Tensor::full(&[2, d_model], T::of(0.5)))?,
            b: pb.zeros("b", &[d_model])?,
        })
    }
}

/// Bias-free key/value projections of one pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelProjection {
    pub wk: ParamId,
    pub wv: ParamId,
}

/// Learned parameters of one attention unit.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub kind: AttentionKind,
    pub d_model: usize,
    pub heads: usize,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    /// One projection pair per pyramid level (bands, then residual); empty
    /// unless `kind` is [`AttentionKind::EfficientFrequency`].
    pub levels: Vec<LevelProjection>,
    pub fusion: Option<FusionParams>,
    pub des: Option<DesParams>,
}

impl AttentionParams {
    pub fn init<T: Float>(
        pb: &mut ParamBuilder<'_, T>,
        kind: AttentionKind,
        d_model: usize,
        heads: usize,
        spec: &GaussianSpec,
        with_des: bool,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::param(format!(
                "width {d_model} is not divisible by {heads} heads"
            )));
        }
        let d = d_model;
        let wq = pb.normal("wq", &[d, d], PROJ_INIT_STD)?;
        let wk = pb.normal("wk", &[d, d], PROJ_INIT_STD)?;
        let wv = pb.normal("wv", &[d, d], PROJ_INIT_STD)?;
        let (levels, fusion) = if kind == AttentionKind::EfficientFrequency {
            let levels = (0..=spec.levels())
                .map(|l| {
                    Ok(LevelProjection {
                        wk: pb.normal(&format!("level{l}.wk"), &[d, d], PROJ_INIT_STD)?,
                        wv: pb.normal(&format!("level{l}.wv"), &[d, d], PROJ_INIT_STD)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            (levels, Some(FusionParams::init(&mut pb.sub("fusion"), d)?))
        } else {
            (Vec::new(), None)
        };
        let des = if with_des {
            Some(DesParams::init(&mut pb.sub("des"), d)?)
        } else {
            None
        };
        Ok(Self {
            kind,
            d_model,
            heads,
            wq,
            wk,
            wv,
            levels,
            fusion,
            des,
        })
    }

    /// `ρ_q(x·W_q)`, shared by both branches.
    pub fn query<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let q = g.matmul(x, p[self.wq])?;
        g.softmax_heads(q, self.heads)
    }

    /// Efficient branch `E` for a normalized query.
    pub fn efficient_branch<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var, qn: Var) -> Result<Var> {
        let k = g.matmul(x, p[self.wk])?;
        let kn = g.softmax(k, 0)?;
        let v = g.matmul(x, p[self.wv])?;
        let ctx = g.head_context(kn, v, self.heads)?;
        g.head_apply(qn, ctx, self.heads)
    }

    /// Sum over pyramid levels of `ρ_k(X_l·W_k^l)ᵀ·(X_l·W_v^l)`.
    pub fn frequency_context<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        h: usize,
        w: usize,
        spec: &GaussianSpec,
    ) -> Result<Var> {
        if self.levels.is_empty() {
            return Err(Error::param("frequency attention needs at least one pyramid level"));
        }
        if self.levels.len() != spec.levels() + 1 {
            return Err(Error::param(format!(
                "{} level projections for a pyramid with {} levels",
                self.levels.len(),
                spec.levels() + 1
            )));
        }
        let levels = pyramid_levels(g, x, h, w, spec)?;
        let mut contexts = Vec::with_capacity(levels.len());
        for (lvl, proj) in levels.into_iter().zip(&self.levels) {
            let k = g.matmul(lvl, p[proj.wk])?;
            let kn = g.softmax(k, 0)?;
            let v = g.matmul(lvl, p[proj.wv])?;
            contexts.push(g.head_context(kn, v, self.heads)?);
        }
        g.add_all(&contexts)
    }

    /// Frequency branch `F = ρ_q(Q)·Σ_l ctx_l` on an `h×w` token grid.
    pub fn frequency_attention<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        h: usize,
        w: usize,
        spec: &GaussianSpec,
    ) -> Result<Var> {
        let qn = self.query(g, p, x)?;
        let ctx = self.frequency_context(g, p, x, h, w, spec)?;
        g.head_apply(qn, ctx, self.heads)
    }

    /// Token mixer output for normalized tokens `x` on an `h×w` grid.
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        h: usize,
        w: usize,
        spec: &GaussianSpec,
    ) -> Result<Var> {
        match self.kind {
            AttentionKind::DotProduct => {
                let q = g.matmul(x, p[self.wq])?;
                let k = g.matmul(x, p[self.wk])?;
                let v = g.matmul(x, p[self.wv])?;
                g.self_attention(q, k, v, self.heads)
            }
            AttentionKind::Efficient => {
                let qn = self.query(g, p, x)?;
                self.efficient_branch(g, p, x, qn)
            }
            AttentionKind::EfficientFrequency => {
                let qn = self.query(g, p, x)?;
                let e = self.efficient_branch(g, p, x, qn)?;
                let ctx = self.frequency_context(g, p, x, h, w, spec)?;
                let f = g.head_apply(qn, ctx, self.heads)?;
                let fusion = self.fusion.as_ref().expect("fusion params for EF-ATT");
                g.blend2(e, f, p[fusion.w], p[fusion.b])
            }
        }
    }
}

/// Intermediate values of one EF-ATT evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionProbe<T: Float = f32> {
    pub efficient: Tensor<T>,
    pub frequency: Tensor<T>,
    pub fused: Tensor<T>,
    /// `heads×dk×dk` context of the efficient branch.
    pub efficient_context: Tensor<T>,
    /// Per pyramid level (bands, then residual) `heads×dk×dk` contexts.
    pub level_contexts: Vec<Tensor<T>>,
}

impl AttentionParams {
    /// Records both branches separately and returns every intermediate.
    pub fn probe<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        h: usize,
        w: usize,
        spec: &GaussianSpec,
    ) -> Result<AttentionProbe<T>> {
        let fusion = self
            .fusion
            .as_ref()
            .ok_or_else(|| Error::param("attention probe needs the fused efficient/frequency mixer"))?;
        let qn = self.query(g, p, x)?;
        let k = g.matmul(x, p[self.wk])?;
        let kn = g.softmax(k, 0)?;
        let v = g.matmul(x, p[self.wv])?;
        let ctx = g.head_context(kn, v, self.heads)?;
        let e = g.head_apply(qn, ctx, self.heads)?;
        let levels = pyramid_levels(g, x, h, w, spec)?;
        let mut contexts = Vec::with_capacity(levels.len());
        for (lvl, proj) in levels.into_iter().zip(&self.levels) {
            let k = g.matmul(lvl, p[proj.wk])?;
            let kn = g.softmax(k, 0)?;
            let v = g.matmul(lvl, p[proj.wv])?;
            contexts.push(g.head_context(kn, v, self.heads)?);
        }
        let sum = g.add_all(&contexts)?;
        let f = g.head_apply(qn, sum, self.heads)?;
        let fused = g.blend2(e, f, p[fusion.w], p[fusion.b])?;
        Ok(AttentionProbe {
            efficient: g.value(e).clone(),
            frequency: g.value(f).clone(),
            fused: g.value(fused).clone(),
            efficient_context: g.value(ctx).clone(),
            level_contexts: contexts.iter().map(|&c| g.value(c).clone()).collect(),
        })
    }
}

/// Evaluates [`AttentionParams::frequency_attention`] on an `H×W×C` map
/// without recording gradients. Returns `(H·W)×C`.
pub fn frequency_attention<T: Float>(
    x: &Tensor<T>,
    params: &AttentionParams,
    store: &ParamStore<T>,
    spec: &GaussianSpec,
) -> Result<Tensor<T>> {
    eval_on_grid(x, store, |g, p, xv, h, w| params.frequency_attention(g, p, xv, h, w, spec))
}

/// Evaluates the fused EF-ATT output on an `H×W×C` map. Returns `(H·W)×C`.
pub fn ef_att<T: Float>(
    x: &Tensor<T>,
    params: &AttentionParams,
    store: &ParamStore<T>,
    spec: &GaussianSpec,
) -> Result<Tensor<T>> {
    eval_on_grid(x, store, |g, p, xv, h, w| params.forward(g, p, xv, h, w, spec))
}

fn eval_on_grid<T: Float>(
    x: &Tensor<T>,
    store: &ParamStore<T>,
    f: impl FnOnce(&mut Graph<T>, &Bound, Var, usize, usize) -> Result<Var>,
) -> Result<Tensor<T>> {
    let (h, w, c) = match *x.shape() {
        [h, w, c] => (h, w, c),
        ref s => return Err(Error::dim(format!("expected an HxWxC map, got {s:?}"))),
    };
    store.evaluate(&x.reshape(&[h * w, c])?, |g, p, xv| f(g, p, xv, h, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{matmul, softmax_axis};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn single_token_returns_value() {
        let mut r = rng(0);
        let q = Tensor::<f64>::randn(&[1, 4], 1.0, &mut r);
        let k = Tensor::<f64>::randn(&[1, 4], 1.0, &mut r);
        let v = Tensor::<f64>::randn(&[1, 4], 1.0, &mut r);
        for heads in [1, 2] {
            assert!(reference_self_attention(&q, &k, &v, heads).unwrap().max_abs_diff(&v).unwrap() < 1e-12);
            assert!(efficient_attention(&q, &k, &v, heads).unwrap().max_abs_diff(&v).unwrap() < 1e-12);
        }
    }

    #[test]
    fn zero_query_gives_column_mean() {
        let mut r = rng(1);
        let q = Tensor::<f64>::zeros(&[5, 3]);
        let k = Tensor::<f64>::randn(&[5, 3], 1.0, &mut r);
        let v = Tensor::<f64>::randn(&[5, 3], 1.0, &mut r);
        let out = reference_self_attention(&q, &k, &v, 1).unwrap();
        for j in 0..3 {
            let mean: f64 = (0..5).map(|t| v.at(&[t, j])).sum::<f64>() / 5.0;
            for t in 0..5 {
                assert!((out.at(&[t, j]) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reference_two_token_case() {
        // Q = K = [[1],[0]], V = [[1],[0]]: row 0 scores (1, 0), row 1 scores (0, 0)
        let q = Tensor::<f64>::from_f64(&[2, 1], &[1.0, 0.0]).unwrap();
        let out = reference_self_attention(&q, &q, &q, 1).unwrap();
        let e = std::f64::consts::E;
        assert!((out.at(&[0, 0]) - e / (e + 1.0)).abs() < 1e-12);
        assert!((out.at(&[1, 0]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn equal_value_rows_pass_through() {
        let mut r = rng(2);
        let q = Tensor::<f64>::randn(&[6, 4], 2.0, &mut r);
        let k = Tensor::<f64>::randn(&[6, 4], 2.0, &mut r);
        let row = [0.3, -1.0, 2.0, 0.5];
        let v = Tensor::<f64>::from_fn(&[6, 4], |i| row[i % 4]);
        let out = efficient_attention(&q, &k, &v, 2).unwrap();
        assert!(out.max_abs_diff(&v).unwrap() < 1e-12);
    }

    #[test]
    fn efficient_matches_direct_formula() {
        let q = Tensor::<f64>::from_f64(&[2, 2], &[1.0, -2.0, 3.0, 0.0]).unwrap();
        let k = Tensor::<f64>::from_f64(&[2, 2], &[2.0, 1.0, -1.0, 4.0]).unwrap();
        let v = Tensor::<f64>::from_f64(&[2, 2], &[5.0, -3.0, 2.0, 7.0]).unwrap();
        let qn = softmax_axis(&q, 1).unwrap();
        let kn = softmax_axis(&k, 0).unwrap();
        let ctx = matmul(&crate::numerics::transpose(&kn).unwrap(), &v).unwrap();
        let expect = matmul(&qn, &ctx).unwrap();
        let got = efficient_attention(&q, &k, &v, 1).unwrap();
        assert!(got.max_abs_diff(&expect).unwrap() < 1e-12);
    }

    #[test]
    fn recorded_matches_eager() {
        let mut r = rng(3);
        let q = Tensor::<f64>::randn(&[7, 6], 1.0, &mut r);
        let k = Tensor::<f64>::randn(&[7, 6], 1.0, &mut r);
        let v = Tensor::<f64>::randn(&[7, 6], 1.0, &mut r);
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q.clone()).unwrap(), g.constant(k.clone()).unwrap(), g.constant(v.clone()).unwrap());
        let e = efficient_attention_op(&mut g, qv, kv, vv, 3).unwrap();
        assert!(g.value(e).max_abs_diff(&efficient_attention(&q, &k, &v, 3).unwrap()).unwrap() < 1e-12);
        let s = g.self_attention(qv, kv, vv, 2).unwrap();
        assert!(g.value(s).max_abs_diff(&reference_self_attention(&q, &k, &v, 2).unwrap()).unwrap() < 1e-12);
    }

    #[test]
    fn shape_errors() {
        let a = Tensor::<f32>::zeros(&[3, 4]);
        let b = Tensor::<f32>::zeros(&[3, 5]);
        assert!(efficient_attention(&a, &a, &b, 1).is_err());
        assert!(reference_self_attention(&a, &b, &a, 1).is_err());
        assert!(efficient_attention(&a, &a, &a, 3).is_err());
    }

    #[test]
    fn factor_pairs() {
        assert_eq!(kron_factors(16), (4, 4));
        assert_eq!(kron_factors(32), (4, 8));
        assert_eq!(kron_factors(80), (8, 10));
        assert_eq!(kron_factors(128), (8, 16));
        assert_eq!(kron_factors(40), (5, 8));
        assert_eq!(kron_factors(7), (1, 7));
    }

    #[test]
    fn des_identity_and_zero() {
        let mut r = rng(4);
        let x = Tensor::<f32>::randn(&[5, 6], 1.0, &mut r);
        assert_eq!(des(&x, &Tensor::eye(2), &Tensor::eye(3)).unwrap(), x);
        let y = des(&x, &Tensor::zeros(&[2, 2]), &Tensor::randn(&[3, 3], 1.0, &mut r)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let y = des(&x, &Tensor::randn(&[2, 2], 1.0, &mut r), &Tensor::zeros(&[3, 3])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert!(des(&x, &Tensor::eye(2), &Tensor::eye(2)).is_err());
    }

    #[test]
    fn frequency_attention_requires_levels() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng(5);
        let spec = GaussianSpec::default();
        let p = AttentionParams::init(&mut ParamBuilder::new(&mut store, &mut r), AttentionKind::Efficient, 4, 1, &spec, false).unwrap();
        let x = Tensor::<f64>::zeros(&[2, 2, 4]);
        assert!(matches!(frequency_attention(&x, &p, &store, &spec), Err(Error::Parameter(_))));
    }

    #[test]
    fn fusion_selects_branches() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng(6);
        let spec = GaussianSpec::default();
        let p = AttentionParams::init(
            &mut ParamBuilder::new(&mut store, &mut r),
            AttentionKind::EfficientFrequency,
            4,
            2,
            &spec,
            false,
        )
        .unwrap();
        // make the projections large enough that E and F differ visibly
        let ids: Vec<_> = store.ids().filter(|&id| !store.name(id).starts_with("fusion")).collect();
        for id in ids {
            for v in store.get_mut(id).data_mut() {
                *v *= 50.0;
            }
        }
        let x = Tensor::<f64>::randn(&[3, 3, 4], 1.0, &mut r);
        let run = |store: &ParamStore<f64>| {
            let mut g = Graph::new();
            let b = store.bind(&mut g, false).unwrap();
            let xv = g.constant(x.reshape(&[9, 4]).unwrap()).unwrap();
            let qn = p.query(&mut g, &b, xv).unwrap();
            let e = p.efficient_branch(&mut g, &b, xv, qn).unwrap();
            let f = p.frequency_attention(&mut g, &b, xv, 3, 3, &spec).unwrap();
            let out = p.forward(&mut g, &b, xv, 3, 3, &spec).unwrap();
            (g.value(e).clone(), g.value(f).clone(), g.value(out).clone())
        };
        let fusion = p.fusion.clone().unwrap();
        let set_w = |store: &mut ParamStore<f64>, w0: f64, w1: f64| {
            let w = store.get_mut(fusion.w);
            for j in 0..4 {
                w.data_mut()[j] = w0;
                w.data_mut()[4 + j] = w1;
            }
        };
        let (e, f, out) = run(&store);
        assert!(e.max_abs_diff(&f).unwrap() > 1e-3);
        let half: Vec<f64> = e.data().iter().zip(f.data()).map(|(a, b)| 0.5 * a + 0.5 * b).collect();
        assert!(out.data().iter().zip(&half).all(|(a, b)| (a - b).abs() < 1e-12));
        set_w(&mut store, 1.0, 0.0);
        assert_eq!(run(&store).2, e);
        set_w(&mut store, 0.0, 1.0);
        assert_eq!(run(&store).2, f);
    }
}
