//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only arena of nodes. Every operation evaluates
//! eagerly, stores its output and whatever it needs for the backward pass,
//! and returns a [`Var`] handle. [`Graph::backward`] walks the arena in
//! reverse insertion order, which is a valid topological order because a
//! node can only reference nodes created before it.

use super::kernels::{self, ConvGeometry};
use super::tensor::numel;
use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T: Float> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    MulChannels(Var, Var),
    Blend2 {
        e: Var,
        f: Var,
        w: Var,
        b: Var,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    DepthwiseConv {
        x: Var,
        k: Var,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
    },
    Blur {
        x: Var,
        h: usize,
        w: usize,
        taps: Vec<T>,
    },
    Im2Col {
        x: Var,
        geom: ConvGeometry,
    },
    SpaceToDepth {
        x: Var,
        h: usize,
        w: usize,
        f: usize,
    },
    DepthToSpace {
        x: Var,
        h: usize,
        w: usize,
        f: usize,
    },
    ConcatCols(Var, Var),
    Reshape(Var),
    Kron {
        x: Var,
        a: Var,
        b: Var,
        xb: Vec<T>,
    },
    HeadContext {
        k: Var,
        v: Var,
        heads: usize,
    },
    HeadApply {
        q: Var,
        ctx: Var,
        heads: usize,
    },
    SelfAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    SumAll(Var),
    CrossEntropy {
        logits: Var,
        target: Vec<T>,
        probs: Vec<T>,
    },
    Dice {
        probs: Var,
        target: Vec<T>,
        eps: f64,
        inter: Vec<f64>,
        denom: Vec<f64>,
    },
}

struct Node<T: Float> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording tape. One graph per forward/backward pass.
pub struct Graph<T: Float = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T: Float> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Float> Gradients<T> {
    /// Gradient slice for `v`, or `None` if `v` did not require a gradient
    /// or is unreachable from the loss.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn tensor(&self, v: Var) -> Option<Tensor<T>> {
        self.get(v)
            .map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g.to_vec()))
    }

    /// Moves the gradient out, leaving `None` behind.
    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn same_shape(what: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::dim(format!("{what}: shapes {a:?} and {b:?} differ")))
    }
}

fn check_heads(what: &str, d: usize, heads: usize) -> Result<usize> {
    if heads == 0 || d % heads != 0 {
        return Err(Error::dim(format!(
            "{what}: width {d} is not divisible by {heads} heads"
        )));
    }
    Ok(d / heads)
}

fn check_grid(what: &str, t: &Tensor<impl Float>, h: usize, w: usize) -> Result<usize> {
    let c = t.last_dim();
    if h * w * c != t.numel() || h == 0 || w == 0 {
        return Err(Error::dim(format!(
            "{what}: tensor {:?} is not a {h}x{w} grid",
            t.shape()
        )));
    }
    Ok(c)
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool, what: &str) -> Result<Var> {
        value.check_finite(what)?;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var], what: &str) -> Result<Var> {
        let needs = self.needs(inputs);
        self.push(Tensor::from_parts(shape, data), op, needs, what)
    }

    /// Leaf whose gradient is tracked iff the tensor's `requires_grad` flag is set.
    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        let needs = t.requires_grad();
        self.push(t, Op::Leaf, needs, "input")
    }

    pub fn param(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t.with_requires_grad(true), Op::Leaf, true, "param")
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t.with_requires_grad(false), Op::Leaf, false, "constant")
    }

    // ----------------------------------------------------------------------
    // linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.value(a).dims2()?;
        let (k2, m) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::dim(format!("matmul: {n}x{k} times {k2}x{m}")));
        }
        let mut out = vec![T::zero(); n * m];
        kernels::matmul_nn(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        self.node(vec![n, m], out, Op::MatMul(a, b), &[a, b], "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let out = kernels::transpose(self.value(a).data(), r, c);
        self.node(vec![c, r], out, Op::Transpose(a), &[a], "transpose")
    }

    /// `x·W` for a token matrix `x: n×d_in` and weight `W: d_in×d_out`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match bias {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    // ----------------------------------------------------------------------
    // elementwise

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        self.node(self.shape(a).to_vec(), out, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.shape(a), self.shape(b))?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x - y).collect();
        self.node(self.shape(a).to_vec(), out, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        self.node(self.shape(a).to_vec(), out, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a).data().iter().map(|&x| x * s).collect();
        self.node(self.shape(a).to_vec(), out, Op::Scale(a, s), &[a], "scale")
    }

    /// Sum of several same-shaped tensors, left to right.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::dim("add_all of nothing"))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    /// Row-broadcast `x[.., d] + b[d]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(b).numel() != d {
            return Err(Error::dim(format!(
                "add_bias: bias {:?} for width {d}",
                self.shape(b)
            )));
        }
        let bv = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(d) {
            for (o, &bb) in row.iter_mut().zip(bv) {
                *o += bb;
            }
        }
        self.node(self.shape(x).to_vec(), out, Op::AddBias(x, b), &[x, b], "add_bias")
    }

    /// Row-broadcast `x[.., d] ⊙ s[d]`.
    pub fn mul_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(s).numel() != d {
            return Err(Error::dim(format!(
                "mul_channels: scale {:?} for width {d}",
                self.shape(s)
            )));
        }
        let sv = self.value(s).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(d) {
            for (o, &ss) in row.iter_mut().zip(sv) {
                *o *= ss;
            }
        }
        self.node(self.shape(x).to_vec(), out, Op::MulChannels(x, s), &[x, s], "mul_channels")
    }

    /// Per-channel two-way blend `w[0,c]·e + w[1,c]·f + b[c]`, i.e. a
    /// `2×1×1` depthwise convolution over the stacked pair `(e, f)`.
    pub fn blend2(&mut self, e: Var, f: Var, w: Var, b: Var) -> Result<Var> {
        same_shape("blend2", self.shape(e), self.shape(f))?;
        let c = self.value(e).last_dim();
        if self.shape(w) != [2, c] || self.value(b).numel() != c {
            return Err(Error::dim(format!(
                "blend2: weights {:?} / bias {:?} for width {c}",
                self.shape(w),
                self.shape(b)
            )));
        }
        let (wv, bv) = (self.value(w).data(), self.value(b).data());
        let (ev, fv) = (self.value(e).data(), self.value(f).data());
        let mut out = vec![T::zero(); ev.len()];
        for (t, o) in out.chunks_exact_mut(c).enumerate() {
            for j in 0..c {
                o[j] = wv[j] * ev[t * c + j] + wv[c + j] * fv[t * c + j] + bv[j];
            }
        }
        self.node(self.shape(e).to_vec(), out, Op::Blend2 { e, f, w, b }, &[e, f, w, b], "blend2")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).data().iter().map(|&v| kernels::gelu(v)).collect();
        self.node(self.shape(x).to_vec(), out, Op::Gelu(x), &[x], "gelu")
    }

    // ----------------------------------------------------------------------
    // normalization

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!("softmax axis {axis} for shape {shape:?}")));
        }
        let (outer, len, inner) = kernels::axis_split(&shape, axis);
        let mut out = vec![T::zero(); numel(&shape)];
        kernels::softmax_strided(self.value(x).data(), &mut out, outer, len, inner);
        self.node(shape, out, Op::Softmax { x, axis }, &[x], "softmax")
    }

    /// Softmax over each head's block of features: `x: n×d` viewed as
    /// `n×heads×(d/heads)`, normalized along the last extent.
    pub fn softmax_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        let dk = check_heads("softmax_heads", d, heads)?;
        let r = self.reshape(x, &[n, heads, dk])?;
        let s = self.softmax(r, 2)?;
        self.reshape(s, &[n, d])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::dim(format!("layer_norm: affine params for width {d}")));
        }
        let mut out = vec![T::zero(); self.value(x).numel()];
        let (xhat, rstd) = kernels::layer_norm_forward(
            self.value(x).data(),
            self.value(gain).data(),
            self.value(bias).data(),
            eps,
            d,
            &mut out,
        );
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        };
        self.node(self.shape(x).to_vec(), out, op, &[x, gain, bias], "layer_norm")
    }

    // ----------------------------------------------------------------------
    // spatial

    /// Reflect-padded channelwise convolution of an `h×w` grid of tokens
    /// with a `kh×kw×c` kernel (odd extents). Output keeps the input shape.
    pub fn depthwise_conv2d(&mut self, x: Var, k: Var, h: usize, w: usize) -> Result<Var> {
        let c = check_grid("depthwise_conv2d", self.value(x), h, w)?;
        let (kh, kw) = match *self.shape(k) {
            [kh, kw, kc] if kc == c => (kh, kw),
            ref s => {
                return Err(Error::dim(format!(
                    "depthwise_conv2d: kernel {s:?} for {c} channels"
                )))
            }
        };
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::dim(format!(
                "depthwise_conv2d: kernel {kh}x{kw} must have odd extents"
            )));
        }
        let mut out = vec![T::zero(); self.value(x).numel()];
        kernels::depthwise_conv2d(self.value(x).data(), self.value(k).data(), h, w, c, kh, kw, &mut out);
        let op = Op::DepthwiseConv { x, k, h, w, kh, kw };
        self.node(self.shape(x).to_vec(), out, op, &[x, k], "depthwise_conv2d")
    }

    /// Separable reflect-padded blur with a fixed odd-length 1-D kernel
    /// applied along both spatial axes.
    pub fn separable_blur(&mut self, x: Var, h: usize, w: usize, taps: &[T]) -> Result<Var> {
        let c = check_grid("separable_blur", self.value(x), h, w)?;
        if taps.len() % 2 == 0 {
            return Err(Error::dim("separable_blur: kernel length must be odd"));
        }
        let n = self.value(x).numel();
        let mut tmp = vec![T::zero(); n];
        kernels::conv_axis(self.value(x).data(), taps, h, w, c, 1, &mut tmp);
        let mut out = vec![T::zero(); n];
        kernels::conv_axis(&tmp, taps, h, w, c, 0, &mut out);
        let op = Op::Blur {
            x,
            h,
            w,
            taps: taps.to_vec(),
        };
        self.node(self.shape(x).to_vec(), out, op, &[x], "separable_blur")
    }

    /// Zero-padded patch extraction for a strided convolution; returns the
    /// `(out_h·out_w) × (k·k·c)` patch matrix.
    pub fn im2col(&mut self, x: Var, geom: ConvGeometry) -> Result<Var> {
        let c = check_grid("im2col", self.value(x), geom.h, geom.w)?;
        if c != geom.c || geom.kernel > geom.h + 2 * geom.pad || geom.kernel > geom.w + 2 * geom.pad {
            return Err(Error::dim(format!("im2col: geometry {geom:?} does not fit input")));
        }
        let out = kernels::im2col(self.value(x).data(), &geom);
        let shape = vec![geom.out_h() * geom.out_w(), geom.patch_len()];
        self.node(shape, out, Op::Im2Col { x, geom }, &[x], "im2col")
    }

    /// `h×w×c` tokens to `(h/f)·(w/f) × f²c` by gathering `f×f` blocks.
    pub fn space_to_depth(&mut self, x: Var, h: usize, w: usize, f: usize) -> Result<Var> {
        let c = check_grid("space_to_depth", self.value(x), h, w)?;
        if f == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::dim(format!("space_to_depth: {h}x{w} grid not divisible by {f}")));
        }
        let out = kernels::space_to_depth(self.value(x).data(), h, w, c, f);
        let shape = vec![(h / f) * (w / f), f * f * c];
        self.node(shape, out, Op::SpaceToDepth { x, h, w, f }, &[x], "space_to_depth")
    }

    /// Pixel shuffle: `h·w × f²c` tokens to `(fh)·(fw) × c`.
    pub fn depth_to_space(&mut self, x: Var, h: usize, w: usize, f: usize) -> Result<Var> {
        let cf = check_grid("depth_to_space", self.value(x), h, w)?;
        if f == 0 || cf % (f * f) != 0 {
            return Err(Error::dim(format!("depth_to_space: width {cf} not divisible by {f}^2")));
        }
        let c = cf / (f * f);
        let out = kernels::depth_to_space(self.value(x).data(), h, w, c, f);
        let shape = vec![h * f * w * f, c];
        self.node(shape, out, Op::DepthToSpace { x, h, w, f }, &[x], "depth_to_space")
    }

    // ----------------------------------------------------------------------
    // shape

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, da) = self.value(a).dims2()?;
        let (n2, db) = self.value(b).dims2()?;
        if n != n2 {
            return Err(Error::dim(format!("concat_cols: {n} vs {n2} rows")));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (da + db));
        for t in 0..n {
            out.extend_from_slice(&av[t * da..(t + 1) * da]);
            out.extend_from_slice(&bv[t * db..(t + 1) * db]);
        }
        self.node(vec![n, da + db], out, Op::ConcatCols(a, b), &[a, b], "concat_cols")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).numel() {
            return Err(Error::dim(format!(
                "reshape {:?} into {shape:?}",
                self.shape(x)
            )));
        }
        let data = self.value(x).data().to_vec();
        self.node(shape.to_vec(), data, Op::Reshape(x), &[x], "reshape")
    }

    // ----------------------------------------------------------------------
    // attention building blocks

    /// Implicit Kronecker projection `x·(A⊗B)` for `x: n×(a·b)`.
    ///
    /// Each token is viewed as an `a×b` matrix `X` and mapped to `AᵀXB`, so
    /// the `(a·b)×(a·b)` product matrix is never formed.
    pub fn kron_project(&mut self, x: Var, a: Var, b: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        let (ar, ac) = self.value(a).dims2()?;
        let (br, bc) = self.value(b).dims2()?;
        if ar != ac || br != bc || ar * br != d {
            return Err(Error::dim(format!(
                "kron_project: factors {ar}x{ac} and {br}x{bc} do not factor width {d}"
            )));
        }
        let (sa, sb) = (ar, br);
        let mut xb = vec![T::zero(); n * d];
        kernels::matmul_nn(self.value(x).data(), self.value(b).data(), &mut xb, n * sa, sb, sb);
        let av = self.value(a).data();
        let mut out = vec![T::zero(); n * d];
        for t in 0..n {
            let z = &xb[t * d..(t + 1) * d];
            let y = &mut out[t * d..(t + 1) * d];
            for i in 0..sa {
                for j in 0..sa {
                    kernels::axpy(&mut y[j * sb..(j + 1) * sb], av[i * sa + j], &z[i * sb..(i + 1) * sb]);
                }
            }
        }
        self.node(vec![n, d], out, Op::Kron { x, a, b, xb }, &[x, a, b], "kron_project")
    }

    /// Per-head context `Kₕᵀ Vₕ`, returned as `heads × dk × dk`.
    pub fn head_context(&mut self, k: Var, v: Var, heads: usize) -> Result<Var> {
        same_shape("head_context", self.shape(k), self.shape(v))?;
        let (n, d) = self.value(k).dims2()?;
        let dk = check_heads("head_context", d, heads)?;
        let (kv, vv) = (self.value(k).data(), self.value(v).data());
        let mut out = vec![T::zero(); heads * dk * dk];
        for t in 0..n {
            for h in 0..heads {
                let krow = &kv[t * d + h * dk..t * d + (h + 1) * dk];
                let vrow = &vv[t * d + h * dk..t * d + (h + 1) * dk];
                let ctx = &mut out[h * dk * dk..(h + 1) * dk * dk];
                for i in 0..dk {
                    kernels::axpy(&mut ctx[i * dk..(i + 1) * dk], krow[i], vrow);
                }
            }
        }
        let op = Op::HeadContext { k, v, heads };
        self.node(vec![heads, dk, dk], out, op, &[k, v], "head_context")
    }

    /// Per-head `Qₕ · ctxₕ`, concatenated back to `n × d`.
    pub fn head_apply(&mut self, q: Var, ctx: Var, heads: usize) -> Result<Var> {
        let (n, d) = self.value(q).dims2()?;
        let dk = check_heads("head_apply", d, heads)?;
        if self.shape(ctx) != [heads, dk, dk] {
            return Err(Error::dim(format!(
                "head_apply: context {:?} for {heads} heads of width {dk}",
                self.shape(ctx)
            )));
        }
        let (qv, cv) = (self.value(q).data(), self.value(ctx).data());
        let mut out = vec![T::zero(); n * d];
        for t in 0..n {
            for h in 0..heads {
                let qrow = &qv[t * d + h * dk..t * d + (h + 1) * dk];
                let c = &cv[h * dk * dk..(h + 1) * dk * dk];
                let o = &mut out[t * d + h * dk..t * d + (h + 1) * dk];
                for i in 0..dk {
                    kernels::axpy(o, qrow[i], &c[i * dk..(i + 1) * dk]);
                }
            }
        }
        let op = Op::HeadApply { q, ctx, heads };
        self.node(vec![n, d], out, op, &[q, ctx], "head_apply")
    }

    /// Multi-head dot-product attention `softmax(QKᵀ/√dk)·V`.
    pub fn self_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        same_shape("self_attention", self.shape(q), self.shape(k))?;
        same_shape("self_attention", self.shape(q), self.shape(v))?;
        let (n, d) = self.value(q).dims2()?;
        let dk = check_heads("self_attention", d, heads)?;
        let scale = T::of(1.0 / (dk as f64).sqrt());
        let mut probs = vec![T::zero(); heads * n * n];
        let mut out = vec![T::zero(); n * d];
        for h in 0..heads {
            let qh = head_slice(self.value(q).data(), n, d, h, dk);
            let kh = head_slice(self.value(k).data(), n, d, h, dk);
            let vh = head_slice(self.value(v).data(), n, d, h, dk);
            let p = &mut probs[h * n * n..(h + 1) * n * n];
            kernels::matmul_nt(&qh, &kh, p, n, dk, n);
            for row in p.chunks_exact_mut(n) {
                for s in row.iter_mut() {
                    *s *= scale;
                }
                let tmp = row.to_vec();
                kernels::softmax_row(&tmp, row);
            }
            let mut oh = vec![T::zero(); n * dk];
            kernels::matmul_nn(p, &vh, &mut oh, n, n, dk);
            head_scatter(&oh, &mut out, n, d, h, dk);
        }
        let op = Op::SelfAttention { q, k, v, heads, probs };
        self.node(vec![n, d], out, op, &[q, k, v], "self_attention")
    }

    // ----------------------------------------------------------------------
    // reductions and losses

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).sum_f64();
        self.node(Vec::new(), vec![T::of(s)], Op::SumAll(x), &[x], "sum_all")
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum_all(x)?;
        self.scale(s, T::of(1.0 / n as f64))
    }

    /// Mean over rows of `−Σₖ tₖ·log softmax(logits)ₖ`; `target` has the
    /// shape of `logits` (one-hot rows for hard labels).
    pub fn cross_entropy(&mut self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        same_shape("cross_entropy", self.shape(logits), target.shape())?;
        let k = self.value(logits).last_dim();
        let lv = self.value(logits).data();
        let rows = lv.len() / k;
        let mut probs = vec![T::zero(); lv.len()];
        let mut total = 0.0f64;
        for r in 0..rows {
            let row = &lv[r * k..(r + 1) * k];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.f64()));
            let lse = max + row.iter().map(|v| (v.f64() - max).exp()).sum::<f64>().ln();
            for j in 0..k {
                let logp = row[j].f64() - lse;
                probs[r * k + j] = T::of(logp.exp());
                total -= target.data()[r * k + j].f64() * logp;
            }
        }
        let op = Op::CrossEntropy {
            logits,
            target: target.data().to_vec(),
            probs,
        };
        self.node(Vec::new(), vec![T::of(total / rows as f64)], op, &[logits], "cross_entropy")
    }

    /// Soft dice loss `1 − meanₖ (2·Σp·t + ε)/(Σp + Σt + ε)` over the class
    /// axis (last) of `probs`.
    pub fn dice_loss(&mut self, probs: Var, target: &Tensor<T>, eps: f64) -> Result<Var> {
        same_shape("dice_loss", self.shape(probs), target.shape())?;
        let k = self.value(probs).last_dim();
        let pv = self.value(probs).data();
        let tv = target.data();
        let mut inter = vec![0.0f64; k];
        let mut denom = vec![0.0f64; k];
        for (prow, trow) in pv.chunks_exact(k).zip(tv.chunks_exact(k)) {
            for j in 0..k {
                inter[j] += prow[j].f64() * trow[j].f64();
                denom[j] += prow[j].f64() + trow[j].f64();
            }
        }
        let mean_coef = (0..k)
            .map(|j| (2.0 * inter[j] + eps) / (denom[j] + eps))
            .sum::<f64>()
            / k as f64;
        let op = Op::Dice {
            probs,
            target: tv.to_vec(),
            eps,
            inter,
            denom,
        };
        self.node(Vec::new(), vec![T::of(1.0 - mean_coef)], op, &[probs], "dice_loss")
    }

    // ----------------------------------------------------------------------
    // backward

    /// Reverse sweep from a scalar `loss`. Every node that requires a
    /// gradient and is reachable from `loss` receives one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::dim(format!(
                "backward from non-scalar of shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        for (i, g) in grads.iter_mut().enumerate() {
            if !matches!(self.nodes[i].op, Op::Leaf) {
                *g = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let dims = |v: Var| self.nodes[v.0].value.shape();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if self.nodes[v.0].needs_grad {
                let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
                f(buf);
            }
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (n, k) = (dims(a)[0], dims(a)[1]);
                let m = dims(b)[1];
                acc(a, &mut |da| kernels::matmul_nt(g, val(b), da, n, m, k));
                acc(b, &mut |db| kernels::matmul_tn(val(a), g, db, n, k, m));
            }
            &Op::Transpose(a) => {
                let (r, c) = (dims(a)[0], dims(a)[1]);
                let gt = kernels::transpose(g, c, r);
                acc(a, &mut |da| add_into(da, &gt));
            }
            &Op::Add(a, b) => {
                acc(a, &mut |da| add_into(da, g));
                acc(b, &mut |db| add_into(db, g));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |da| add_into(da, g));
                acc(b, &mut |db| {
                    for (d, &gv) in db.iter_mut().zip(g) {
                        *d -= gv;
                    }
                });
            }
            &Op::Mul(a, b) => {
                acc(a, &mut |da| {
                    for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(val(b)) {
                        *d += gv * bv;
                    }
                });
                acc(b, &mut |db| {
                    for ((d, &gv), &av) in db.iter_mut().zip(g).zip(val(a)) {
                        *d += gv * av;
                    }
                });
            }
            &Op::Scale(a, s) => {
                acc(a, &mut |da| kernels::axpy(da, s, g));
            }
            &Op::AddBias(x, b) => {
                acc(x, &mut |dx| add_into(dx, g));
                acc(b, &mut |db| {
                    for row in g.chunks_exact(db.len()) {
                        add_into(db, row);
                    }
                });
            }
            &Op::MulChannels(x, s) => {
                let sv = val(s);
                let d = sv.len();
                acc(x, &mut |dx| {
                    for (drow, grow) in dx.chunks_exact_mut(d).zip(g.chunks_exact(d)) {
                        for j in 0..d {
                            drow[j] += grow[j] * sv[j];
                        }
                    }
                });
                acc(s, &mut |ds| {
                    for (xrow, grow) in val(x).chunks_exact(d).zip(g.chunks_exact(d)) {
                        for j in 0..d {
                            ds[j] += grow[j] * xrow[j];
                        }
                    }
                });
            }
            &Op::Blend2 { e, f, w, b } => {
                let wv = val(w);
                let c = wv.len() / 2;
                acc(e, &mut |de| {
                    for (drow, grow) in de.chunks_exact_mut(c).zip(g.chunks_exact(c)) {
                        for j in 0..c {
                            drow[j] += wv[j] * grow[j];
                        }
                    }
                });
                acc(f, &mut |df| {
                    for (drow, grow) in df.chunks_exact_mut(c).zip(g.chunks_exact(c)) {
                        for j in 0..c {
                            drow[j] += wv[c + j] * grow[j];
                        }
                    }
                });
                acc(w, &mut |dw| {
                    let (ev, fv) = (val(e), val(f));
                    for (t, grow) in g.chunks_exact(c).enumerate() {
                        for j in 0..c {
                            dw[j] += grow[j] * ev[t * c + j];
                            dw[c + j] += grow[j] * fv[t * c + j];
                        }
                    }
                });
                acc(b, &mut |db| {
                    for grow in g.chunks_exact(c) {
                        add_into(db, grow);
                    }
                });
            }
            &Op::Softmax { x, axis } => {
                let (outer, len, inner) = kernels::axis_split(node.value.shape(), axis);
                acc(x, &mut |dx| {
                    kernels::softmax_strided_backward(node.value.data(), g, dx, outer, len, inner)
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let d = val(gain).len();
                acc(x, &mut |dx| {
                    kernels::layer_norm_backward(g, xhat, rstd, val(gain), d, Some(dx), None, None)
                });
                acc(gain, &mut |dg| {
                    kernels::layer_norm_backward(g, xhat, rstd, val(gain), d, None, Some(dg), None)
                });
                acc(bias, &mut |db| {
                    kernels::layer_norm_backward(g, xhat, rstd, val(gain), d, None, None, Some(db))
                });
            }
            &Op::Gelu(x) => {
                acc(x, &mut |dx| {
                    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(val(x)) {
                        *d += gv * kernels::gelu_grad(xv);
                    }
                });
            }
            &Op::DepthwiseConv { x, k, h, w, kh, kw } => {
                let c = dims(k)[2];
                acc(x, &mut |dx| {
                    kernels::depthwise_conv2d_backward(val(x), val(k), g, h, w, c, kh, kw, Some(dx), None)
                });
                acc(k, &mut |dk| {
                    kernels::depthwise_conv2d_backward(val(x), val(k), g, h, w, c, kh, kw, None, Some(dk))
                });
            }
            Op::Blur { x, h, w, taps } => {
                let (x, h, w) = (*x, *h, *w);
                let c = self.nodes[x.0].value.last_dim();
                acc(x, &mut |dx| {
                    let mut tmp = vec![T::zero(); g.len()];
                    kernels::conv_axis_adjoint(g, taps, h, w, c, 0, &mut tmp);
                    kernels::conv_axis_adjoint(&tmp, taps, h, w, c, 1, dx);
                });
            }
            &Op::Im2Col { x, geom } => {
                acc(x, &mut |dx| kernels::col2im(g, &geom, dx));
            }
            &Op::SpaceToDepth { x, h, w, f } => {
                let c = dims(x).last().copied().unwrap_or(1);
                acc(x, &mut |dx| {
                    add_into(dx, &kernels::depth_to_space(g, h / f, w / f, c, f));
                });
            }
            &Op::DepthToSpace { x, h, w, f } => {
                let c = node.value.last_dim();
                acc(x, &mut |dx| {
                    add_into(dx, &kernels::space_to_depth(g, h * f, w * f, c, f));
                });
            }
            &Op::ConcatCols(a, b) => {
                let (da_w, db_w) = (dims(a)[1], dims(b)[1]);
                let w = da_w + db_w;
                acc(a, &mut |da| {
                    for (drow, grow) in da.chunks_exact_mut(da_w).zip(g.chunks_exact(w)) {
                        add_into(drow, &grow[..da_w]);
                    }
                });
                acc(b, &mut |db| {
                    for (drow, grow) in db.chunks_exact_mut(db_w).zip(g.chunks_exact(w)) {
                        add_into(drow, &grow[da_w..]);
                    }
                });
            }
            &Op::Reshape(x) => {
                acc(x, &mut |dx| add_into(dx, g));
            }
            Op::Kron { x, a, b, xb } => {
                let (x, a, b) = (*x, *a, *b);
                let n = dims(x)[0];
                let (sa, sb) = (dims(a)[0], dims(b)[0]);
                let d = sa * sb;
                let av = val(a);
                // dZ_t = A · dY_t
                let mut dz = vec![T::zero(); n * d];
                for t in 0..n {
                    let gy = &g[t * d..(t + 1) * d];
                    let z = &mut dz[t * d..(t + 1) * d];
                    for i in 0..sa {
                        for j in 0..sa {
                            kernels::axpy(&mut z[i * sb..(i + 1) * sb], av[i * sa + j], &gy[j * sb..(j + 1) * sb]);
                        }
                    }
                }
                acc(a, &mut |da| {
                    for t in 0..n {
                        let z = &xb[t * d..(t + 1) * d];
                        let gy = &g[t * d..(t + 1) * d];
                        for i in 0..sa {
                            for j in 0..sa {
                                da[i * sa + j] += kernels::dot(&z[i * sb..(i + 1) * sb], &gy[j * sb..(j + 1) * sb]);
                            }
                        }
                    }
                });
                acc(x, &mut |dx| kernels::matmul_nt(&dz, val(b), dx, n * sa, sb, sb));
                acc(b, &mut |db| kernels::matmul_tn(val(x), &dz, db, n * sa, sb, sb));
            }
            &Op::HeadContext { k, v, heads } => {
                let (n, d) = (dims(k)[0], dims(k)[1]);
                let dk = d / heads;
                let (kv, vv) = (val(k), val(v));
                acc(k, &mut |dkk| {
                    for t in 0..n {
                        for h in 0..heads {
                            let vrow = &vv[t * d + h * dk..t * d + (h + 1) * dk];
                            let gc = &g[h * dk * dk..(h + 1) * dk * dk];
                            for i in 0..dk {
                                dkk[t * d + h * dk + i] += kernels::dot(&gc[i * dk..(i + 1) * dk], vrow);
                            }
                        }
                    }
                });
                acc(v, &mut |dv| {
                    for t in 0..n {
                        for h in 0..heads {
                            let krow = &kv[t * d + h * dk..t * d + (h + 1) * dk];
                            let gc = &g[h * dk * dk..(h + 1) * dk * dk];
                            let drow = &mut dv[t * d + h * dk..t * d + (h + 1) * dk];
                            for i in 0..dk {
                                kernels::axpy(drow, krow[i], &gc[i * dk..(i + 1) * dk]);
                            }
                        }
                    }
                });
            }
            &Op::HeadApply { q, ctx, heads } => {
                let (n, d) = (dims(q)[0], dims(q)[1]);
                let dk = d / heads;
                let (qv, cv) = (val(q), val(ctx));
                acc(q, &mut |dq| {
                    for t in 0..n {
                        for h in 0..heads {
                            let grow = &g[t * d + h * dk..t * d + (h + 1) * dk];
                            let c = &cv[h * dk * dk..(h + 1) * dk * dk];
                            for i in 0..dk {
                                dq[t * d + h * dk + i] += kernels::dot(&c[i * dk..(i + 1) * dk], grow);
                            }
                        }
                    }
                });
                acc(ctx, &mut |dc| {
                    for t in 0..n {
                        for h in 0..heads {
                            let qrow = &qv[t * d + h * dk..t * d + (h + 1) * dk];
                            let grow = &g[t * d + h * dk..t * d + (h + 1) * dk];
                            let c = &mut dc[h * dk * dk..(h + 1) * dk * dk];
                            for i in 0..dk {
                                kernels::axpy(&mut c[i * dk..(i + 1) * dk], qrow[i], grow);
                            }
                        }
                    }
                });
            }
            Op::SelfAttention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (q, k, v, heads) = (*q, *k, *v, *heads);
                let (n, d) = (dims(q)[0], dims(q)[1]);
                let dk = d / heads;
                let scale = T::of(1.0 / (dk as f64).sqrt());
                let mut dq = vec![T::zero(); n * d];
                let mut dkey = vec![T::zero(); n * d];
                let mut dv = vec![T::zero(); n * d];
                for h in 0..heads {
                    let qh = head_slice(val(q), n, d, h, dk);
                    let kh = head_slice(val(k), n, d, h, dk);
                    let vh = head_slice(val(v), n, d, h, dk);
                    let gh = head_slice(g, n, d, h, dk);
                    let p = &probs[h * n * n..(h + 1) * n * n];
                    let mut dp = vec![T::zero(); n * n];
                    kernels::matmul_nt(&gh, &vh, &mut dp, n, dk, n);
                    let mut ds = vec![T::zero(); n * n];
                    kernels::softmax_strided_backward(p, &dp, &mut ds, n, n, 1);
                    for s in ds.iter_mut() {
                        *s *= scale;
                    }
                    let mut dqh = vec![T::zero(); n * dk];
                    kernels::matmul_nn(&ds, &kh, &mut dqh, n, n, dk);
                    let mut dkh = vec![T::zero(); n * dk];
                    kernels::matmul_tn(&ds, &qh, &mut dkh, n, n, dk);
                    let mut dvh = vec![T::zero(); n * dk];
                    kernels::matmul_tn(p, &gh, &mut dvh, n, n, dk);
                    head_scatter(&dqh, &mut dq, n, d, h, dk);
                    head_scatter(&dkh, &mut dkey, n, d, h, dk);
                    head_scatter(&dvh, &mut dv, n, d, h, dk);
                }
                acc(q, &mut |d| add_into(d, &dq));
                acc(k, &mut |d| add_into(d, &dkey));
                acc(v, &mut |d| add_into(d, &dv));
            }
            &Op::SumAll(x) => {
                let s = g[0];
                acc(x, &mut |dx| {
                    for d in dx.iter_mut() {
                        *d += s;
                    }
                });
            }
            Op::CrossEntropy { logits, target, probs } => {
                let k = self.nodes[logits.0].value.last_dim();
                let rows = probs.len() / k;
                let s = g[0] / T::of(rows as f64);
                acc(*logits, &mut |dl| {
                    for ((d, &p), &t) in dl.iter_mut().zip(probs).zip(target) {
                        *d += s * (p - t);
                    }
                });
            }
            Op::Dice {
                probs,
                target,
                eps,
                inter,
                denom,
            } => {
                let k = inter.len();
                let s = g[0].f64() / k as f64;
                let coef: Vec<(f64, f64)> = (0..k)
                    .map(|j| {
                        let den = denom[j] + eps;
                        (2.0 / den, (2.0 * inter[j] + eps) / (den * den))
                    })
                    .collect();
                acc(*probs, &mut |dp| {
                    for (drow, trow) in dp.chunks_exact_mut(k).zip(target.chunks_exact(k)) {
                        for j in 0..k {
                            let (a, b) = coef[j];
                            drow[j] += T::of(-s * (a * trow[j].f64() - b));
                        }
                    }
                });
            }
        }
    }
}

#[inline]
fn add_into<T: Float>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn head_slice<T: Float>(x: &[T], n: usize, d: usize, h: usize, dk: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n * dk);
    for t in 0..n {
        out.extend_from_slice(&x[t * d + h * dk..t * d + (h + 1) * dk]);
    }
    out
}

fn head_scatter<T: Float>(src: &[T], dst: &mut [T], n: usize, d: usize, h: usize, dk: usize) {
    for t in 0..n {
        add_into(&mut dst[t * d + h * dk..t * d + (h + 1) * dk], &src[t * dk..(t + 1) * dk]);
    }
}
