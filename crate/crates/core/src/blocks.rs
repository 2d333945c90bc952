//! Building blocks of the encoder and decoder: patch embedding, merging and
//! expanding, MiX-FFN and the full transformer layer.
//!
//! All blocks work on token matrices of shape `(H·W)×C` in row-major grid
//! order and record onto a [`Graph`]; the grid geometry is passed
//! alongside.

use crate::attention::{AttentionKind, AttentionParams, PROJ_INIT_STD};
use crate::error::{Error, Result};
use crate::numerics::{ConvGeometry, Float, Graph, Var, LAYER_NORM_EPS};
use crate::params::{Bound, ParamBuilder, ParamId};
use crate::pyramid::GaussianSpec;

pub const FFN_EXPANSION: usize = 4;
pub const EMBED_KERNEL: usize = 7;
pub const EMBED_STRIDE: usize = 4;
pub const EMBED_PAD: usize = 3;
const DW_KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn init<T: Float>(pb: &mut ParamBuilder<'_, T>, d: usize) -> Result<Self> {
        Ok(Self {
            gain: pb.ones("gain", &[d])?,
            bias: pb.zeros("bias", &[d])?,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p[self.gain], p[self.bias], T::of(LAYER_NORM_EPS))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl LinearParams {
    pub fn init<T: Float>(pb: &mut ParamBuilder<'_, T>, din: usize, dout: usize, bias: bool) -> Result<Self> {
        Self::init_std(pb, din, dout, bias, PROJ_INIT_STD)
    }

    /// `N(0, 1/din)` weights, which keep the output on the input's scale.
    pub fn init_fan_in<T: Float>(pb: &mut ParamBuilder<'_, T>, din: usize, dout: usize, bias: bool) -> Result<Self> {
        Self::init_std(pb, din, dout, bias, (1.0 / din as f64).sqrt())
    }

    pub fn init_std<T: Float>(
        pb: &mut ParamBuilder<'_, T>,
        din: usize,
        dout: usize,
        bias: bool,
        std: f64,
    ) -> Result<Self> {
        let w = pb.normal("w", &[din, dout], std)?;
        let b = if bias { Some(pb.zeros("b", &[dout])?) } else { None };
        Ok(Self { w, b })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p[self.w], self.b.map(|b| p[b]))
    }
}

/// Overlapping strided-convolution patch embedding followed by layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbedParams {
    pub c_in: usize,
    pub proj: LinearParams,
    pub ln: LayerNormParams,
}

impl PatchEmbedParams {
    pub fn init<T: Float>(pb: &mut ParamBuilder<'_, T>, c_in: usize, c: usize) -> Result<Self> {
        let fan_out = EMBED_KERNEL * EMBED_KERNEL * c;
        let std = (2.0 / fan_out as f64).sqrt();
        Ok(Self {
            c_in,
            proj: LinearParams::init_std(&mut pb.sub("proj"), EMBED_KERNEL * EMBED_KERNEL * c_in, c, true, std)?,
            ln: LayerNormParams::init(&mut pb.sub("ln"), c)?,
        })
    }

    /// `img` holds an `h×w` grid of `c_in`-channel pixels; returns
    /// `(h/4·w/4)×C` tokens.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, img: Var, h: usize, w: usize) -> Result<Var> {
        if h % EMBED_STRIDE != 0 || w % EMBED_STRIDE != 0 {
            return Err(Error::dim(format!(
                "patch_embed: {h}x{w} image is not divisible by {EMBED_STRIDE}"
            )));
        }
        let geom = ConvGeometry {
            h,
            w,
            c: self.c_in,
            kernel: EMBED_KERNEL,
            stride: EMBED_STRIDE,
            pad: EMBED_PAD,
        };
        let cols = g.im2col(img, geom)?;
        let y = self.proj.forward(g, p, cols)?;
        self.ln.forward(g, p, y)
    }
}

/// `2×2` token merge: concatenate, layer norm, bias-free linear.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMergeParams {
    pub ln: LayerNormParams,
    pub proj: LinearParams,
}

impl PatchMergeParams {
    pub fn init<T: Float>(pb: &mut ParamBuilder<'_, T>, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            ln: LayerNormParams::init(&mut pb.sub("ln"), 4 * c_in)?,
            proj: LinearParams::init_fan_in(&mut pb.sub("proj"), 4 * c_in, c_out, false)?,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var, h: usize, w: usize) -> Result<Var> {
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim(format!("patch_merge: {h}x{w} grid has an odd side")));
        }
        let m = g.space_to_depth(x, h, w, 2)?;
        let m = self.ln.forward(g, p, m)?;
        self.proj.forward(g, p, m)
    }
}

/// Linear `Cin → f²·Cout` followed by a pixel shuffle onto the `f×` finer grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchExpandParams {
    pub factor: usize,
    pub proj: LinearParams,
}

impl PatchExpandParams {
    pub fn init<T: Float>(pb: &mut ParamBuilder<'_, T>, c_in: usize, c_out: usize, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::param("patch_expand: factor must be positive"));
        }
        Ok(Self {
            factor,
            proj: LinearParams::init_fan_in(&mut pb.sub("proj"), c_in, factor * factor * c_out, false)?,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var, h: usize, w: usize) -> Result<Var> {
        let y = self.proj.forward(g, p, x)?;
        g.depth_to_space(y, h, w, self.factor)
    }
}

/// `linear(C→4C) → depthwise 3×3 → gelu → linear(4C→C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixFfnParams {
    pub fc1: LinearParams,
    pub dw: ParamId,
    pub dw_bias: ParamId,
    pub fc2: LinearParams,
}

impl MixFfnParams {
    pub fn init<T: Float>(pb: &mut ParamBuilder<'_, T>, c: usize) -> Result<Self> {
        let hidden = FFN_EXPANSION * c;
        let dw_std = (2.0 / (DW_KERNEL * DW_KERNEL) as f64).sqrt();
        Ok(Self {
            fc1: LinearParams::init(&mut pb.sub("fc1"), c, hidden, true)?,
            dw: pb.normal("dw", &[DW_KERNEL, DW_KERNEL, hidden], dw_std)?,
            dw_bias: pb.zeros("dw_bias", &[hidden])?,
            fc2: LinearParams::init(&mut pb.sub("fc2"), hidden, c, true)?,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var, h: usize, w: usize) -> Result<Var> {
        let y = self.fc1.forward(g, p, x)?;
        let y = g.depthwise_conv2d(y, p[self.dw], h, w)?;
        let y = g.add_bias(y, p[self.dw_bias])?;
        let y = g.gelu(y)?;
        self.fc2.forward(g, p, y)
    }
}

/// One transformer layer:
/// `y = x + attn(LN1 x) + des(x)`, `out = y + ffn(LN2 y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub attention: AttentionParams,
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
    pub ffn: MixFfnParams,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl BlockParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Float>(
        pb: &mut ParamBuilder<'_, T>,
        kind: AttentionKind,
        h: usize,
        w: usize,
        c: usize,
        heads: usize,
        spec: &GaussianSpec,
        with_des: bool,
    ) -> Result<Self> {
        Ok(Self {
            attention: AttentionParams::init(&mut pb.sub("attn"), kind, c, heads, spec, with_des)?,
            ln1: LayerNormParams::init(&mut pb.sub("ln1"), c)?,
            ln2: LayerNormParams::init(&mut pb.sub("ln2"), c)?,
            ffn: MixFfnParams::init(&mut pb.sub("ffn"), c)?,
            h,
            w,
            c,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var, spec: &GaussianSpec) -> Result<Var> {
        let (h, w) = (self.h, self.w);
        if g.shape(x) != [h * w, self.c] {
            return Err(Error::dim(format!(
                "transformer_layer: tokens {:?} for a {h}x{w}x{} stage",
                g.shape(x),
                self.c
            )));
        }
        let n1 = self.ln1.forward(g, p, x)?;
        let att = self.attention.forward(g, p, n1, h, w, spec)?;
        let mut terms = vec![x, att];
        if let Some(des) = &self.attention.des {
            terms.push(des.forward(g, p, x)?);
        }
        let y = g.add_all(&terms)?;
        let n2 = self.ln2.forward(g, p, y)?;
        let f = self.ffn.forward(g, p, n2, h, w)?;
        g.add(y, f)
    }
}
