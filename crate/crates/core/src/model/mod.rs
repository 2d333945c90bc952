//! The full segmentation network: a four-stage encoder, the multi-scale
//! bridge, a three-stage decoder and a pointwise segmentation head.

mod checkpoint;

pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_VERSION};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::PROJ_INIT_STD;
pub use crate::attention::AttentionKind;
use crate::attention::AttentionProbe;
use crate::blocks::{BlockParams, LayerNormParams, LinearParams, MixFfnParams, PatchEmbedParams, PatchExpandParams, PatchMergeParams};
use crate::config::{join, KeyValues};
use crate::error::{Error, Result};
use crate::numerics::{Float, Graph, Tensor, Var};
use crate::params::{Bound, ParamBuilder, ParamStore};
use crate::pyramid::GaussianSpec;

pub const STAGES: usize = 4;

/// Switches that turn the full model into its ablated variants.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Ablation {
    /// Efficient attention only, without the pyramid branch or fusion.
    pub disable_frequency_attention: bool,
    /// Encoder features go straight to the decoder skips.
    pub disable_bridge: bool,
    pub disable_des: bool,
    /// Quadratic dot-product attention in every layer.
    pub baseline_self_attention: bool,
}

impl Ablation {
    pub const FLAGS: [&'static str; 4] = [
        "disable_frequency_attention",
        "disable_bridge",
        "disable_des",
        "baseline_self_attention",
    ];

    pub fn set(&mut self, flag: &str, on: bool) -> Result<()> {
        match flag {
            "disable_frequency_attention" => self.disable_frequency_attention = on,
            "disable_bridge" => self.disable_bridge = on,
            "disable_des" => self.disable_des = on,
            "baseline_self_attention" => self.baseline_self_attention = on,
            _ => return Err(Error::Config(format!("unknown ablation `{flag}`"))),
        }
        Ok(())
    }

    fn get(&self, flag: &str) -> bool {
        match flag {
            "disable_frequency_attention" => self.disable_frequency_attention,
            "disable_bridge" => self.disable_bridge,
            "disable_des" => self.disable_des,
            _ => self.baseline_self_attention,
        }
    }

    pub fn attention_kind(&self) -> AttentionKind {
        if self.baseline_self_attention {
            AttentionKind::DotProduct
        } else if self.disable_frequency_attention {
            AttentionKind::Efficient
        } else {
            AttentionKind::EfficientFrequency
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    /// Base width `C`; stage `s` has width `multipliers[s]·C`.
    pub channels: usize,
    pub multipliers: [usize; STAGES],
    pub encoder_depths: [usize; STAGES],
    pub decoder_depths: [usize; STAGES - 1],
    pub heads: [usize; STAGES],
    pub pyramids: [GaussianSpec; STAGES],
    pub num_classes: usize,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// 64×64 grayscale input, `C = 16`, two classes.
    pub fn toy() -> Self {
        Self {
            height: 64,
            width: 64,
            in_channels: 1,
            channels: 16,
            multipliers: [1, 2, 5, 8],
            encoder_depths: [2; STAGES],
            decoder_depths: [2; STAGES - 1],
            heads: [1, 2, 4, 8],
            pyramids: std::array::from_fn(|_| GaussianSpec::default()),
            num_classes: 2,
            ablation: Ablation::default(),
        }
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation;
        self
    }

    pub fn stage_width(&self, s: usize) -> usize {
        self.multipliers[s] * self.channels
    }

    /// Token grid `(h, w)` of stage `s`.
    pub fn stage_grid(&self, s: usize) -> (usize, usize) {
        (self.height >> (2 + s), self.width >> (2 + s))
    }

    pub fn num_layers(&self) -> usize {
        self.encoder_depths.iter().sum::<usize>() + self.decoder_depths.iter().sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 || self.height % 32 != 0 || self.width % 32 != 0 {
            return fail(format!("input {}x{} must be a positive multiple of 32", self.height, self.width));
        }
        if self.in_channels == 0 || self.channels == 0 || self.num_classes == 0 {
            return fail("in_channels, channels and num_classes must be positive".into());
        }
        for s in 0..STAGES {
            if self.multipliers[s] == 0 {
                return fail("stage multipliers must be positive".into());
            }
            let d = self.stage_width(s);
            if self.heads[s] == 0 || d % self.heads[s] != 0 {
                return fail(format!("stage {} width {d} is not divisible by {} heads", s + 1, self.heads[s]));
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("height", self.height);
        kv.set("width", self.width);
        kv.set("in_channels", self.in_channels);
        kv.set("channels", self.channels);
        kv.set("multipliers", join(&self.multipliers));
        kv.set("encoder_depths", join(&self.encoder_depths));
        kv.set("decoder_depths", join(&self.decoder_depths));
        kv.set("heads", join(&self.heads));
        for (s, p) in self.pyramids.iter().enumerate() {
            kv.set(format!("sigmas.stage{}", s + 1), join(p.sigmas()));
        }
        kv.set("num_classes", self.num_classes);
        for flag in Ablation::FLAGS {
            kv.set(flag, self.ablation.get(flag));
        }
        kv
    }

    /// Reads the model keys of `kv`, falling back to [`ModelConfig::toy`]
    /// for absent keys. A plain `sigmas` key applies to every stage.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = Self::toy();
        fn arr<const N: usize>(kv: &KeyValues, key: &str, default: [usize; N]) -> Result<[usize; N]> {
            match kv.parse_list::<usize>(key)? {
                None => Ok(default),
                Some(v) => v
                    .try_into()
                    .map_err(|v: Vec<usize>| Error::Config(format!("`{key}` needs {N} entries, got {}", v.len()))),
            }
        }
        let shared = kv.parse_list::<f64>("sigmas")?;
        let mut pyramids = d.pyramids.clone();
        for (s, p) in pyramids.iter_mut().enumerate() {
            let sig = kv.parse_list::<f64>(&format!("sigmas.stage{}", s + 1))?.or_else(|| shared.clone());
            if let Some(sig) = sig {
                *p = GaussianSpec::new(sig).map_err(|e| Error::Config(e.to_string()))?;
            }
        }
        let mut ablation = Ablation::default();
        for flag in Ablation::FLAGS {
            ablation.set(flag, kv.parse_or(flag, false)?)?;
        }
        let cfg = Self {
            height: kv.parse_or("height", d.height)?,
            width: kv.parse_or("width", d.width)?,
            in_channels: kv.parse_or("in_channels", d.in_channels)?,
            channels: kv.parse_or("channels", d.channels)?,
            multipliers: arr(kv, "multipliers", d.multipliers)?,
            encoder_depths: arr(kv, "encoder_depths", d.encoder_depths)?,
            decoder_depths: arr(kv, "decoder_depths", d.decoder_depths)?,
            heads: arr(kv, "heads", d.heads)?,
            pyramids,
            num_classes: kv.parse_or("num_classes", d.num_classes)?,
            ablation,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Learned weights of one bridge level.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeLevel {
    pub wq: crate::params::ParamId,
    pub wk: crate::params::ParamId,
    pub wv: crate::params::ParamId,
    pub ln: LayerNormParams,
    pub ffn: MixFfnParams,
}

#[derive(Debug, Clone, PartialEq)]
struct EncoderStage {
    merge: Option<PatchMergeParams>,
    layers: Vec<BlockParams>,
}

#[derive(Debug, Clone, PartialEq)]
struct DecoderStage {
    /// Target encoder stage index.
    stage: usize,
    expand: PatchExpandParams,
    fuse: LinearParams,
    layers: Vec<BlockParams>,
}

/// A recorded transformer-layer output (or the embedding), with its grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tap {
    pub var: Var,
    pub h: usize,
    pub w: usize,
}

/// Result of recording a full forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `(H·W)×num_classes`.
    pub logits: Var,
    /// Embedding output followed by every transformer layer, in depth order.
    pub taps: Vec<Tap>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaplacianFormer<T: Float = f32> {
    config: ModelConfig,
    params: ParamStore<T>,
    embed: PatchEmbedParams,
    encoder: Vec<EncoderStage>,
    bridge: Option<Vec<BridgeLevel>>,
    decoder: Vec<DecoderStage>,
    final_ln: LayerNormParams,
    expand_final: PatchExpandParams,
    head: LinearParams,
}

impl<T: Float> LaplacianFormer<T> {
    /// Builds and initializes a model from `seed`. Parameters are created
    /// in a fixed order starting with the patch embedding, so variants
    /// built from the same seed share their embedding weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let cfg = &config;
        let kind = cfg.ablation.attention_kind();
        let des = !cfg.ablation.disable_des;
        let c = cfg.channels;

        let embed = PatchEmbedParams::init(&mut pb.sub("embed"), cfg.in_channels, c)?;
        let mut encoder = Vec::with_capacity(STAGES);
        for s in 0..STAGES {
            let mut sb = pb.sub(&format!("encoder{}", s + 1));
            let (h, w) = cfg.stage_grid(s);
            let d = cfg.stage_width(s);
            let merge = if s == 0 {
                None
            } else {
                Some(PatchMergeParams::init(&mut sb.sub("merge"), cfg.stage_width(s - 1), d)?)
            };
            let layers = (0..cfg.encoder_depths[s])
                .map(|i| BlockParams::init(&mut sb.sub(&format!("layer{i}")), kind, h, w, d, cfg.heads[s], &cfg.pyramids[s], des))
                .collect::<Result<Vec<_>>>()?;
            encoder.push(EncoderStage { merge, layers });
        }

        let bridge = if cfg.ablation.disable_bridge {
            None
        } else {
            let mut levels = Vec::with_capacity(STAGES);
            for s in 0..STAGES {
                let mut lb = pb.sub(&format!("bridge{}", s + 1));
                let d = cfg.stage_width(s);
                levels.push(BridgeLevel {
                    wq: lb.normal("wq", &[d, d], PROJ_INIT_STD)?,
                    wk: lb.normal("wk", &[d, c], PROJ_INIT_STD)?,
                    wv: lb.normal("wv", &[d, c], PROJ_INIT_STD)?,
                    ln: LayerNormParams::init(&mut lb.sub("ln"), d)?,
                    ffn: MixFfnParams::init(&mut lb.sub("ffn"), d)?,
                });
            }
            Some(levels)
        };

        let mut decoder = Vec::with_capacity(STAGES - 1);
        for (j, s) in (0..STAGES - 1).rev().enumerate() {
            let mut db = pb.sub(&format!("decoder{}", s + 1));
            let (h, w) = cfg.stage_grid(s);
            let d = cfg.stage_width(s);
            let expand = PatchExpandParams::init(&mut db.sub("expand"), cfg.stage_width(s + 1), d, 2)?;
            let fuse = LinearParams::init_fan_in(&mut db.sub("fuse"), 2 * d, d, true)?;
            let layers = (0..cfg.decoder_depths[j])
                .map(|i| BlockParams::init(&mut db.sub(&format!("layer{i}")), kind, h, w, d, cfg.heads[s], &cfg.pyramids[s], des))
                .collect::<Result<Vec<_>>>()?;
            decoder.push(DecoderStage { stage: s, expand, fuse, layers });
        }
        let final_ln = LayerNormParams::init(&mut pb.sub("final_ln"), c)?;
        let expand_final = PatchExpandParams::init(&mut pb.sub("expand_final"), c, c, 4)?;
        let head = LinearParams::init_fan_in(&mut pb.sub("head"), c, cfg.num_classes, true)?;

        Ok(Self {
            config,
            params: store,
            embed,
            encoder,
            bridge,
            decoder,
            final_ln,
            expand_final,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// The same model with parameters converted to another precision.
    pub fn cast<U: Float>(&self) -> LaplacianFormer<U> {
        LaplacianFormer {
            config: self.config.clone(),
            params: self.params.cast(),
            embed: self.embed.clone(),
            encoder: self.encoder.clone(),
            bridge: self.bridge.clone(),
            decoder: self.decoder.clone(),
            final_ln: self.final_ln.clone(),
            expand_final: self.expand_final.clone(),
            head: self.head.clone(),
        }
    }

    /// Replaces all parameters, checking names and shapes.
    pub fn assign_params(&mut self, other: &ParamStore<T>) -> Result<()> {
        for id in self.params.ids() {
            let name = self.params.name(id);
            let src = other
                .find(name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter `{name}`")))?;
            let (want, got) = (self.params.get(id).shape(), other.get(src).shape());
            if want != got {
                return Err(Error::ParamShape {
                    name: name.to_string(),
                    expected: want.to_vec(),
                    found: got.to_vec(),
                });
            }
        }
        if other.len() != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} parameters, model has {}",
                other.len(),
                self.params.len()
            )));
        }
        let ids: Vec<_> = self.params.ids().collect();
        for id in ids {
            let src = other.find(self.params.name(id)).expect("checked above");
            *self.params.get_mut(id) = other.get(src).clone();
        }
        Ok(())
    }

    fn check_image(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        let c = &self.config;
        if img.shape() != [c.height, c.width, c.in_channels] {
            return Err(Error::dim(format!(
                "image {:?} does not match configured {}x{}x{}",
                img.shape(),
                c.height,
                c.width,
                c.in_channels
            )));
        }
        img.reshape(&[c.height * c.width, c.in_channels])
    }

    /// Encoder features `F1..F4` plus the embedding and layer taps.
    pub fn record_encoder(&self, g: &mut Graph<T>, p: &Bound, img: Var) -> Result<(Vec<Var>, Vec<Tap>)> {
        let cfg = &self.config;
        let mut x = self.embed.forward(g, p, img, cfg.height, cfg.width)?;
        let (h0, w0) = cfg.stage_grid(0);
        let mut taps = vec![Tap { var: x, h: h0, w: w0 }];
        let mut feats = Vec::with_capacity(STAGES);
        for (s, stage) in self.encoder.iter().enumerate() {
            let (h, w) = cfg.stage_grid(s);
            if let Some(merge) = &stage.merge {
                x = merge.forward(g, p, x, 2 * h, 2 * w)?;
            }
            for layer in &stage.layers {
                x = layer.forward(g, p, x, &cfg.pyramids[s])?;
                taps.push(Tap { var: x, h, w });
            }
            feats.push(x);
        }
        Ok((feats, taps))
    }

    /// Multi-scale bridge. Every level contributes a `C×C` context built
    /// from its own keys and values; the summed context is redistributed
    /// through each level's query.
    pub fn record_bridge(&self, g: &mut Graph<T>, p: &Bound, feats: &[Var]) -> Result<Vec<Var>> {
        if feats.len() != STAGES {
            return Err(Error::dim(format!("bridge expects {STAGES} feature maps, got {}", feats.len())));
        }
        let cfg = &self.config;
        for (s, &f) in feats.iter().enumerate() {
            let (h, w) = cfg.stage_grid(s);
            if g.shape(f) != [h * w, cfg.stage_width(s)] {
                return Err(Error::dim(format!(
                    "bridge level {}: features {:?}, expected [{}, {}]",
                    s + 1,
                    g.shape(f),
                    h * w,
                    cfg.stage_width(s)
                )));
            }
        }
        let Some(levels) = &self.bridge else {
            return Ok(feats.to_vec());
        };
        let c = cfg.channels;
        let mut contexts = Vec::with_capacity(STAGES);
        for (lvl, &f) in levels.iter().zip(feats) {
            let k = g.matmul(f, p[lvl.wk])?;
            let k = g.softmax(k, 0)?;
            let v = g.matmul(f, p[lvl.wv])?;
            contexts.push(g.head_context(k, v, 1)?);
        }
        let ctx = g.add_all(&contexts)?;
        let ctx = g.reshape(ctx, &[c, c])?;
        let mut out = Vec::with_capacity(STAGES);
        for (s, (lvl, &f)) in levels.iter().zip(feats).enumerate() {
            let (h, w) = cfg.stage_grid(s);
            let (n, m) = (h * w, cfg.multipliers[s]);
            let q = g.matmul(f, p[lvl.wq])?;
            let q = g.reshape(q, &[n * m, c])?;
            let q = g.softmax(q, 1)?;
            let z = g.matmul(q, ctx)?;
            let z = g.reshape(z, &[n, m * c])?;
            let y = g.add(f, z)?;
            let ny = lvl.ln.forward(g, p, y)?;
            let ffn = lvl.ffn.forward(g, p, ny, h, w)?;
            out.push(g.add(y, ffn)?);
        }
        Ok(out)
    }

    /// Decoder from bridged features `B1..B4` to `(H·W)×num_classes` logits.
    pub fn record_decoder(&self, g: &mut Graph<T>, p: &Bound, skips: &[Var], taps: &mut Vec<Tap>) -> Result<Var> {
        let cfg = &self.config;
        let mut x = skips[STAGES - 1];
        for stage in &self.decoder {
            let s = stage.stage;
            let (h, w) = cfg.stage_grid(s);
            x = stage.expand.forward(g, p, x, h / 2, w / 2)?;
            let cat = g.concat_cols(x, skips[s])?;
            x = stage.fuse.forward(g, p, cat)?;
            for layer in &stage.layers {
                x = layer.forward(g, p, x, &cfg.pyramids[s])?;
                taps.push(Tap { var: x, h, w });
            }
        }
        let (h0, w0) = cfg.stage_grid(0);
        let x = self.final_ln.forward(g, p, x)?;
        let x = self.expand_final.forward(g, p, x, h0, w0)?;
        self.head.forward(g, p, x)
    }

    /// Records the full forward pass of an `H×W×Cin` image given as an
    /// `(H·W)×Cin` node.
    pub fn record(&self, g: &mut Graph<T>, p: &Bound, img: Var) -> Result<Forward> {
        let (feats, mut taps) = self.record_encoder(g, p, img)?;
        let skips = self.record_bridge(g, p, &feats)?;
        let logits = self.record_decoder(g, p, &skips, &mut taps)?;
        Ok(Forward { logits, taps })
    }

    fn untracked<R>(&self, f: impl FnOnce(&mut Graph<T>, &Bound) -> Result<R>) -> Result<R> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false)?;
        f(&mut g, &p)
    }

    /// Logits `H×W×num_classes` for an `H×W×Cin` image.
    pub fn forward(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.check_image(img)?;
        let cfg = &self.config;
        self.untracked(|g, p| {
            let xv = g.constant(x)?;
            let out = self.record(g, p, xv)?;
            g.value(out.logits).reshape(&[cfg.height, cfg.width, cfg.num_classes])
        })
    }

    /// Encoder features `F1..F4`, each `(h_s·w_s)×(m_s·C)`.
    pub fn encoder_forward(&self, img: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let x = self.check_image(img)?;
        self.untracked(|g, p| {
            let xv = g.constant(x)?;
            let (feats, _) = self.record_encoder(g, p, xv)?;
            Ok(feats.iter().map(|&f| g.value(f).clone()).collect())
        })
    }

    pub fn bridge_forward(&self, feats: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        self.untracked(|g, p| {
            let vars = feats.iter().map(|f| g.constant(f.clone())).collect::<Result<Vec<_>>>()?;
            let out = self.record_bridge(g, p, &vars)?;
            Ok(out.iter().map(|&b| g.value(b).clone()).collect())
        })
    }

    pub fn decoder_forward(&self, skips: &[Tensor<T>]) -> Result<Tensor<T>> {
        let cfg = &self.config;
        if skips.len() != STAGES {
            return Err(Error::dim(format!("decoder expects {STAGES} skip maps, got {}", skips.len())));
        }
        self.untracked(|g, p| {
            let vars = skips.iter().map(|f| g.constant(f.clone())).collect::<Result<Vec<_>>>()?;
            let logits = self.record_decoder(g, p, &vars, &mut Vec::new())?;
            g.value(logits).reshape(&[cfg.height, cfg.width, cfg.num_classes])
        })
    }

    /// Branch outputs and contexts of the attention in encoder stage
    /// `stage` (0-based), layer `layer`, for an `H×W×Cin` image.
    pub fn attention_probe(&self, img: &Tensor<T>, stage: usize, layer: usize) -> Result<AttentionProbe<T>> {
        let x = self.check_image(img)?;
        let cfg = &self.config;
        let block = self
            .encoder
            .get(stage)
            .and_then(|s| s.layers.get(layer))
            .ok_or_else(|| Error::param(format!("no encoder layer {layer} in stage {stage}")))?;
        self.untracked(|g, p| {
            let xv = g.constant(x)?;
            let (_, taps) = self.record_encoder(g, p, xv)?;
            // taps: embedding, then encoder layers in order
            let before = 1 + cfg.encoder_depths[..stage].iter().sum::<usize>() + layer;
            let input = taps[before - 1].var;
            let input = if layer == 0 && stage > 0 {
                let (h, w) = cfg.stage_grid(stage - 1);
                let merge = self.encoder[stage].merge.as_ref().expect("later stages merge");
                merge.forward(g, p, input, h, w)?
            } else {
                input
            };
            let n1 = block.ln1.forward(g, p, input)?;
            block.attention.probe(g, p, n1, block.h, block.w, &cfg.pyramids[stage])
        })
    }

    /// Embedding output and every transformer layer output as `h×w×c` maps.
    pub fn probe(&self, img: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let x = self.check_image(img)?;
        self.untracked(|g, p| {
            let xv = g.constant(x)?;
            let out = self.record(g, p, xv)?;
            out.taps
                .iter()
                .map(|t| {
                    let v = g.value(t.var);
                    v.reshape(&[t.h, t.w, v.last_dim()])
                })
                .collect()
        })
    }
}
