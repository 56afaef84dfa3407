//! The two feature branches and the heatmap head.
//!
//! The local branch is a U-Net whose decoder stops at the feature
//! resolution. The global branch embeds non-overlapping patches, runs a
//! pre-norm transformer over them without a class token, and upsamples the
//! token grid with a transposed convolution. Both emit `c x h_f x w_f`.

use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bindings, ChannelNorm, Conv, ConvT, Init, LayerNorm, Linear, ParamId, ParamStore};
use crate::tensor::Element;

/// Sizes of both branches. Images are square and single-channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub input_size: usize,
    pub feature_size: usize,
    pub channels: usize,
    pub unet_depth: usize,
    pub unet_width: usize,
    pub patch_size: usize,
    pub token_dim: usize,
    pub transformer_layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_size: 128,
            feature_size: 32,
            channels: 32,
            unet_depth: 3,
            unet_width: 8,
            patch_size: 8,
            token_dim: 64,
            transformer_layers: 2,
            heads: 4,
            mlp_ratio: 2,
        }
    }
}

impl BackboneConfig {
    /// Input-to-feature downscale factor.
    pub fn upscale(&self) -> usize {
        self.input_size / self.feature_size
    }

    /// Token grid side length.
    pub fn grid(&self) -> usize {
        self.input_size / self.patch_size
    }

    /// Number of U-Net levels between input and feature resolution.
    fn feature_level(&self) -> usize {
        self.upscale().trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_size", self.input_size),
            ("feature_size", self.feature_size),
            ("channels", self.channels),
            ("unet_width", self.unet_width),
            ("patch_size", self.patch_size),
            ("token_dim", self.token_dim),
            ("transformer_layers", self.transformer_layers),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        let fail = |msg: String| Err(Error::Config(msg));
        if !self.input_size.is_multiple_of(self.patch_size) {
            return fail(format!("input size {} not divisible by patch size {}", self.input_size, self.patch_size));
        }
        if !self.input_size.is_multiple_of(1 << self.unet_depth) {
            return fail(format!("input size {} not divisible by 2^{}", self.input_size, self.unet_depth));
        }
        if !self.input_size.is_multiple_of(self.feature_size) || !self.upscale().is_power_of_two() {
            return fail(format!(
                "feature size {} must divide input size {} by a power of two",
                self.feature_size, self.input_size
            ));
        }
        if self.feature_level() > self.unet_depth {
            return fail(format!("feature size {} is below the U-Net bottleneck", self.feature_size));
        }
        if !self.feature_size.is_multiple_of(self.grid()) {
            return fail(format!(
                "token grid {} must divide feature size {}",
                self.grid(),
                self.feature_size
            ));
        }
        if !self.token_dim.is_multiple_of(self.heads) {
            return fail(format!("token dim {} not divisible by {} heads", self.token_dim, self.heads));
        }
        Ok(())
    }

    fn check_image<T: Element>(&self, tape: &Tape<T>, image: Var) -> Result<()> {
        let n = self.input_size;
        if tape.shape(image) != [1, n, n] {
            return Err(Error::dim(format!(
                "expected a 1 x {n} x {n} image, got {:?}",
                tape.shape(image)
            )));
        }
        Ok(())
    }
}

/// Two `conv3x3 -> channel norm -> relu` stages. The convolutions carry no
/// bias since the norm's shift subsumes it.
#[derive(Debug, Clone, Copy)]
struct DoubleConv {
    stages: [(Conv, ChannelNorm); 2],
}

impl DoubleConv {
    fn new<T: Element>(store: &mut ParamStore<T>, init: &mut Init, name: &str, c_in: usize, c_out: usize) -> Self {
        let mut stage = |i: usize, c: usize| {
            let conv = Conv::new(store, init, &format!("{name}.conv{i}"), c, c_out, 3, 1, 1, false);
            (conv, ChannelNorm::new(store, &format!("{name}.norm{i}"), c_out))
        };
        Self { stages: [stage(0, c_in), stage(1, c_out)] }
    }

    fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bindings, mut x: Var) -> Result<Var> {
        for (conv, norm) in &self.stages {
            let y = conv.forward(tape, p, x)?;
            let y = norm.forward(tape, p, y)?;
            x = tape.relu(y);
        }
        Ok(x)
    }
}

/// Local branch: encoder-decoder with skip connections.
#[derive(Debug, Clone)]
pub struct UNet {
    encoder: Vec<DoubleConv>,
    bottleneck: DoubleConv,
    decoder: Vec<(ConvT, DoubleConv)>,
    out: Conv,
    config: BackboneConfig,
}

impl UNet {
    pub fn new<T: Element>(store: &mut ParamStore<T>, init: &mut Init, config: &BackboneConfig) -> Self {
        let width = |l: usize| config.unet_width << l;
        let depth = config.unet_depth;
        let encoder = (0..depth)
            .map(|l| {
                let c_in = if l == 0 { 1 } else { width(l - 1) };
                DoubleConv::new(store, init, &format!("unet.enc{l}"), c_in, width(l))
            })
            .collect();
        let c_in = if depth == 0 { 1 } else { width(depth - 1) };
        let bottleneck = DoubleConv::new(store, init, "unet.mid", c_in, width(depth));
        let decoder = (config.feature_level()..depth)
            .rev()
            .map(|l| {
                let up = ConvT::new(store, init, &format!("unet.up{l}"), width(l + 1), width(l), 2);
                let conv = DoubleConv::new(store, init, &format!("unet.dec{l}"), 2 * width(l), width(l));
                (up, conv)
            })
            .collect();
        let c_last = width(config.feature_level());
        let out = Conv::new(store, init, "unet.out", c_last, config.channels, 1, 1, 0, true);
        Self { encoder, bottleneck, decoder, out, config: config.clone() }
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bindings, image: Var) -> Result<Var> {
        self.config.check_image(tape, image)?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut x = image;
        for block in &self.encoder {
            let y = block.forward(tape, p, x)?;
            skips.push(y);
            x = tape.max_pool2(y)?;
        }
        x = self.bottleneck.forward(tape, p, x)?;
        for (up, conv) in &self.decoder {
            let y = up.forward(tape, p, x)?;
            let skip = skips.pop().expect("one skip per decoder level");
            let joined = tape.concat(&[y, skip], 0)?;
            x = conv.forward(tape, p, joined)?;
        }
        self.out.forward(tape, p, x)
    }
}

#[derive(Debug, Clone, Copy)]
struct Block {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// Token outputs of the transformer before upsampling.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// `tokens x token_dim`.
    pub tokens: Var,
    /// Per layer and head, `tokens x tokens` row-stochastic attention.
    pub attention: Vec<Var>,
}

/// Global branch: patch tokens, self-attention, transposed-conv upsampling.
#[derive(Debug, Clone)]
pub struct PatchTransformer {
    embed: Linear,
    pub pos: ParamId,
    blocks: Vec<Block>,
    norm: LayerNorm,
    up: ConvT,
    patch_index: Arc<[usize]>,
    config: BackboneConfig,
}

impl PatchTransformer {
    pub fn new<T: Element>(store: &mut ParamStore<T>, init: &mut Init, config: &BackboneConfig) -> Self {
        let (p, d, g) = (config.patch_size, config.token_dim, config.grid());
        let embed = Linear::new(store, init, "vit.embed", p * p, d);
        let pos = store.add("vit.pos", init.uniform(&[g * g, d], 0.02));
        let hidden = d * config.mlp_ratio;
        let blocks = (0..config.transformer_layers)
            .map(|l| {
                let name = |s: &str| format!("vit.block{l}.{s}");
                Block {
                    norm1: LayerNorm::new(store, &name("norm1"), d),
                    qkv: Linear::new(store, init, &name("qkv"), d, 3 * d),
                    proj: Linear::new(store, init, &name("proj"), d, d),
                    norm2: LayerNorm::new(store, &name("norm2"), d),
                    fc1: Linear::new(store, init, &name("fc1"), d, hidden),
                    fc2: Linear::new(store, init, &name("fc2"), hidden, d),
                }
            })
            .collect();
        let norm = LayerNorm::new(store, "vit.norm", d);
        let up = ConvT::new(store, init, "vit.up", d, config.channels, config.feature_size / g);
        Self { embed, pos, blocks, norm, up, patch_index: patch_index(config.input_size, p), config: config.clone() }
    }

    /// Runs the token stack; returns tokens and attention maps.
    pub fn encode<T: Element>(&self, tape: &mut Tape<T>, p: &Bindings, image: Var) -> Result<Encoded> {
        self.config.check_image(tape, image)?;
        let (ps, d) = (self.config.patch_size, self.config.token_dim);
        let n = self.config.grid() * self.config.grid();
        let patches = tape.gather(image, self.patch_index.clone(), &[n, ps * ps])?;
        let x = self.embed.forward(tape, p, patches)?;
        let mut x = tape.add(x, p.var(self.pos))?;
        let heads = self.config.heads;
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut attention = Vec::with_capacity(self.blocks.len() * heads);
        for b in &self.blocks {
            let h = b.norm1.forward(tape, p, x)?;
            let qkv = b.qkv.forward(tape, p, h)?;
            let mut outs = Vec::with_capacity(heads);
            for head in 0..heads {
                let q = tape.slice(qkv, 1, head * dh, dh)?;
                let k = tape.slice(qkv, 1, d + head * dh, dh)?;
                let v = tape.slice(qkv, 1, 2 * d + head * dh, dh)?;
                let scores = tape.matmul_nt(q, k)?;
                let scores = tape.scale(scores, scale);
                let att = tape.softmax(scores, 1)?;
                attention.push(att);
                outs.push(tape.matmul(att, v)?);
            }
            let merged = tape.concat(&outs, 1)?;
            let a = b.proj.forward(tape, p, merged)?;
            x = tape.add(x, a)?;
            let h = b.norm2.forward(tape, p, x)?;
            let h = b.fc1.forward(tape, p, h)?;
            let h = tape.gelu(h);
            let h = b.fc2.forward(tape, p, h)?;
            x = tape.add(x, h)?;
        }
        let tokens = self.norm.forward(tape, p, x)?;
        Ok(Encoded { tokens, attention })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bindings, image: Var) -> Result<Var> {
        let enc = self.encode(tape, p, image)?;
        let g = self.config.grid();
        let t = tape.transpose(enc.tokens)?;
        let grid = tape.reshape(t, &[self.config.token_dim, g, g])?;
        self.up.forward(tape, p, grid)
    }
}

/// Gather indices turning a `1 x n x n` image into row-major `p x p` patches.
fn patch_index(n: usize, p: usize) -> Arc<[usize]> {
    let g = n / p;
    let mut idx = Vec::with_capacity(n * n);
    for pi in 0..g {
        for pj in 0..g {
            for ki in 0..p {
                idx.extend((0..p).map(|kj| (pi * p + ki) * n + pj * p + kj));
            }
        }
    }
    idx.into()
}

/// 1x1 convolution to per-landmark logits.
#[derive(Debug, Clone, Copy)]
pub struct HeatmapHead {
    pub conv: Conv,
}

impl HeatmapHead {
    pub fn new<T: Element>(store: &mut ParamStore<T>, init: &mut Init, channels: usize, landmarks: usize) -> Self {
        Self { conv: Conv::new(store, init, "head", channels, landmarks, 1, 1, 0, true) }
    }

    /// Returns `(logits, sigmoid heatmaps)`.
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bindings, fused: Var) -> Result<(Var, Var)> {
        let logits = self.conv.forward(tape, p, fused)?;
        Ok((logits, tape.sigmoid(logits)))
    }
}
