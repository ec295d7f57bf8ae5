//! Conditional B-cos U-Net with prompt embedding and timestep conditioning.
//!
//! Every learned layer is a B-cos module, an RMS gain, an embedding table or
//! a bias-free query/key projection. The timestep enters as extra feature
//! channels concatenated inside each residual block, never as an additive
//! bias.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::Prediction;
use crate::error::{Error, Result};
use crate::nn::{
    init_weight, AttentionConfig, BcosConv2d, BcosCrossAttention, BcosLinear, Ctx, ParamRole, ParamStore, RmsNorm,
    DEFAULT_EXPONENT,
};
use crate::prompt::{Prompt, Vocab, DEFAULT_MAX_TOKENS};
use crate::rng::{generator, Stream};
use crate::tape::NodeId;
use crate::tensor::Tensor;

pub const IMAGE_CHANNELS: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    /// Width multiplier per resolution level.
    pub channel_mult: Vec<usize>,
    pub res_blocks_per_level: usize,
    /// Whether each level carries cross-attention; the middle block follows the last level.
    pub attention: Vec<bool>,
    pub heads: usize,
    pub exponent: f64,
    pub context_dim: usize,
    pub max_tokens: usize,
    pub image_size: usize,
    pub time_features: usize,
    pub time_dim: usize,
    pub prediction: Prediction,
    /// B-cos (true) or plain bias-free (false) attention output projection.
    pub bcos_attention_output: bool,
    /// Let attention rows put weight on an empty slot instead of a real token.
    #[serde(default)]
    pub attention_sink: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            in_channels: IMAGE_CHANNELS,
            out_channels: IMAGE_CHANNELS,
            base_width: 32,
            channel_mult: vec![1, 1],
            res_blocks_per_level: 1,
            attention: vec![true, true],
            heads: 2,
            exponent: DEFAULT_EXPONENT,
            context_dim: 32,
            max_tokens: DEFAULT_MAX_TOKENS,
            image_size: 16,
            time_features: 32,
            time_dim: 16,
            prediction: Prediction::X0,
            bcos_attention_output: true,
            attention_sink: false,
        }
    }
}

impl UNetConfig {
    /// Small network for fast tests.
    pub fn tiny() -> Self {
        UNetConfig {
            base_width: 8,
            context_dim: 8,
            max_tokens: 12,
            image_size: 8,
            time_features: 8,
            time_dim: 4,
            ..UNetConfig::default()
        }
    }

    /// The desk-scale default.
    pub fn desk() -> Self {
        UNetConfig::default()
    }

    /// The full-resolution layout: 64×64 with four levels.
    pub fn full() -> Self {
        UNetConfig {
            base_width: 64,
            channel_mult: vec![1, 1, 2, 2],
            attention: vec![false, true, true, true],
            heads: 4,
            context_dim: 64,
            image_size: 64,
            time_features: 64,
            time_dim: 32,
            ..UNetConfig::default()
        }
    }

    pub fn levels(&self) -> usize {
        self.channel_mult.len()
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width * self.channel_mult[level]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.in_channels != IMAGE_CHANNELS || self.out_channels != IMAGE_CHANNELS {
            return bad(format!(
                "image channels must be {IMAGE_CHANNELS} in and out, got {} and {}",
                self.in_channels, self.out_channels
            ));
        }
        if self.res_blocks_per_level != 1 {
            return bad(format!("one residual block per level is supported, got {}", self.res_blocks_per_level));
        }
        if self.channel_mult.is_empty() || self.channel_mult.contains(&0) || self.base_width == 0 {
            return bad("channel multipliers must be nonempty and positive".into());
        }
        if self.channel_mult.len() >= 2 && self.channel_mult[1] != self.channel_mult[0] {
            return bad("the first downsampling must keep the channel count".into());
        }
        if self.attention.len() != self.levels() {
            return bad(format!("{} attention flags for {} levels", self.attention.len(), self.levels()));
        }
        for l in 0..self.levels() {
            if self.heads == 0 || !self.width(l).is_multiple_of(self.heads) {
                return bad(format!("width {} at level {l} not divisible by {} heads", self.width(l), self.heads));
            }
        }
        let factor = 1usize << (self.levels() - 1);
        if self.image_size == 0 || !self.image_size.is_multiple_of(factor) {
            return bad(format!("image size {} not divisible by {factor}", self.image_size));
        }
        if self.exponent < 1.0 {
            return bad(format!("B-cos exponent {} < 1", self.exponent));
        }
        if self.time_features < 2 || !self.time_features.is_multiple_of(2) || self.time_dim == 0 {
            return bad("time features must be even and at least 2".into());
        }
        if self.max_tokens < 3 || self.context_dim == 0 {
            return bad("need at least 3 token positions and a positive context width".into());
        }
        Ok(())
    }
}

/// Sinusoidal features of `t`: `sin(t·f_i)` then `cos(t·f_i)` with geometric frequencies.
pub fn timestep_features(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

/// Learned token table plus learned positional embedding; masked rows are exact zeros.
#[derive(Debug, Clone)]
pub struct TokenEmbedder {
    pub table: crate::nn::ParamId,
    pub positional: crate::nn::ParamId,
    pub vocab_size: usize,
    pub max_tokens: usize,
    pub dim: usize,
}

impl TokenEmbedder {
    pub fn new(store: &mut ParamStore, vocab_size: usize, max_tokens: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let table = store.add(
            "embed.table",
            ParamRole::Embedding,
            init_weight(&[vocab_size, dim], rng).scale((dim as f64).sqrt()),
        );
        let positional = store.add(
            "embed.positional",
            ParamRole::Positional,
            init_weight(&[max_tokens, dim], rng).scale(0.1 * (dim as f64).sqrt()),
        );
        TokenEmbedder {
            table,
            positional,
            vocab_size,
            max_tokens,
            dim,
        }
    }

    fn check(&self, prompts: &[Prompt]) -> Result<()> {
        if prompts.is_empty() {
            return Err(Error::Config("no prompts".into()));
        }
        for p in prompts {
            if p.len() != self.max_tokens {
                return Err(Error::shape(
                    "embed_prompt",
                    format!("prompt length {} but model uses {}", p.len(), self.max_tokens),
                ));
            }
            if let Some(&bad) = p.ids().iter().find(|&&id| id >= self.vocab_size) {
                return Err(Error::Data(format!("token id {bad} outside vocabulary of {}", self.vocab_size)));
            }
        }
        Ok(())
    }

    /// Embeddings `[N, L, d_c]` recorded on the tape (used in training).
    pub fn forward(&self, ctx: &mut Ctx, prompts: &[Prompt]) -> Result<NodeId> {
        self.check(prompts)?;
        let n = prompts.len();
        let ids: Arc<[usize]> = prompts.iter().flat_map(|p| p.ids().iter().copied()).collect();
        let keep = crate::prompt::batch_keep(prompts);
        let table = ctx.param(self.table);
        let rows = ctx.tape.gather_rows(table, ids)?;
        let rows = ctx.tape.reshape(rows, &[n, self.max_tokens, self.dim])?;
        let pos = ctx.param(self.positional);
        let pos = ctx.tape.reshape(pos, &[1, self.max_tokens, self.dim])?;
        let pos = ctx.tape.expand(pos, &[n, self.max_tokens, self.dim])?;
        let e = ctx.tape.add(rows, pos)?;
        let e = ctx.tape.reshape(e, &[n * self.max_tokens, self.dim])?;
        let e = ctx.tape.zero_rows(e, keep)?;
        ctx.tape.reshape(e, &[n, self.max_tokens, self.dim])
    }

    /// The same embeddings computed directly; bit-identical to [`TokenEmbedder::forward`].
    pub fn embed(&self, store: &ParamStore, prompts: &[Prompt]) -> Result<Tensor> {
        self.check(prompts)?;
        let table = store.get(self.table).data();
        let pos = store.get(self.positional).data();
        let d = self.dim;
        let mut out = Vec::with_capacity(prompts.len() * self.max_tokens * d);
        for p in prompts {
            for (i, (&id, &keep)) in p.ids().iter().zip(p.mask()).enumerate() {
                for k in 0..d {
                    out.push(if keep { table[id * d + k] + pos[i * d + k] } else { 0.0 });
                }
            }
        }
        Tensor::new(&[prompts.len(), self.max_tokens, d], out)
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: RmsNorm,
    conv1: BcosConv2d,
    norm2: RmsNorm,
    conv2: BcosConv2d,
    skip: Option<BcosConv2d>,
}

impl ResBlock {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, tdim: usize, b: f64, rng: &mut impl Rng) -> Result<Self> {
        Ok(ResBlock {
            norm1: RmsNorm::new(store, &format!("{name}.norm1"), cin),
            conv1: BcosConv2d::new(store, &format!("{name}.conv1"), cin + tdim, cout, 3, 1, 1, b, rng)?,
            norm2: RmsNorm::new(store, &format!("{name}.norm2"), cout),
            conv2: BcosConv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, 1, b, rng)?,
            skip: if cin == cout {
                None
            } else {
                Some(BcosConv2d::new(store, &format!("{name}.skip"), cin, cout, 1, 1, 0, b, rng)?)
            },
        })
    }

    fn forward(&self, ctx: &mut Ctx, x: NodeId, temb: NodeId) -> Result<NodeId> {
        let shape = ctx.tape.shape(x).to_vec();
        let tdim = ctx.tape.shape(temb)[1];
        let t = ctx.tape.reshape(temb, &[shape[0], tdim, 1, 1])?;
        let t = ctx.tape.expand(t, &[shape[0], tdim, shape[2], shape[3]])?;
        let h = self.norm1.forward(ctx, x)?;
        let h = ctx.tape.concat(&[h, t], 1)?;
        let h = self.conv1.forward(ctx, h)?;
        let h = self.norm2.forward(ctx, h)?;
        let h = self.conv2.forward(ctx, h)?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(ctx, x)?,
            None => x,
        };
        ctx.tape.add(h, skip)
    }
}

/// Residual cross-attention over image positions.
#[derive(Debug, Clone)]
struct SpatialAttention {
    norm: RmsNorm,
    attn: BcosCrossAttention,
}

impl SpatialAttention {
    fn new(store: &mut ParamStore, name: &str, channels: usize, config: &UNetConfig, rng: &mut impl Rng) -> Result<Self> {
        let ac = AttentionConfig {
            query_dim: channels,
            context_dim: config.context_dim,
            heads: config.heads,
            head_dim: channels / config.heads,
            exponent: config.exponent,
            bcos_output: config.bcos_attention_output,
            sink: config.attention_sink,
        };
        Ok(SpatialAttention {
            norm: RmsNorm::new(store, &format!("{name}.norm"), channels),
            attn: BcosCrossAttention::new(store, &format!("{name}.attn"), ac, rng)?,
        })
    }

    fn forward(&self, ctx: &mut Ctx, x: NodeId, y: NodeId, keep: &Arc<[bool]>) -> Result<NodeId> {
        let s = ctx.tape.shape(x).to_vec();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let q = self.norm.forward(ctx, x)?;
        let q = ctx.tape.permute(q, &[0, 2, 3, 1])?;
        let q = ctx.tape.reshape(q, &[n, h * w, c])?;
        let o = self.attn.forward(ctx, q, y, keep)?;
        let o = ctx.tape.reshape(o, &[n, h, w, c])?;
        let o = ctx.tape.permute(o, &[0, 3, 1, 2])?;
        ctx.tape.add(x, o)
    }
}

#[derive(Debug, Clone)]
struct Level {
    block: ResBlock,
    attn: Option<SpatialAttention>,
}

impl Level {
    fn forward(&self, ctx: &mut Ctx, x: NodeId, temb: NodeId, y: NodeId, keep: &Arc<[bool]>) -> Result<NodeId> {
        let h = self.block.forward(ctx, x, temb)?;
        match &self.attn {
            Some(a) => a.forward(ctx, h, y, keep),
            None => Ok(h),
        }
    }
}

/// The complete denoiser: embedder, timestep projection and U-Net.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: UNetConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub embedder: TokenEmbedder,
    time_proj: BcosLinear,
    conv_in: BcosConv2d,
    down: Vec<Level>,
    downsample: Vec<BcosConv2d>,
    mid: Level,
    up: Vec<Level>,
    upsample: Vec<BcosConv2d>,
    norm_out: RmsNorm,
    conv_out: BcosConv2d,
}

impl Model {
    /// Build with weights drawn from `seed`.
    pub fn new(config: UNetConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = generator(seed, Stream::Init);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let s = &mut store;
        let b = config.exponent;
        let td = config.time_dim;
        let embedder = TokenEmbedder::new(s, vocab.len(), config.max_tokens, config.context_dim, rng);
        let time_proj = BcosLinear::new(s, "time.proj", config.time_features, td, b, rng)?;
        let conv_in = BcosConv2d::new(s, "conv_in", config.in_channels, config.width(0), 3, 1, 1, b, rng)?;
        let levels = config.levels();
        let mut down = Vec::new();
        let mut downsample = Vec::new();
        let mut ch = config.width(0);
        for l in 0..levels {
            let out = config.width(l);
            let block = ResBlock::new(s, &format!("down{l}.res"), ch, out, td, b, rng)?;
            let attn = if config.attention[l] {
                Some(SpatialAttention::new(s, &format!("down{l}.attn"), out, &config, rng)?)
            } else {
                None
            };
            down.push(Level { block, attn });
            ch = out;
            if l + 1 < levels {
                downsample.push(BcosConv2d::new(s, &format!("down{l}.downsample"), ch, ch, 3, 2, 1, b, rng)?);
            }
        }
        let mid = Level {
            block: ResBlock::new(s, "mid.res", ch, ch, td, b, rng)?,
            attn: if config.attention[levels - 1] {
                Some(SpatialAttention::new(s, "mid.attn", ch, &config, rng)?)
            } else {
                None
            },
        };
        let mut up = Vec::new();
        let mut upsample = Vec::new();
        for l in (0..levels).rev() {
            let out = config.width(l);
            let block = ResBlock::new(s, &format!("up{l}.res"), ch + out, out, td, b, rng)?;
            let attn = if config.attention[l] {
                Some(SpatialAttention::new(s, &format!("up{l}.attn"), out, &config, rng)?)
            } else {
                None
            };
            up.push(Level { block, attn });
            ch = out;
            if l > 0 {
                upsample.push(BcosConv2d::new(s, &format!("up{l}.upsample"), ch, ch, 3, 1, 1, b, rng)?);
            }
        }
        let norm_out = RmsNorm::new(s, "norm_out", ch);
        let conv_out = BcosConv2d::new(s, "conv_out", ch, config.out_channels, 3, 1, 1, b, rng)?;
        Ok(Model {
            config,
            vocab,
            store,
            embedder,
            time_proj,
            conv_in,
            down,
            downsample,
            mid,
            up,
            upsample,
            norm_out,
            conv_out,
        })
    }

    pub fn parse_prompt(&self, text: &str) -> Result<Prompt> {
        Prompt::parse(text, &self.vocab, self.config.max_tokens)
    }

    /// Timestep encoding `[N, time_dim]` for per-sample timesteps.
    pub fn time_embedding(&self, ctx: &mut Ctx, ts: &[usize]) -> Result<NodeId> {
        let f = self.config.time_features;
        let data: Vec<f64> = ts.iter().flat_map(|&t| timestep_features(t, f)).collect();
        let feats = ctx.tape.constant(Tensor::new(&[ts.len(), f], data)?);
        self.time_proj.forward(ctx, feats)
    }

    /// Predict `x̂_0` (or `ε̂`) for `x_t` `[N, 6, H, W]`, timesteps `ts` and prompt embeddings `y` `[N, L, d_c]`.
    pub fn denoise(&self, ctx: &mut Ctx, x_t: NodeId, ts: &[usize], y: NodeId, keep: &Arc<[bool]>) -> Result<NodeId> {
        let xs = ctx.tape.shape(x_t).to_vec();
        let size = self.config.image_size;
        if xs != [ts.len(), self.config.in_channels, size, size] {
            return Err(Error::shape(
                "unet_forward",
                format!("x_t {xs:?} for {} timesteps at {size}x{size}", ts.len()),
            ));
        }
        let ys = ctx.tape.shape(y).to_vec();
        if ys != [ts.len(), self.config.max_tokens, self.config.context_dim] {
            return Err(Error::shape("unet_forward", format!("prompt embedding {ys:?}")));
        }
        let temb = self.time_embedding(ctx, ts)?;
        let mut h = self.conv_in.forward(ctx, x_t)?;
        let mut skips = Vec::new();
        for (l, level) in self.down.iter().enumerate() {
            h = level.forward(ctx, h, temb, y, keep)?;
            skips.push(h);
            if let Some(ds) = self.downsample.get(l) {
                h = ds.forward(ctx, h)?;
            }
        }
        h = self.mid.forward(ctx, h, temb, y, keep)?;
        for (i, level) in self.up.iter().enumerate() {
            let skip = skips.pop().expect("one skip per level");
            h = ctx.tape.concat(&[h, skip], 1)?;
            h = level.forward(ctx, h, temb, y, keep)?;
            if let Some(us) = self.upsample.get(i) {
                h = ctx.tape.upsample_nearest2(h)?;
                h = us.forward(ctx, h)?;
            }
        }
        h = self.norm_out.forward(ctx, h)?;
        self.conv_out.forward(ctx, h)
    }

    pub fn image_shape(&self, batch: usize) -> [usize; 4] {
        let s = self.config.image_size;
        [batch, self.config.in_channels, s, s]
    }
}
