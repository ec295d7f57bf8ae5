//! Bias-free B-cos building blocks and the six-channel image encoding.
//!
//! A B-cos unit computes `|cos(x, w)|^(B-1) · ŵᵀx`. Every layer here records
//! that dynamic coefficient as a separate tape node; in explanation mode the
//! coefficient is frozen, which turns the layer into the linear map `W(x)·x`.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::{ConvGeometry, Tensor};

/// Default B-cos exponent.
pub const DEFAULT_EXPONENT: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a parameter enters the network. There is deliberately no additive role.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    /// B-cos weight (normalized per output unit before use).
    BcosWeight,
    /// Plain bias-free projection, used for attention queries and keys.
    Projection,
    /// Per-channel multiplicative gain of a normalization layer.
    Gain,
    /// Token embedding table.
    Embedding,
    /// Learned positional embedding, added to token rows before masking.
    Positional,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub role: ParamRole,
    pub value: Tensor,
}

/// All learned tensors of a model, in declaration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, role: ParamRole, value: Tensor) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            role,
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn element_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Place every parameter on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<NodeId> {
        self.entries
            .iter()
            .map(|e| {
                if trainable {
                    tape.param(e.value.clone())
                } else {
                    tape.constant(e.value.clone())
                }
            })
            .collect()
    }
}

/// Gaussian weights scaled by `1/sqrt(fan_in)`.
pub fn init_weight(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let s = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| {
        let z: f64 = rng.sample(StandardNormal);
        z * s
    })
}

/// Node ids of one B-cos evaluation, kept for alignment auditing.
#[derive(Debug, Clone)]
pub struct BcosProbe {
    pub layer: String,
    /// `ŵᵀx` for every unit.
    pub lin: NodeId,
    /// Input norm, size 1 along `axis`.
    pub norm: NodeId,
    /// Final unit outputs.
    pub out: NodeId,
    pub axis: usize,
}

/// Forward-pass context: the tape, bound parameters and the freezing switch.
pub struct Ctx<'t> {
    pub tape: &'t mut Tape,
    params: Vec<NodeId>,
    freeze: bool,
    probes: Option<Vec<BcosProbe>>,
}

impl<'t> Ctx<'t> {
    /// Bind `store` onto `tape`. With `freeze` set, every dynamic coefficient is
    /// frozen at its forward value.
    pub fn new(tape: &'t mut Tape, store: &ParamStore, trainable: bool, freeze: bool) -> Self {
        let params = store.bind(tape, trainable);
        Ctx {
            tape,
            params,
            freeze,
            probes: None,
        }
    }

    pub fn with_probes(mut self) -> Self {
        self.probes = Some(Vec::new());
        self
    }

    pub fn param(&self, id: ParamId) -> NodeId {
        self.params[id.0]
    }

    pub fn params(&self) -> &[NodeId] {
        &self.params
    }

    pub fn freezing(&self) -> bool {
        self.freeze
    }

    /// Freeze `id` when running in explanation mode; pass it through otherwise.
    pub fn coefficient(&mut self, id: NodeId) -> NodeId {
        if self.freeze {
            self.tape.freeze(id)
        } else {
            id
        }
    }

    fn probe(&mut self, layer: &str, lin: NodeId, norm: NodeId, out: NodeId, axis: usize) {
        if let Some(p) = self.probes.as_mut() {
            p.push(BcosProbe {
                layer: layer.to_string(),
                lin,
                norm,
                out,
                axis,
            });
        }
    }

    pub fn take_probes(&mut self) -> Vec<BcosProbe> {
        self.probes.take().unwrap_or_default()
    }
}

/// `|cos(x, w)|^(B-1) · ŵᵀx`, with output 0 at `x = 0`.
pub fn bcos_transform(x: &[f64], w: &[f64], exponent: f64) -> Result<f64> {
    if x.len() != w.len() {
        return Err(Error::shape("bcos_transform", format!("{} vs {}", x.len(), w.len())));
    }
    if exponent < 1.0 {
        return Err(Error::Config(format!("B-cos exponent {exponent} < 1")));
    }
    let wn = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    if wn == 0.0 {
        return Err(Error::Config("zero weight vector".into()));
    }
    let xn = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if xn == 0.0 {
        return Ok(0.0);
    }
    let lin: f64 = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / wn;
    let cos = lin / xn;
    Ok(cos.abs().powf(exponent - 1.0) * lin)
}

#[derive(Debug, Clone)]
pub struct BcosLinear {
    pub name: String,
    pub weight: ParamId,
    pub exponent: f64,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl BcosLinear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        exponent: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if exponent < 1.0 {
            return Err(Error::Config(format!("B-cos exponent {exponent} < 1")));
        }
        let weight = store.add(
            format!("{name}.weight"),
            ParamRole::BcosWeight,
            init_weight(&[out_dim, in_dim], rng),
        );
        Ok(BcosLinear {
            name: name.to_string(),
            weight,
            exponent,
            in_dim,
            out_dim,
        })
    }

    /// Apply to the last axis of `x`.
    pub fn forward(&self, ctx: &mut Ctx, x: NodeId) -> Result<NodeId> {
        let shape = ctx.tape.shape(x).to_vec();
        if shape.last() != Some(&self.in_dim) {
            return Err(Error::shape(
                "bcos_linear",
                format!("{}: input {shape:?}, expected last dim {}", self.name, self.in_dim),
            ));
        }
        let w = ctx.param(self.weight);
        let wn = ctx.tape.normalize_rows(w)?;
        let wt = ctx.tape.transpose(wn)?;
        let lin = ctx.tape.matmul(x, wt)?;
        let norm = ctx.tape.row_norm(x)?;
        let axis = shape.len() - 1;
        let coef = ctx.tape.cos_power(lin, norm, self.exponent, axis)?;
        let coef = ctx.coefficient(coef);
        let out = ctx.tape.mul(coef, lin)?;
        ctx.probe(&self.name, lin, norm, out, axis);
        Ok(out)
    }

    /// The dynamic matrix `W(x)` with `forward(x) = W(x)·x` for a single vector `x`.
    pub fn dynamic_matrix(&self, store: &ParamStore, x: &[f64]) -> Result<Tensor> {
        let w = store.get(self.weight);
        if x.len() != self.in_dim {
            return Err(Error::shape("bcos_linear", format!("input {} vs {}", x.len(), self.in_dim)));
        }
        let xn = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut out = Tensor::zeros(&[self.out_dim, self.in_dim]);
        for j in 0..self.out_dim {
            let row = &w.data()[j * self.in_dim..(j + 1) * self.in_dim];
            let rn = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if rn == 0.0 {
                return Err(Error::Config(format!("{}: weight row {j} is zero", self.name)));
            }
            let coef = if xn == 0.0 {
                0.0
            } else {
                let cos = row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() / (rn * xn);
                cos.abs().powf(self.exponent - 1.0)
            };
            for (o, wv) in out.data_mut()[j * self.in_dim..(j + 1) * self.in_dim]
                .iter_mut()
                .zip(row)
            {
                *o = coef * wv / rn;
            }
        }
        Ok(out)
    }
}

/// Bias-free linear map `x·Wᵀ`, used where the result only feeds a frozen coefficient.
#[derive(Debug, Clone)]
pub struct PlainLinear {
    pub name: String,
    pub weight: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl PlainLinear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            ParamRole::Projection,
            init_weight(&[out_dim, in_dim], rng),
        );
        PlainLinear {
            name: name.to_string(),
            weight,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: NodeId) -> Result<NodeId> {
        let w = ctx.param(self.weight);
        let wt = ctx.tape.transpose(w)?;
        ctx.tape.matmul(x, wt)
    }
}

#[derive(Debug, Clone)]
pub struct BcosConv2d {
    pub name: String,
    pub weight: ParamId,
    pub exponent: f64,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub geometry: ConvGeometry,
}

impl BcosConv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        exponent: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if exponent < 1.0 {
            return Err(Error::Config(format!("B-cos exponent {exponent} < 1")));
        }
        let weight = store.add(
            format!("{name}.weight"),
            ParamRole::BcosWeight,
            init_weight(&[out_channels, in_channels, kernel, kernel], rng),
        );
        Ok(BcosConv2d {
            name: name.to_string(),
            weight,
            exponent,
            in_channels,
            out_channels,
            kernel,
            geometry: ConvGeometry::new(stride, padding),
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: NodeId) -> Result<NodeId> {
        let w = ctx.param(self.weight);
        let wn = ctx.tape.normalize_rows(w)?;
        let lin = ctx.tape.conv2d(x, wn, self.geometry)?;
        let norm = ctx
            .tape
            .patch_norm(x, self.kernel, self.kernel, self.geometry)?;
        let coef = ctx.tape.cos_power(lin, norm, self.exponent, 1)?;
        let coef = ctx.coefficient(coef);
        let out = ctx.tape.mul(coef, lin)?;
        ctx.probe(&self.name, lin, norm, out, 1);
        Ok(out)
    }
}

/// Per-sample RMS normalization with a multiplicative per-channel gain and no shift.
/// The RMS factor is a dynamic coefficient.
#[derive(Debug, Clone)]
pub struct RmsNorm {
    pub gain: ParamId,
    pub channels: usize,
    pub eps: f64,
}

impl RmsNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), ParamRole::Gain, Tensor::ones(&[channels]));
        RmsNorm {
            gain,
            channels,
            eps: 1e-6,
        }
    }

    /// `x` is `[N, C, H, W]`.
    pub fn forward(&self, ctx: &mut Ctx, x: NodeId) -> Result<NodeId> {
        let shape = ctx.tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::shape("rms_norm", format!("input {shape:?}, channels {}", self.channels)));
        }
        let s = ctx.tape.rms_scale(x, self.eps)?;
        let s = ctx.coefficient(s);
        let se = ctx.tape.expand(s, &shape)?;
        let y = ctx.tape.mul(x, se)?;
        let g = ctx.param(self.gain);
        let g = ctx.tape.reshape(g, &[1, self.channels, 1, 1])?;
        let ge = ctx.tape.expand(g, &shape)?;
        ctx.tape.mul(y, ge)
    }
}

#[derive(Debug, Clone)]
pub struct AttentionConfig {
    pub query_dim: usize,
    pub context_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub exponent: f64,
    /// Use a B-cos output projection instead of a plain bias-free one.
    pub bcos_output: bool,
    /// Add one empty slot with logit 0 and a zero value, so a query can attend to nothing.
    pub sink: bool,
}

/// Cross-attention whose value path (and by default output path) is B-cos.
///
/// `A(X, Y)` is a dynamic coefficient: in explanation mode it is frozen, so
/// the block becomes a linear map of the conditioning `Y`.
#[derive(Debug, Clone)]
pub struct BcosCrossAttention {
    pub name: String,
    pub config: AttentionConfig,
    pub query: PlainLinear,
    pub key: PlainLinear,
    pub value: BcosLinear,
    pub output: OutputProjection,
}

#[derive(Debug, Clone)]
pub enum OutputProjection {
    Bcos(BcosLinear),
    Plain(PlainLinear),
}

impl BcosCrossAttention {
    pub fn new(store: &mut ParamStore, name: &str, config: AttentionConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.heads == 0 || config.head_dim == 0 {
            return Err(Error::Config("attention needs at least one head of positive width".into()));
        }
        let inner = config.heads * config.head_dim;
        let query = PlainLinear::new(store, &format!("{name}.query"), config.query_dim, inner, rng);
        let key = PlainLinear::new(store, &format!("{name}.key"), config.context_dim, inner, rng);
        let value = BcosLinear::new(
            store,
            &format!("{name}.value"),
            config.context_dim,
            inner,
            config.exponent,
            rng,
        )?;
        let output = if config.bcos_output {
            OutputProjection::Bcos(BcosLinear::new(
                store,
                &format!("{name}.output"),
                inner,
                config.query_dim,
                config.exponent,
                rng,
            )?)
        } else {
            OutputProjection::Plain(PlainLinear::new(
                store,
                &format!("{name}.output"),
                inner,
                config.query_dim,
                rng,
            ))
        };
        Ok(BcosCrossAttention {
            name: name.to_string(),
            config,
            query,
            key,
            value,
            output,
        })
    }

    /// `x` is `[N, n, d]`, `y` is `[N, m, d_c]`, `keep` holds `N·m` flags.
    pub fn forward(&self, ctx: &mut Ctx, x: NodeId, y: NodeId, keep: &Arc<[bool]>) -> Result<NodeId> {
        let (a, v) = self.scores_and_values(ctx, x, y, keep)?;
        let xs = ctx.tape.shape(x).to_vec();
        let (n_batch, n) = (xs[0], xs[1]);
        let (h, dh) = (self.config.heads, self.config.head_dim);
        let o = ctx.tape.matmul(a, v)?;
        let o = ctx.tape.permute(o, &[0, 2, 1, 3])?;
        let o = ctx.tape.reshape(o, &[n_batch, n, h * dh])?;
        match &self.output {
            OutputProjection::Bcos(l) => l.forward(ctx, o),
            OutputProjection::Plain(l) => l.forward(ctx, o),
        }
    }

    /// The (possibly frozen) attention matrix `[N, h, n, m]` and per-head values `[N, h, m, dh]`.
    fn scores_and_values(&self, ctx: &mut Ctx, x: NodeId, y: NodeId, keep: &Arc<[bool]>) -> Result<(NodeId, NodeId)> {
        let xs = ctx.tape.shape(x).to_vec();
        let ys = ctx.tape.shape(y).to_vec();
        if xs.len() != 3 || ys.len() != 3 || xs[0] != ys[0] {
            return Err(Error::shape("cross_attention", format!("x {xs:?}, y {ys:?}")));
        }
        if xs[2] != self.config.query_dim || ys[2] != self.config.context_dim {
            return Err(Error::shape(
                "cross_attention",
                format!("x {xs:?}, y {ys:?} for {:?}", self.config),
            ));
        }
        let (n_batch, n, m) = (xs[0], xs[1], ys[1]);
        if keep.len() != n_batch * m {
            return Err(Error::shape("cross_attention", format!("{} mask flags for {n_batch}x{m}", keep.len())));
        }
        for b in 0..n_batch {
            if !keep[b * m..(b + 1) * m].iter().any(|&k| k) {
                return Err(Error::Degenerate(
                    "conditioning is fully masked: nothing to attend to or explain".into(),
                ));
            }
        }
        let (h, dh) = (self.config.heads, self.config.head_dim);
        let q = self.query.forward(ctx, x)?;
        let q = ctx.tape.reshape(q, &[n_batch, n, h, dh])?;
        let q = ctx.tape.permute(q, &[0, 2, 1, 3])?;
        let k = self.key.forward(ctx, y)?;
        let k = ctx.tape.reshape(k, &[n_batch, m, h, dh])?;
        let k = ctx.tape.permute(k, &[0, 2, 3, 1])?;
        let s = ctx.tape.matmul(q, k)?;
        let s = ctx.tape.scale(s, 1.0 / (dh as f64).sqrt())?;
        let v = self.value.forward(ctx, y)?;
        let v = ctx.tape.reshape(v, &[n_batch, m, h, dh])?;
        let v = ctx.tape.permute(v, &[0, 2, 1, 3])?;
        if !self.config.sink {
            let a = ctx.tape.masked_softmax(s, keep.clone(), h * n)?;
            return Ok((ctx.coefficient(a), v));
        }
        // The empty slot is a constant: it shifts the frozen weights but carries no signal.
        let zero_logit = ctx.tape.constant(Tensor::zeros(&[n_batch, h, n, 1]));
        let s = ctx.tape.concat(&[s, zero_logit], 3)?;
        let keep: Arc<[bool]> = keep
            .chunks(m)
            .flat_map(|row| row.iter().copied().chain(std::iter::once(true)))
            .collect();
        let a = ctx.tape.masked_softmax(s, keep, h * n)?;
        let zero_value = ctx.tape.constant(Tensor::zeros(&[n_batch, h, 1, dh]));
        let v = ctx.tape.concat(&[v, zero_value], 2)?;
        Ok((ctx.coefficient(a), v))
    }

    /// Attention weights `[N, h, n, m]` for inspection, `m + 1` columns with the empty slot last.
    pub fn attention_weights(&self, ctx: &mut Ctx, x: NodeId, y: NodeId, keep: &Arc<[bool]>) -> Result<Tensor> {
        let (a, _) = self.scores_and_values(ctx, x, y, keep)?;
        Ok(ctx.tape.value(a).clone())
    }
}

/// A `[6, H, W]` image in the encoding `(r, g, b, 1-r, 1-g, 1-b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedImage(Tensor);

impl EncodedImage {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

fn image_dims(t: &Tensor, channels: usize, op: &'static str) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() != 3 || s[0] != channels {
        return Err(Error::shape(op, format!("expected [{channels}, H, W], got {s:?}")));
    }
    Ok((s[1], s[2]))
}

/// Encode a clean `[3, H, W]` image with values in `[0, 1]`.
pub fn encode_image(img: &Tensor) -> Result<EncodedImage> {
    image_dims(img, 3, "encode_image")?;
    if let Some(v) = img.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Data(format!("pixel value {v} outside [0, 1]")));
    }
    Ok(EncodedImage(encode_unchecked(img)))
}

/// The same encoding without the range check, for noisy or batched tensors.
/// Works on `[.., 3, H, W]`.
pub fn encode_unchecked(img: &Tensor) -> Tensor {
    let s = img.shape();
    let r = s.len();
    let plane = s[r - 2] * s[r - 1];
    let batch = img.len() / (3 * plane);
    let mut data = Vec::with_capacity(img.len() * 2);
    for b in 0..batch {
        let src = &img.data()[b * 3 * plane..(b + 1) * 3 * plane];
        data.extend_from_slice(src);
        data.extend(src.iter().map(|v| 1.0 - v));
    }
    let mut shape = s.to_vec();
    shape[r - 3] = 6;
    Tensor::new(&shape, data).expect("encoded shape")
}

/// Halves that agree to within the round-off of computing `1 - v` count as consistent.
const ENCODING_ROUNDOFF: f64 = 4.0 * f64::EPSILON;

/// Average the two redundant halves, `(rgb + (1 - comp)) / 2`, clamped to `[0, 1]`.
///
/// When the halves agree up to the encoding's own round-off the rgb half is
/// returned unchanged, so decoding an exact encoding gives back the original.
pub fn decode_image(enc: &Tensor) -> Result<Tensor> {
    let (h, w) = image_dims(enc, 6, "decode_image")?;
    let plane = 3 * h * w;
    let data = (0..plane)
        .map(|i| {
            let rgb = enc.data()[i];
            let from_comp = 1.0 - enc.data()[plane + i];
            let v = if (rgb - from_comp).abs() <= ENCODING_ROUNDOFF {
                rgb
            } else {
                (rgb + from_comp) / 2.0
            };
            v.clamp(0.0, 1.0)
        })
        .collect();
    Tensor::new(&[3, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bcos_transform_cases() {
        assert!((bcos_transform(&[3.0, 4.0], &[3.0, 4.0], 2.0).unwrap() - 5.0).abs() < 1e-15);
        assert_eq!(bcos_transform(&[1.0, 0.0], &[0.0, 2.0], 2.5).unwrap(), 0.0);
        let v = bcos_transform(&[1.0, 1.0], &[1.0, 0.0], 2.0).unwrap();
        assert!((v - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert_eq!(bcos_transform(&[0.0, 0.0], &[1.0, 2.0], 2.0).unwrap(), 0.0);
        assert!(matches!(bcos_transform(&[1.0, 0.0], &[0.0, 0.0], 2.0), Err(Error::Config(_))));
    }

    fn linear_layer(b: f64) -> (ParamStore, BcosLinear) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let l = BcosLinear::new(&mut store, "l", 5, 4, b, &mut rng).unwrap();
        (store, l)
    }

    fn run_linear(store: &ParamStore, l: &BcosLinear, x: &[f64]) -> Tensor {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, store, false, false);
        let xi = ctx.tape.input(Tensor::new(&[1, x.len()], x.to_vec()).unwrap());
        let out = l.forward(&mut ctx, xi).unwrap();
        ctx.tape.value(out).clone()
    }

    #[test]
    fn linear_zero_input_and_b1() {
        let (store, l) = linear_layer(2.0);
        assert!(run_linear(&store, &l, &[0.0; 5]).data().iter().all(|&v| v == 0.0));

        let (store, l) = linear_layer(1.0);
        let x = [0.3, -0.2, 0.9, 0.1, -0.5];
        let out = run_linear(&store, &l, &x);
        let w = store.get(l.weight);
        for j in 0..4 {
            let row = &w.data()[j * 5..(j + 1) * 5];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let expect: f64 = row.iter().zip(&x).map(|(a, b)| a * b / n).sum();
            assert!((out.data()[j] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn linear_matches_dynamic_matrix() {
        let (store, l) = linear_layer(2.0);
        let x = [0.7, -1.2, 0.4, 2.0, -0.3];
        let out = run_linear(&store, &l, &x);
        let wx = l.dynamic_matrix(&store, &x).unwrap();
        let xt = Tensor::new(&[5, 1], x.to_vec()).unwrap();
        let expect = wx.matmul(&xt).unwrap();
        for j in 0..4 {
            assert!((out.data()[j] - expect.data()[j]).abs() < 1e-12);
            let direct = bcos_transform(&x, &store.get(l.weight).data()[j * 5..(j + 1) * 5], 2.0).unwrap();
            assert!((out.data()[j] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_gradient_is_coefficient_times_unit_weight() {
        let (store, l) = linear_layer(2.0);
        let x = [0.7, -1.2, 0.4, 2.0, -0.3];
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store, false, true);
        let xi = ctx.tape.input(Tensor::new(&[1, 5], x.to_vec()).unwrap());
        let out = l.forward(&mut ctx, xi).unwrap();
        let mut cot = Tensor::zeros(&[1, 4]);
        cot.data_mut()[2] = 1.0;
        let g = tape.vjp(out, cot).unwrap();
        let wx = l.dynamic_matrix(&store, &x).unwrap();
        let gx = g.get(xi).unwrap();
        for k in 0..5 {
            assert!((gx.data()[k] - wx.data()[2 * 5 + k]).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_weight_row_rejected() {
        let (mut store, l) = linear_layer(2.0);
        store.get_mut(l.weight).data_mut()[..5].fill(0.0);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store, false, false);
        let xi = ctx.tape.input(Tensor::ones(&[1, 5]));
        assert!(matches!(l.forward(&mut ctx, xi), Err(Error::Config(_))));
    }

    fn attention(heads: usize) -> (ParamStore, BcosCrossAttention) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let cfg = AttentionConfig {
            query_dim: 6,
            context_dim: 5,
            heads,
            head_dim: 3,
            exponent: 2.0,
            bcos_output: true,
            sink: false,
        };
        let a = BcosCrossAttention::new(&mut store, "attn", cfg, &mut rng).unwrap();
        (store, a)
    }

    fn run_attention(store: &ParamStore, a: &BcosCrossAttention, x: &Tensor, y: &Tensor, keep: &[bool]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, store, false, false);
        let xi = ctx.tape.constant(x.clone());
        let yi = ctx.tape.input(y.clone());
        let keep: Arc<[bool]> = keep.into();
        let out = a.forward(&mut ctx, xi, yi, &keep)?;
        Ok(ctx.tape.value(out).clone())
    }

    #[test]
    fn attention_rows_sum_to_one_and_ignore_masked() {
        let (store, a) = attention(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = init_weight(&[1, 4, 6], &mut rng);
        let mut y = init_weight(&[1, 3, 5], &mut rng);
        let keep: Arc<[bool]> = vec![true, false, true].into();
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store, false, false);
        let xi = ctx.tape.constant(x.clone());
        let yi = ctx.tape.constant(y.clone());
        let w = a.attention_weights(&mut ctx, xi, yi, &keep).unwrap();
        for row in w.data().chunks(3) {
            assert_eq!(row[1], 0.0);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-7);
        }
        let before = run_attention(&store, &a, &x, &y, &keep).unwrap();
        for v in &mut y.data_mut()[5..10] {
            *v += 3.7;
        }
        let after = run_attention(&store, &a, &x, &y, &keep).unwrap();
        assert!(before.bit_eq(&after));
    }

    #[test]
    fn single_token_attention_is_value_transform() {
        let (store, a) = attention(1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = init_weight(&[1, 2, 6], &mut rng);
        let y = init_weight(&[1, 1, 5], &mut rng);
        let out = run_attention(&store, &a, &x, &y, &[true]).unwrap();
        let v = a.value.dynamic_matrix(&store, y.data()).unwrap();
        let vy = v.matmul(&Tensor::new(&[5, 1], y.data().to_vec()).unwrap()).unwrap();
        let OutputProjection::Bcos(o) = &a.output else { unreachable!() };
        let wo = o.dynamic_matrix(&store, vy.data()).unwrap();
        let expect = wo.matmul(&vy).unwrap();
        for row in out.data().chunks(6) {
            for (g, e) in row.iter().zip(expect.data()) {
                assert!((g - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fully_masked_attention_rejected() {
        let (store, a) = attention(2);
        let x = Tensor::ones(&[1, 2, 6]);
        let y = Tensor::ones(&[1, 2, 5]);
        assert!(matches!(
            run_attention(&store, &a, &x, &y, &[false, false]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn encoding_round_trip() {
        let px = Tensor::new(&[3, 1, 1], vec![0.2, 0.5, 1.0]).unwrap();
        let enc = encode_image(&px).unwrap();
        assert_eq!(enc.tensor().data(), &[0.2, 0.5, 1.0, 0.8, 0.5, 0.0]);
        let black = encode_image(&Tensor::zeros(&[3, 1, 1])).unwrap();
        assert_eq!(black.tensor().data(), &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        assert!(decode_image(enc.tensor()).unwrap().bit_eq(&px));
        assert!(encode_image(&Tensor::full(&[3, 1, 1], 1.2)).is_err());
        let inconsistent = Tensor::full(&[6, 1, 1], 0.6);
        assert!(decode_image(&inconsistent)
            .unwrap()
            .data()
            .iter()
            .all(|&v| (v - 0.5).abs() < 1e-15));
    }
}
