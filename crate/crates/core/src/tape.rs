//! Replayable operation tape with reverse-mode differentiation.
//!
//! Every primitive is recorded with its inputs and its forward value. The
//! same forward kernel serves recording and [`Tape::replay`], so replaying
//! with unchanged leaves reproduces every value bit for bit.
//!
//! [`Tape::freeze`] copies a value into a new node that has no inputs. Its
//! dependence on upstream values is cut for differentiation and for replay;
//! any later multiplicative use of it still carries gradient to the other
//! factor. Freezing every input-dependent coefficient of a bias-free network
//! leaves a graph that is linear in its inputs.

use std::collections::HashSet;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{ConvGeometry, MatRef, MatmulDims, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A fixed elementwise map `f(x, y)` that is affine in both arguments.
///
/// `eval` fixes the floating-point evaluation order, so a pure function and its
/// tape counterpart can share one implementation and agree bit for bit.
pub trait ElementwiseAffine: Send + Sync + fmt::Debug {
    fn eval(&self, x: f64, y: f64) -> f64;
    /// `(∂f/∂x, ∂f/∂y)`, constant by affinity.
    fn partials(&self) -> (f64, f64);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeafKind {
    /// Trainable parameter; gradients are tracked.
    Param,
    /// Differentiable input such as a prompt embedding.
    Input,
    /// Data that never receives gradient.
    Constant,
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf(LeafKind),
    Frozen { source: NodeId },
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    AddScalar(f64),
    Square,
    MatMul,
    Transpose,
    Permute(Vec<usize>),
    Reshape(Vec<usize>),
    Expand(Vec<usize>),
    SumAll,
    Conv2d(ConvGeometry),
    NormalizeRows,
    RowNorm,
    PatchNorm { kh: usize, kw: usize, geo: ConvGeometry },
    CosPower { exponent: f64, axis: usize },
    RmsScale { eps: f64 },
    MaskedSoftmax { keep: Arc<[bool]>, rows_per_group: usize },
    Concat { axis: usize },
    UpsampleNearest2,
    GatherRows { ids: Arc<[usize]> },
    ZeroRows { keep: Arc<[bool]> },
    Affine2(Arc<dyn ElementwiseAffine>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::Frozen { .. } => "frozen",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Square => "square",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Permute(_) => "permute",
            Op::Reshape(_) => "reshape",
            Op::Expand(_) => "expand",
            Op::SumAll => "sum_all",
            Op::Conv2d(_) => "conv2d",
            Op::NormalizeRows => "normalize_rows",
            Op::RowNorm => "row_norm",
            Op::PatchNorm { .. } => "patch_norm",
            Op::CosPower { .. } => "cos_power",
            Op::RmsScale { .. } => "rms_scale",
            Op::MaskedSoftmax { .. } => "masked_softmax",
            Op::Concat { .. } => "concat",
            Op::UpsampleNearest2 => "upsample_nearest2",
            Op::GatherRows { .. } => "gather_rows",
            Op::ZeroRows { .. } => "zero_rows",
            Op::Affine2(_) => "affine2",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients from one backward sweep, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn is_frozen(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Frozen { .. })
    }

    /// The kind of a leaf node, `None` for computed or frozen nodes.
    pub fn leaf_kind(&self, id: NodeId) -> Option<LeafKind> {
        match self.nodes[id.0].op {
            Op::Leaf(kind) => Some(kind),
            _ => None,
        }
    }

    /// The node a frozen copy was taken from.
    pub fn frozen_source(&self, id: NodeId) -> Option<NodeId> {
        match self.nodes[id.0].op {
            Op::Frozen { source } => Some(source),
            _ => None,
        }
    }

    /// Number of frozen nodes on the tape.
    pub fn frozen_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Frozen { .. }))
            .count()
    }

    /// Total number of stored `f64` values across all nodes.
    pub fn stored_elements(&self) -> usize {
        self.nodes.iter().map(|n| n.value.len()).sum()
    }

    pub fn leaf(&mut self, value: Tensor, kind: LeafKind) -> NodeId {
        let requires_grad = !matches!(kind, LeafKind::Constant);
        self.nodes.push(Node {
            op: Op::Leaf(kind),
            inputs: Vec::new(),
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, LeafKind::Param)
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, LeafKind::Input)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, LeafKind::Constant)
    }

    /// A copy of `id`'s value that carries no dependence on anything upstream.
    pub fn freeze(&mut self, id: NodeId) -> NodeId {
        let value = self.nodes[id.0].value.clone();
        self.nodes.push(Node {
            op: Op::Frozen { source: id },
            inputs: Vec::new(),
            value,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>) -> Result<NodeId> {
        let value = {
            let vals: Vec<&Tensor> = inputs.iter().map(|i| &self.nodes[i.0].value).collect();
            forward(&op, &vals)?
        };
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub, vec![a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul, vec![a, b])
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Div, vec![a, b])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.push(Op::Scale(c), vec![a])
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.push(Op::AddScalar(c), vec![a])
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Square, vec![a])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul, vec![a, b])
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Transpose, vec![a])
    }

    pub fn permute(&mut self, a: NodeId, perm: &[usize]) -> Result<NodeId> {
        self.push(Op::Permute(perm.to_vec()), vec![a])
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.push(Op::Reshape(shape.to_vec()), vec![a])
    }

    pub fn expand(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.push(Op::Expand(shape.to_vec()), vec![a])
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::SumAll, vec![a])
    }

    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId, geo: ConvGeometry) -> Result<NodeId> {
        self.push(Op::Conv2d(geo), vec![x, kernel])
    }

    /// Scale each row (first axis) to unit Euclidean norm.
    pub fn normalize_rows(&mut self, w: NodeId) -> Result<NodeId> {
        self.push(Op::NormalizeRows, vec![w])
    }

    /// Euclidean norm over the last axis, kept as a size-1 axis.
    pub fn row_norm(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::RowNorm, vec![x])
    }

    /// Euclidean norm of every `C×kh×kw` input patch a convolution would read: `[N,1,Ho,Wo]`.
    pub fn patch_norm(&mut self, x: NodeId, kh: usize, kw: usize, geo: ConvGeometry) -> Result<NodeId> {
        self.push(Op::PatchNorm { kh, kw, geo }, vec![x])
    }

    /// `|lin / norm|^(exponent-1)`, with `norm` broadcast along `axis`; zero where `norm == 0`.
    pub fn cos_power(&mut self, lin: NodeId, norm: NodeId, exponent: f64, axis: usize) -> Result<NodeId> {
        self.push(Op::CosPower { exponent, axis }, vec![lin, norm])
    }

    /// Per-sample `1/sqrt(mean(x²) + eps)`, shape `[N, 1, .., 1]`.
    pub fn rms_scale(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        self.push(Op::RmsScale { eps }, vec![x])
    }

    /// Softmax over the last axis restricted to kept positions; dropped positions get exactly 0.
    ///
    /// `keep` holds one mask row (of the last-axis length) per group of
    /// `rows_per_group` consecutive rows.
    pub fn masked_softmax(&mut self, scores: NodeId, keep: Arc<[bool]>, rows_per_group: usize) -> Result<NodeId> {
        self.push(Op::MaskedSoftmax { keep, rows_per_group }, vec![scores])
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        self.push(Op::Concat { axis }, parts.to_vec())
    }

    pub fn upsample_nearest2(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::UpsampleNearest2, vec![x])
    }

    pub fn gather_rows(&mut self, table: NodeId, ids: Arc<[usize]>) -> Result<NodeId> {
        self.push(Op::GatherRows { ids }, vec![table])
    }

    /// Set rows of the `[.., D]` view to `+0.0` where `keep` is false.
    pub fn zero_rows(&mut self, x: NodeId, keep: Arc<[bool]>) -> Result<NodeId> {
        self.push(Op::ZeroRows { keep }, vec![x])
    }

    pub fn affine2(&mut self, x: NodeId, y: NodeId, map: Arc<dyn ElementwiseAffine>) -> Result<NodeId> {
        self.push(Op::Affine2(map), vec![x, y])
    }

    /// Gradient of a one-element `root` with respect to every node that requires it.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let v = self.value_checked(root)?;
        if v.len() != 1 {
            return Err(Error::Tape(format!(
                "backward root must be a scalar, got shape {:?}",
                v.shape()
            )));
        }
        self.vjp(root, Tensor::ones(v.shape()))
    }

    /// Vector-Jacobian product: propagate `cotangent` from `output` back through the tape.
    pub fn vjp(&self, output: NodeId, cotangent: Tensor) -> Result<Gradients> {
        let v = self.value_checked(output)?;
        if v.shape() != cotangent.shape() {
            return Err(Error::shape(
                "vjp",
                format!("cotangent {:?} for output {:?}", cotangent.shape(), v.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(cotangent);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if node.inputs.is_empty() || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|i| self.nodes[i.0].requires_grad)
                .collect();
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|i| &self.nodes[i.0].value).collect();
            let input_grads = backward_op(&node.op, &inputs, &node.value, &g, &needs)?;
            for ((inp, need), ig) in node.inputs.iter().zip(&needs).zip(input_grads) {
                if !need {
                    continue;
                }
                let Some(ig) = ig else { continue };
                match &mut grads[inp.0] {
                    Some(acc) => acc.accumulate(&ig)?,
                    slot @ None => *slot = Some(ig),
                }
            }
            // Keep gradients of leaves only; intermediates were consumed above.
        }
        Ok(Gradients { grads })
    }

    fn value_checked(&self, id: NodeId) -> Result<&Tensor> {
        self.nodes
            .get(id.0)
            .map(|n| &n.value)
            .ok_or_else(|| Error::Tape(format!("node {} is not on this tape", id.0)))
    }

    /// Re-evaluate the tape with some leaves replaced and return the values of `outputs`.
    ///
    /// Frozen nodes keep their recorded values. Nodes that do not depend on an
    /// overridden leaf are read from the record, which is what the kernels
    /// would recompute anyway.
    pub fn replay(&self, overrides: &[(NodeId, &Tensor)], outputs: &[NodeId]) -> Result<Vec<Tensor>> {
        let last = match outputs.iter().max() {
            Some(id) => id.0,
            None => return Ok(Vec::new()),
        };
        if last >= self.nodes.len() {
            return Err(Error::Tape(format!("node {last} is not on this tape")));
        }
        let mut fresh: Vec<Option<Tensor>> = vec![None; last + 1];
        for (id, value) in overrides {
            let node = self
                .nodes
                .get(id.0)
                .ok_or_else(|| Error::Tape(format!("node {} is not on this tape", id.0)))?;
            if !matches!(node.op, Op::Leaf(_)) {
                return Err(Error::Tape(format!("node {} is not a leaf", id.0)));
            }
            if node.value.shape() != value.shape() {
                return Err(Error::shape(
                    "replay",
                    format!("override {:?} for leaf {:?}", value.shape(), node.value.shape()),
                ));
            }
            if id.0 <= last {
                fresh[id.0] = Some((*value).clone());
            }
        }
        let overridden: HashSet<usize> = overrides.iter().map(|(id, _)| id.0).collect();
        for idx in 0..=last {
            let node = &self.nodes[idx];
            if node.inputs.is_empty() || overridden.contains(&idx) {
                continue;
            }
            if node.inputs.iter().all(|i| fresh[i.0].is_none()) {
                continue;
            }
            let vals: Vec<&Tensor> = node
                .inputs
                .iter()
                .map(|i| fresh[i.0].as_ref().unwrap_or(&self.nodes[i.0].value))
                .collect();
            fresh[idx] = Some(forward(&node.op, &vals)?);
        }
        Ok(outputs
            .iter()
            .map(|id| fresh[id.0].clone().unwrap_or_else(|| self.nodes[id.0].value.clone()))
            .collect())
    }
}

fn shape_err(op: &Op, detail: String) -> Error {
    Error::shape(op.name(), detail)
}

fn forward(op: &Op, x: &[&Tensor]) -> Result<Tensor> {
    Ok(match op {
        Op::Leaf(_) | Op::Frozen { .. } => unreachable!("leaves are never recomputed"),
        Op::Add => x[0].add(x[1])?,
        Op::Sub => x[0].sub(x[1])?,
        Op::Mul => x[0].mul(x[1])?,
        Op::Div => x[0].div(x[1])?,
        Op::Scale(c) => x[0].scale(*c),
        Op::AddScalar(c) => x[0].add_scalar(*c),
        Op::Square => x[0].map(|v| v * v),
        Op::MatMul => x[0].matmul(x[1])?,
        Op::Transpose => x[0].transpose()?,
        Op::Permute(p) => x[0].permute(p)?,
        Op::Reshape(s) => x[0].reshape(s)?,
        Op::Expand(s) => x[0].expand(s)?,
        Op::SumAll => Tensor::scalar(x[0].sum()),
        Op::Conv2d(geo) => x[0].conv2d(x[1], *geo)?,
        Op::NormalizeRows => {
            let w = x[0];
            let rows = w.shape()[0];
            let d = w.len() / rows;
            let mut out = w.clone();
            for r in 0..rows {
                let row = &mut out.data_mut()[r * d..(r + 1) * d];
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n == 0.0 {
                    return Err(Error::Config(format!("weight row {r} is identically zero")));
                }
                row.iter_mut().for_each(|v| *v /= n);
            }
            out
        }
        Op::RowNorm => {
            let t = x[0];
            let d = *t.shape().last().unwrap();
            let mut shape = t.shape().to_vec();
            *shape.last_mut().unwrap() = 1;
            let data = t
                .data()
                .chunks(d)
                .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect();
            Tensor::new(&shape, data)?
        }
        Op::PatchNorm { kh, kw, geo } => {
            let t = x[0];
            if t.rank() != 4 {
                return Err(shape_err(op, format!("input {:?}", t.shape())));
            }
            let b = BoxWindow::new(op, t.shape(), *kh, *kw, *geo)?;
            let sq = b.channel_sum_sq(t.data());
            Tensor::new(&[b.n, 1, b.ho, b.wo], b.sum(&sq).into_iter().map(f64::sqrt).collect())?
        }
        Op::CosPower { exponent, axis } => {
            let (lin, norm) = (x[0], x[1]);
            let idx = BroadcastAxis::new(op, lin.shape(), norm.shape(), *axis)?;
            let p = exponent - 1.0;
            let power = |r: f64| if p == 1.0 { r.abs() } else { r.abs().powf(p) };
            let mut out = Tensor::zeros(lin.shape());
            idx.for_each(|i, j| {
                let n = norm.data()[j];
                out.data_mut()[i] = if n == 0.0 {
                    0.0
                } else if p == 0.0 {
                    1.0
                } else {
                    power(lin.data()[i] / n)
                };
            });
            out
        }
        Op::RmsScale { eps } => {
            let t = x[0];
            let n = t.shape()[0];
            let d = t.len() / n;
            let mut shape = vec![1; t.rank()];
            shape[0] = n;
            let data = t
                .data()
                .chunks(d)
                .map(|r| 1.0 / (r.iter().map(|v| v * v).sum::<f64>() / d as f64 + eps).sqrt())
                .collect();
            Tensor::new(&shape, data)?
        }
        Op::MaskedSoftmax { keep, rows_per_group } => {
            let t = x[0];
            let m = *t.shape().last().unwrap();
            let rows = t.len() / m;
            if keep.len() % m != 0 || (keep.len() / m) * rows_per_group != rows {
                return Err(shape_err(
                    op,
                    format!("mask of {} entries for {rows} rows of {m}", keep.len()),
                ));
            }
            let mut out = Tensor::zeros(t.shape());
            for r in 0..rows {
                let mask = &keep[(r / rows_per_group) * m..(r / rows_per_group + 1) * m];
                let src = &t.data()[r * m..(r + 1) * m];
                let max = src
                    .iter()
                    .zip(mask)
                    .filter(|(_, &k)| k)
                    .map(|(&v, _)| v)
                    .fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    return Err(Error::Degenerate(
                        "softmax row has no unmasked position".into(),
                    ));
                }
                let dst = &mut out.data_mut()[r * m..(r + 1) * m];
                let mut sum = 0.0;
                for j in 0..m {
                    if mask[j] {
                        dst[j] = (src[j] - max).exp();
                        sum += dst[j];
                    }
                }
                for j in 0..m {
                    if mask[j] {
                        dst[j] /= sum;
                    }
                }
            }
            out
        }
        Op::Concat { axis } => Tensor::concat(x, *axis)?,
        Op::UpsampleNearest2 => {
            let t = x[0];
            if t.rank() != 4 {
                return Err(shape_err(op, format!("input {:?}", t.shape())));
            }
            let [n, c, h, w] = [t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]];
            let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
            let o = out.data_mut();
            for p in 0..n * c {
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        o[(p * 2 * h + y) * 2 * w + xx] = t.data()[(p * h + y / 2) * w + xx / 2];
                    }
                }
            }
            out
        }
        Op::GatherRows { ids } => {
            let t = x[0];
            if t.rank() != 2 {
                return Err(shape_err(op, format!("table {:?}", t.shape())));
            }
            let (v, d) = (t.shape()[0], t.shape()[1]);
            let mut data = Vec::with_capacity(ids.len() * d);
            for &id in ids.iter() {
                if id >= v {
                    return Err(Error::Data(format!("token id {id} outside vocabulary of {v}")));
                }
                data.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
            }
            Tensor::new(&[ids.len(), d], data)?
        }
        Op::ZeroRows { keep } => {
            let t = x[0];
            let d = *t.shape().last().unwrap();
            if keep.len() * d != t.len() {
                return Err(shape_err(op, format!("{} flags for {:?}", keep.len(), t.shape())));
            }
            let mut out = t.clone();
            for (row, &k) in out.data_mut().chunks_mut(d).zip(keep.iter()) {
                if !k {
                    row.fill(0.0);
                }
            }
            out
        }
        Op::Affine2(map) => x[0].zip_map(x[1], "affine2", |a, b| map.eval(a, b))?,
    })
}

/// Index map from a full tensor to one that has size 1 along `axis`.
/// Sliding `kh×kw` window sums over a single-channel `[N, H, W]` map.
struct BoxWindow {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    geo: ConvGeometry,
}

impl BoxWindow {
    fn new(op: &Op, shape: &[usize], kh: usize, kw: usize, geo: ConvGeometry) -> Result<Self> {
        if shape.len() != 4 {
            return Err(shape_err(op, format!("input {shape:?}")));
        }
        let (ho, wo) = geo.output_size(shape[2], shape[3], kh, kw)?;
        Ok(BoxWindow {
            n: shape[0],
            c: shape[1],
            h: shape[2],
            w: shape[3],
            kh,
            kw,
            ho,
            wo,
            geo,
        })
    }

    /// `Σ_c x²` per sample and position.
    fn channel_sum_sq(&self, x: &[f64]) -> Vec<f64> {
        let plane = self.h * self.w;
        let mut out = vec![0.0; self.n * plane];
        for b in 0..self.n {
            let dst = &mut out[b * plane..(b + 1) * plane];
            for ch in 0..self.c {
                let src = &x[(b * self.c + ch) * plane..(b * self.c + ch + 1) * plane];
                for (d, v) in dst.iter_mut().zip(src) {
                    *d += v * v;
                }
            }
        }
        out
    }

    /// Visit `(output index, input index)` for every in-bounds window tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (sh, sw) = self.geo.stride;
        let (ph, pw) = self.geo.padding;
        for b in 0..self.n {
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let o = (b * self.ho + oy) * self.wo + ox;
                    for ki in 0..self.kh {
                        let iy = (oy * sh + ki) as isize - ph as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kj in 0..self.kw {
                            let ix = (ox * sw + kj) as isize - pw as isize;
                            if ix >= 0 && ix < self.w as isize {
                                f(o, (b * self.h + iy as usize) * self.w + ix as usize);
                            }
                        }
                    }
                }
            }
        }
    }

    fn sum(&self, src: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n * self.ho * self.wo];
        self.for_each_tap(|o, i| out[o] += src[i]);
        out
    }

    fn sum_adjoint(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n * self.h * self.w];
        self.for_each_tap(|o, i| out[i] += g[o]);
        out
    }
}

struct BroadcastAxis {
    inner: usize,
    outer_stride: usize,
    total: usize,
}

impl BroadcastAxis {
    fn new(op: &Op, full: &[usize], reduced: &[usize], axis: usize) -> Result<Self> {
        let ok = full.len() == reduced.len()
            && axis < full.len()
            && reduced[axis] == 1
            && full
                .iter()
                .zip(reduced)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(shape_err(
                op,
                format!("{reduced:?} does not broadcast to {full:?} along axis {axis}"),
            ));
        }
        let inner: usize = full[axis + 1..].iter().product();
        Ok(BroadcastAxis {
            inner,
            outer_stride: inner * full[axis],
            total: full.iter().product(),
        })
    }

    /// Visit every `(full index, reduced index)` pair in order.
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let mut i = 0;
        let mut base = 0;
        while i < self.total {
            for _ in 0..self.outer_stride / self.inner {
                for j in 0..self.inner {
                    f(i, base + j);
                    i += 1;
                }
            }
            base += self.inner;
        }
    }
}

fn backward_op(op: &Op, x: &[&Tensor], out: &Tensor, g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
    let want = |i: usize| needs.get(i).copied().unwrap_or(false);
    Ok(match op {
        Op::Leaf(_) | Op::Frozen { .. } => Vec::new(),
        Op::Add => vec![Some(g.clone()), Some(g.clone())],
        Op::Sub => vec![Some(g.clone()), Some(g.scale(-1.0))],
        Op::Mul => vec![
            want(0).then(|| g.mul(x[1])).transpose()?,
            want(1).then(|| g.mul(x[0])).transpose()?,
        ],
        Op::Div => vec![
            want(0).then(|| g.div(x[1])).transpose()?,
            want(1)
                .then(|| {
                    let mut t = g.clone();
                    for ((v, a), b) in t.data_mut().iter_mut().zip(x[0].data()).zip(x[1].data()) {
                        *v = -*v * a / (b * b);
                    }
                    t
                }),
        ],
        Op::Scale(c) => vec![Some(g.scale(*c))],
        Op::AddScalar(_) => vec![Some(g.clone())],
        Op::Square => vec![Some(g.zip_map(x[0], "square", |gv, a| 2.0 * a * gv)?)],
        Op::MatMul => {
            let (a, b) = (x[0], x[1]);
            let d = MatmulDims::resolve(a.shape(), b.shape())?;
            let mut ga = want(0).then(|| Tensor::zeros(a.shape()));
            let mut gb = want(1).then(|| Tensor::zeros(b.shape()));
            for bi in 0..d.batch {
                let gs = &g.data()[bi * d.m * d.n..(bi + 1) * d.m * d.n];
                let a_s = &a.data()[bi * d.m * d.k..(bi + 1) * d.m * d.k];
                let b_off = if d.shared_rhs { 0 } else { bi * d.k * d.n };
                let b_s = &b.data()[b_off..b_off + d.k * d.n];
                if let Some(ga) = ga.as_mut() {
                    crate::tensor::gemm(
                        d.m,
                        d.n,
                        d.k,
                        MatRef::row_major(gs, d.n),
                        MatRef::transposed(b_s, d.n),
                        &mut ga.data_mut()[bi * d.m * d.k..(bi + 1) * d.m * d.k],
                        false,
                    );
                }
                if let Some(gb) = gb.as_mut() {
                    crate::tensor::gemm(
                        d.k,
                        d.m,
                        d.n,
                        MatRef::transposed(a_s, d.k),
                        MatRef::row_major(gs, d.n),
                        &mut gb.data_mut()[b_off..b_off + d.k * d.n],
                        d.shared_rhs,
                    );
                }
            }
            vec![ga, gb]
        }
        Op::Transpose => vec![Some(g.transpose()?)],
        Op::Permute(p) => {
            let mut inv = vec![0; p.len()];
            for (i, &pi) in p.iter().enumerate() {
                inv[pi] = i;
            }
            vec![Some(g.permute(&inv)?)]
        }
        Op::Reshape(_) => vec![Some(g.reshape(x[0].shape())?)],
        Op::Expand(_) => vec![Some(g.reduce_to(x[0].shape())?)],
        Op::SumAll => vec![Some(Tensor::full(x[0].shape(), g.item()))],
        Op::Conv2d(geo) => {
            let (gx, gk) = Tensor::conv2d_backward(x[0], x[1], g, *geo, want(0), want(1))?;
            vec![gx, gk]
        }
        Op::NormalizeRows => {
            let w = x[0];
            let rows = w.shape()[0];
            let d = w.len() / rows;
            let mut gw = Tensor::zeros(w.shape());
            for r in 0..rows {
                let wr = &w.data()[r * d..(r + 1) * d];
                let ur = &out.data()[r * d..(r + 1) * d];
                let gr = &g.data()[r * d..(r + 1) * d];
                let n = wr.iter().map(|v| v * v).sum::<f64>().sqrt();
                let ug: f64 = ur.iter().zip(gr).map(|(u, g)| u * g).sum();
                for ((o, u), gv) in gw.data_mut()[r * d..(r + 1) * d].iter_mut().zip(ur).zip(gr) {
                    *o = (gv - u * ug) / n;
                }
            }
            vec![Some(gw)]
        }
        Op::RowNorm => {
            let t = x[0];
            let d = *t.shape().last().unwrap();
            let mut gx = Tensor::zeros(t.shape());
            for (r, dst) in gx.data_mut().chunks_mut(d).enumerate() {
                let n = out.data()[r];
                if n == 0.0 {
                    continue;
                }
                let s = g.data()[r] / n;
                for (o, v) in dst.iter_mut().zip(&t.data()[r * d..(r + 1) * d]) {
                    *o = s * v;
                }
            }
            vec![Some(gx)]
        }
        Op::PatchNorm { kh, kw, geo } => {
            let t = x[0];
            let q = g.zip_map(out, "patch_norm", |gv, n| if n == 0.0 { 0.0 } else { gv / n })?;
            let b = BoxWindow::new(op, t.shape(), *kh, *kw, *geo)?;
            let spread = b.sum_adjoint(q.data());
            let plane = b.h * b.w;
            let gx = Tensor::from_fn(t.shape(), |i| {
                let (n, r) = (i / (b.c * plane), i % plane);
                t.data()[i] * spread[n * plane + r]
            });
            vec![Some(gx)]
        }
        Op::CosPower { exponent, axis } => {
            let (lin, norm) = (x[0], x[1]);
            let idx = BroadcastAxis::new(op, lin.shape(), norm.shape(), *axis)?;
            let p = exponent - 1.0;
            let mut gl = want(0).then(|| Tensor::zeros(lin.shape()));
            let mut gn = want(1).then(|| Tensor::zeros(norm.shape()));
            if p != 0.0 {
                idx.for_each(|i, j| {
                    let n = norm.data()[j];
                    let r = if n == 0.0 { 0.0 } else { lin.data()[i] / n };
                    // d|r|^p/dr = p·|r|^(p-1)·sign(r); the subgradient 0 is used at r = 0
                    if r == 0.0 {
                        return;
                    }
                    let slope = if p == 1.0 { 1.0 } else { p * r.abs().powf(p - 1.0) };
                    let dr = slope * r.signum();
                    let gv = g.data()[i];
                    if let Some(gl) = gl.as_mut() {
                        gl.data_mut()[i] = gv * dr / n;
                    }
                    if let Some(gn) = gn.as_mut() {
                        gn.data_mut()[j] -= gv * dr * r / n;
                    }
                });
            }
            vec![gl, gn]
        }
        Op::RmsScale { .. } => {
            let t = x[0];
            let n = t.shape()[0];
            let d = t.len() / n;
            let mut gx = Tensor::zeros(t.shape());
            for s in 0..n {
                let sc = out.data()[s];
                // d(ms+eps)^(-1/2)/dx = -(ms+eps)^(-3/2) · x / d
                let k = -g.data()[s] * sc * sc * sc / d as f64;
                for (o, v) in gx.data_mut()[s * d..(s + 1) * d]
                    .iter_mut()
                    .zip(&t.data()[s * d..(s + 1) * d])
                {
                    *o = k * v;
                }
            }
            vec![Some(gx)]
        }
        Op::MaskedSoftmax { .. } => {
            let m = *out.shape().last().unwrap();
            let mut gx = Tensor::zeros(out.shape());
            for (r, dst) in gx.data_mut().chunks_mut(m).enumerate() {
                let y = &out.data()[r * m..(r + 1) * m];
                let gr = &g.data()[r * m..(r + 1) * m];
                let dotp: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((o, yv), gv) in dst.iter_mut().zip(y).zip(gr) {
                    *o = yv * (gv - dotp);
                }
            }
            vec![Some(gx)]
        }
        Op::Concat { axis } => {
            let sizes: Vec<usize> = x.iter().map(|t| t.shape()[*axis]).collect();
            g.split(*axis, &sizes)?.into_iter().map(Some).collect()
        }
        Op::UpsampleNearest2 => {
            let t = x[0];
            let [n, c, h, w] = [t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]];
            let mut gx = Tensor::zeros(t.shape());
            let gd = gx.data_mut();
            for p in 0..n * c {
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        gd[(p * h + y / 2) * w + xx / 2] += g.data()[(p * 2 * h + y) * 2 * w + xx];
                    }
                }
            }
            vec![Some(gx)]
        }
        Op::GatherRows { ids } => {
            let d = x[0].shape()[1];
            let mut gt = Tensor::zeros(x[0].shape());
            for (row, &id) in ids.iter().enumerate() {
                for k in 0..d {
                    gt.data_mut()[id * d + k] += g.data()[row * d + k];
                }
            }
            vec![Some(gt)]
        }
        Op::ZeroRows { keep } => {
            let d = *g.shape().last().unwrap();
            let mut gx = g.clone();
            for (row, &k) in gx.data_mut().chunks_mut(d).zip(keep.iter()) {
                if !k {
                    row.fill(0.0);
                }
            }
            vec![Some(gx)]
        }
        Op::Affine2(map) => {
            let (px, py) = map.partials();
            vec![Some(g.scale(px)), Some(g.scale(py))]
        }
    })
}
