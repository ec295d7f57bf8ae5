//! Dense row-major `f64` tensors and the numeric kernels the tape is built on.
//!
//! Shapes never contain zero-sized dimensions; a scalar is the shape `[1]`.
//! Binary elementwise operations require identical shapes. Broadcasting is
//! limited to what [`Tensor::matmul`] does with a shared right operand, and to
//! explicit [`Tensor::expand`] calls.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::shape("tensor", "rank-0 shapes are not allowed, use [1]"));
    }
    if shape.contains(&0) {
        return Err(Error::shape("tensor", format!("zero-sized dimension in {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = check_shape(shape).expect("invalid shape");
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = check_shape(shape).expect("invalid shape");
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Identity matrix of size `n`.
    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "div", |a, b| a / b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.map(|v| v + c)
    }

    /// In-place `self += other`.
    pub fn accumulate(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "accumulate",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.data.len() != other.data.len() {
            return Err(Error::shape("dot", format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0` and comparing NaN payloads.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Swap the last two axes.
    pub fn transpose(&self) -> Result<Tensor> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::shape("transpose", format!("rank {r}")));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let r = self.rank();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("bad permutation {perm:?} for rank {r}")));
        }
        let new_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let src_strides = strides(&self.shape);
        let perm_strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
        let mut data = Vec::with_capacity(self.data.len());
        let mut index = vec![0usize; r];
        let mut offset = 0usize;
        for _ in 0..self.data.len() {
            data.push(self.data[offset]);
            for ax in (0..r).rev() {
                index[ax] += 1;
                offset += perm_strides[ax];
                if index[ax] < new_shape[ax] {
                    break;
                }
                offset -= perm_strides[ax] * new_shape[ax];
                index[ax] = 0;
            }
        }
        Ok(Tensor {
            shape: new_shape,
            data,
        })
    }

    /// Repeat along size-1 axes to reach `shape` (same rank required).
    pub fn expand(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.len() != self.rank()
            || self
                .shape
                .iter()
                .zip(shape)
                .any(|(&s, &t)| s != t && s != 1)
        {
            return Err(Error::shape("expand", format!("{:?} -> {shape:?}", self.shape)));
        }
        check_shape(shape)?;
        let src_strides = strides(&self.shape);
        let eff: Vec<usize> = self
            .shape
            .iter()
            .zip(&src_strides)
            .map(|(&s, &st)| if s == 1 { 0 } else { st })
            .collect();
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut index = vec![0usize; shape.len()];
        let mut offset = 0usize;
        for _ in 0..n {
            data.push(self.data[offset]);
            for ax in (0..shape.len()).rev() {
                index[ax] += 1;
                offset += eff[ax];
                if index[ax] < shape[ax] {
                    break;
                }
                offset -= eff[ax] * shape[ax];
                index[ax] = 0;
            }
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Sum down to `shape`, the inverse of [`Tensor::expand`].
    pub fn reduce_to(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.len() != self.rank()
            || self
                .shape
                .iter()
                .zip(shape)
                .any(|(&s, &t)| s != t && t != 1)
        {
            return Err(Error::shape("reduce_to", format!("{:?} -> {shape:?}", self.shape)));
        }
        let dst_strides = strides(shape);
        let eff: Vec<usize> = shape
            .iter()
            .zip(&dst_strides)
            .map(|(&s, &st)| if s == 1 { 0 } else { st })
            .collect();
        let mut out = Tensor::zeros(shape);
        let mut index = vec![0usize; shape.len()];
        let mut offset = 0usize;
        for &v in &self.data {
            out.data[offset] += v;
            for ax in (0..shape.len()).rev() {
                index[ax] += 1;
                offset += eff[ax];
                if index[ax] < self.shape[ax] {
                    break;
                }
                offset -= eff[ax] * self.shape[ax];
                index[ax] = 0;
            }
        }
        Ok(out)
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let r = first.rank();
        if axis >= r {
            return Err(Error::shape("concat", format!("axis {axis} for rank {r}")));
        }
        for p in parts {
            if p.rank() != r
                || p
                    .shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?} on axis {axis}", p.shape, first.shape),
                ));
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let total_axis: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut shape = first.shape.clone();
        shape[axis] = total_axis;
        let mut data = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for p in parts {
                let block = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * block..(o + 1) * block]);
            }
        }
        Ok(Tensor { shape, data })
    }

    /// Inverse of [`Tensor::concat`]: split along `axis` into pieces of the given sizes.
    pub fn split(&self, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor>> {
        let r = self.rank();
        if axis >= r || sizes.iter().sum::<usize>() != self.shape[axis] {
            return Err(Error::shape("split", format!("{:?} into {sizes:?} on {axis}", self.shape)));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let full = self.shape[axis] * inner;
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &s in sizes {
            let mut shape = self.shape.clone();
            shape[axis] = s;
            let mut data = Vec::with_capacity(outer * s * inner);
            for o in 0..outer {
                let base = o * full + start * inner;
                data.extend_from_slice(&self.data[base..base + s * inner]);
            }
            out.push(Tensor::new(&shape, data)?);
            start += s;
        }
        Ok(out)
    }

    /// Batched matrix product. `self` is `[.., m, k]`; `rhs` is either `[k, n]`
    /// (shared across the leading batch) or `[.., k, n]` with the same batch.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let dims = MatmulDims::resolve(self.shape(), rhs.shape())?;
        let mut out = vec![0.0; dims.batch * dims.m * dims.n];
        for b in 0..dims.batch {
            let a = &self.data[b * dims.m * dims.k..(b + 1) * dims.m * dims.k];
            let r = if dims.shared_rhs {
                &rhs.data[..]
            } else {
                &rhs.data[b * dims.k * dims.n..(b + 1) * dims.k * dims.n]
            };
            let c = &mut out[b * dims.m * dims.n..(b + 1) * dims.m * dims.n];
            gemm(
                dims.m,
                dims.k,
                dims.n,
                MatRef::row_major(a, dims.k),
                MatRef::row_major(r, dims.n),
                c,
                false,
            );
        }
        let mut shape = self.shape[..self.rank() - 2].to_vec();
        shape.extend([dims.m, dims.n]);
        Tensor::new(&shape, out)
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct MatmulDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub shared_rhs: bool,
}

impl MatmulDims {
    pub(crate) fn resolve(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::shape("matmul", format!("{a:?} x {b:?}: operands must be matrices")));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(Error::shape("matmul", format!("{a:?} x {b:?}: inner dimensions differ")));
        }
        let batch: usize = a[..a.len() - 2].iter().product();
        let shared_rhs = b.len() == 2;
        if !shared_rhs && a[..a.len() - 2] != b[..b.len() - 2] {
            return Err(Error::shape("matmul", format!("{a:?} x {b:?}: batch dimensions differ")));
        }
        Ok(MatmulDims {
            batch,
            m,
            k,
            n,
            shared_rhs,
        })
    }
}

/// A strided matrix view for [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], cols: usize) -> Self {
        MatRef {
            data,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    /// View a row-major `[rows, cols]` buffer as its transpose.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        MatRef {
            data,
            row_stride: 1,
            col_stride: cols as isize,
        }
    }
}

/// `c = a·b` (or `c += a·b` when `accumulate`), with `c` row-major `[m, n]`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: MatRef, b: MatRef, c: &mut [f64], accumulate: bool) {
    debug_assert!(c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    if !accumulate {
        c[..m * n].fill(0.0);
    }
    // SAFETY: the views cover m×k, k×n and m×n elements with the given strides;
    // every caller derives these from buffer lengths checked by MatmulDims or conv shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize) -> Self {
        ConvGeometry {
            stride: (stride, stride),
            padding: (padding, padding),
        }
    }

    pub fn output_size(&self, h: usize, w: usize, kh: usize, kw: usize) -> Result<(usize, usize)> {
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        if sh == 0 || sw == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        let hp = h + 2 * ph;
        let wp = w + 2 * pw;
        if hp < kh || wp < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {hp}x{wp}"),
            ));
        }
        Ok(((hp - kh) / sh + 1, (wp - kw) / sw + 1))
    }
}

/// Unfold one `[C, H, W]` image into columns `[C·kh·kw, Ho·Wo]`.
pub(crate) fn im2col(
    img: &[f64],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    geo: ConvGeometry,
    (ho, wo): (usize, usize),
    cols: &mut [f64],
) {
    let (sh, sw) = geo.stride;
    let (ph, pw) = geo.padding;
    let hw = ho * wo;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * sh + ki) as isize - ph as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &img[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for (ox, slot) in line.iter_mut().enumerate() {
                        let ix = (ox * sw + kj) as isize - pw as isize;
                        *slot = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image.
pub(crate) fn col2im(
    cols: &[f64],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    geo: ConvGeometry,
    (ho, wo): (usize, usize),
    img: &mut [f64],
) {
    let (sh, sw) = geo.stride;
    let (ph, pw) = geo.padding;
    let hw = ho * wo;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * sh + ki) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * sw + kj) as isize - pw as isize;
                        if ix >= 0 && ix < w as isize {
                            img[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvDims {
    pub(crate) fn resolve(input: &[usize], kernel: &[usize], geo: ConvGeometry) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("input {input:?} and kernel {kernel:?} must both be rank 4"),
            ));
        }
        if input[1] != kernel[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels, kernel expects {}", input[1], kernel[1]),
            ));
        }
        let (ho, wo) = geo.output_size(input[2], input[3], kernel[2], kernel[3])?;
        Ok(ConvDims {
            n: input[0],
            c: input[1],
            h: input[2],
            w: input[3],
            f: kernel[0],
            kh: kernel[2],
            kw: kernel[3],
            ho,
            wo,
        })
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }
}

impl Tensor {
    /// Cross-correlation of `[N, C, H, W]` input with a `[F, C, kh, kw]` kernel.
    pub fn conv2d(&self, kernel: &Tensor, geo: ConvGeometry) -> Result<Tensor> {
        let d = ConvDims::resolve(self.shape(), kernel.shape(), geo)?;
        let hw = d.ho * d.wo;
        let mut cols = vec![0.0; d.patch() * hw];
        let mut out = vec![0.0; d.n * d.f * hw];
        let img_len = d.c * d.h * d.w;
        for b in 0..d.n {
            im2col(
                &self.data[b * img_len..(b + 1) * img_len],
                (d.c, d.h, d.w),
                (d.kh, d.kw),
                geo,
                (d.ho, d.wo),
                &mut cols,
            );
            gemm(
                d.f,
                d.patch(),
                hw,
                MatRef::row_major(&kernel.data, d.patch()),
                MatRef::row_major(&cols, hw),
                &mut out[b * d.f * hw..(b + 1) * d.f * hw],
                false,
            );
        }
        Tensor::new(&[d.n, d.f, d.ho, d.wo], out)
    }

    /// Gradients of a convolution with respect to its input and kernel.
    pub(crate) fn conv2d_backward(
        input: &Tensor,
        kernel: &Tensor,
        grad_out: &Tensor,
        geo: ConvGeometry,
        want_input: bool,
        want_kernel: bool,
    ) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let d = ConvDims::resolve(input.shape(), kernel.shape(), geo)?;
        let hw = d.ho * d.wo;
        let img_len = d.c * d.h * d.w;
        let mut cols = vec![0.0; d.patch() * hw];
        let mut gx = want_input.then(|| vec![0.0; input.len()]);
        let mut gk = want_kernel.then(|| vec![0.0; kernel.len()]);
        for b in 0..d.n {
            let g = &grad_out.data[b * d.f * hw..(b + 1) * d.f * hw];
            if let Some(gk) = gk.as_mut() {
                im2col(
                    &input.data[b * img_len..(b + 1) * img_len],
                    (d.c, d.h, d.w),
                    (d.kh, d.kw),
                    geo,
                    (d.ho, d.wo),
                    &mut cols,
                );
                gemm(
                    d.f,
                    hw,
                    d.patch(),
                    MatRef::row_major(g, hw),
                    MatRef::transposed(&cols, hw),
                    gk,
                    true,
                );
            }
            if let Some(gx) = gx.as_mut() {
                gemm(
                    d.patch(),
                    d.f,
                    hw,
                    MatRef::transposed(&kernel.data, d.patch()),
                    MatRef::row_major(g, hw),
                    &mut cols,
                    false,
                );
                col2im(
                    &cols,
                    (d.c, d.h, d.w),
                    (d.kh, d.kw),
                    geo,
                    (d.ho, d.wo),
                    &mut gx[b * img_len..(b + 1) * img_len],
                );
            }
        }
        Ok((
            gx.map(|v| Tensor::new(input.shape(), v)).transpose()?,
            gk.map(|v| Tensor::new(kernel.shape(), v)).transpose()?,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn shape_invariants() {
        assert!(Tensor::new(&[2, 0], vec![]).is_err());
        assert!(Tensor::new(&[], vec![1.0]).is_err());
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::new(&[2, 3], vec![0.0; 6]).unwrap().len(), 6);
    }

    #[test]
    fn identity_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = random(&[3, 4], &mut rng);
        assert!(Tensor::eye(3).matmul(&a).unwrap().bit_eq(&a));
        let p = Tensor::scalar(2.0).reshape(&[1, 1]).unwrap();
        let q = Tensor::new(&[1, 1], vec![3.0]).unwrap();
        assert_eq!(p.matmul(&q).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&[7, 5], &mut rng);
        let b = random(&[5, 4], &mut rng);
        let c = a.matmul(&b).unwrap();
        for i in 0..7 {
            for j in 0..4 {
                let mut s = 0.0;
                for k in 0..5 {
                    s += a.data()[i * 5 + k] * b.data()[k * 4 + j];
                }
                assert!((c.data()[i * 4 + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        assert!(matches!(a.matmul(&b), Err(Error::Shape { .. })));
    }

    #[test]
    fn batched_and_shared_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&[2, 3, 4], &mut rng);
        let b = random(&[4, 5], &mut rng);
        let shared = a.matmul(&b).unwrap();
        let bb = Tensor::concat(&[&b.reshape(&[1, 4, 5]).unwrap(), &b.reshape(&[1, 4, 5]).unwrap()], 0).unwrap();
        let batched = a.matmul(&bb).unwrap();
        assert!(shared.max_abs_diff(&batched) < 1e-15);
    }

    #[test]
    fn conv_identity_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[1, 1, 5, 6], &mut rng);
        let one = Tensor::ones(&[1, 1, 1, 1]);
        assert!(x.conv2d(&one, ConvGeometry::new(1, 0)).unwrap().bit_eq(&x));
        let mut delta = Tensor::zeros(&[1, 1, 3, 3]);
        delta.data_mut()[4] = 1.0;
        let y = x.conv2d(&delta, ConvGeometry::new(1, 1)).unwrap();
        assert!(y.max_abs_diff(&x) == 0.0);
    }

    #[test]
    fn conv_matches_nested_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[2, 3, 8, 8], &mut rng);
        let k = random(&[4, 3, 3, 3], &mut rng);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            let geo = ConvGeometry::new(stride, pad);
            let y = x.conv2d(&k, geo).unwrap();
            let (ho, wo) = (y.shape()[2], y.shape()[3]);
            for n in 0..2 {
                for f in 0..4 {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut s = 0.0;
                            for c in 0..3 {
                                for i in 0..3 {
                                    for j in 0..3 {
                                        let iy = (oy * stride + i) as isize - pad as isize;
                                        let ix = (ox * stride + j) as isize - pad as isize;
                                        if iy < 0 || ix < 0 || iy >= 8 || ix >= 8 {
                                            continue;
                                        }
                                        s += x.data()[((n * 3 + c) * 8 + iy as usize) * 8 + ix as usize]
                                            * k.data()[((f * 3 + c) * 3 + i) * 3 + j];
                                    }
                                }
                            }
                            let got = y.data()[((n * 4 + f) * ho + oy) * wo + ox];
                            assert!((got - s).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn conv_errors() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        assert!(x.conv2d(&Tensor::zeros(&[1, 3, 3, 3]), ConvGeometry::new(1, 1)).is_err());
        assert!(x.conv2d(&Tensor::zeros(&[1, 2, 5, 5]), ConvGeometry::new(1, 0)).is_err());
    }

    #[test]
    fn permute_expand_reduce() {
        let t = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
        let p = t.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        // p[k, i, j] = t[i, j, k]
        assert_eq!(p.data()[(2 + 1) * 3 + 2], t.data()[(3 + 2) * 4 + 1]);
        let back = p.permute(&[1, 2, 0]).unwrap();
        assert!(back.bit_eq(&t));

        let s = Tensor::from_fn(&[2, 1, 3], |i| i as f64);
        let e = s.expand(&[2, 4, 3]).unwrap();
        assert_eq!(e.data()[(4 + 3) * 3 + 2], 5.0);
        let r = e.reduce_to(&[2, 1, 3]).unwrap();
        assert!(r.bit_eq(&s.scale(4.0)));
        assert!(s.expand(&[2, 4, 4]).is_err());
    }

    #[test]
    fn concat_split_inverse() {
        let a = Tensor::from_fn(&[2, 3, 2], |i| i as f64);
        let b = Tensor::from_fn(&[2, 1, 2], |i| 100.0 + i as f64);
        let c = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 4, 2]);
        let parts = c.split(1, &[3, 1]).unwrap();
        assert!(parts[0].bit_eq(&a) && parts[1].bit_eq(&b));
    }
}
