//! Forward operations. Each builds the result data and records the graph
//! node needed to run the backward pass.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, Conv2dDims};
use super::{BinaryKind, Op, Tensor, UnaryKind};
use crate::error::{Error, Result};
use crate::exec;
use crate::scalar::Scalar;

/// Dropout behaviour: exact identity in eval, inverted scaled mask in train.
pub enum DropoutMode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl<T: Scalar> Tensor<T> {
    fn binary(&self, other: &Tensor<T>, kind: BinaryKind) -> Result<Tensor<T>> {
        let out_shape = kernels::broadcast_shapes(self.shape(), other.shape()).ok_or_else(|| {
            Error::ShapeMismatch {
                op: kind.name(),
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            }
        })?;
        let a = self.data_ref();
        let b = other.data_ref();
        let data = if self.shape() == other.shape() {
            a.iter().zip(b.iter()).map(|(&x, &y)| kind.apply(x, y)).collect()
        } else {
            let ea = kernels::expand_to(&a, self.shape(), &out_shape);
            let eb = kernels::expand_to(&b, other.shape(), &out_shape);
            ea.iter().zip(eb.iter()).map(|(&x, &y)| kind.apply(x, y)).collect()
        };
        drop(a);
        drop(b);
        Ok(Tensor::from_op(
            out_shape,
            data,
            Op::Binary {
                a: self.clone(),
                b: other.clone(),
                kind,
            },
        ))
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinaryKind::Sub)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinaryKind::Mul)
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinaryKind::Div)
    }

    /// y = self * mul + add (gradient flows through `mul` only).
    pub fn affine(&self, mul: T, add: T) -> Result<Tensor<T>> {
        let data = self.data_ref().iter().map(|&x| x * mul + add).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Affine { a: self.clone(), mul },
        ))
    }

    pub fn scale(&self, c: T) -> Result<Tensor<T>> {
        self.affine(c, T::ZERO)
    }

    pub fn add_scalar(&self, c: T) -> Result<Tensor<T>> {
        self.affine(T::ONE, c)
    }

    pub fn neg(&self) -> Result<Tensor<T>> {
        self.affine(T::ZERO - T::ONE, T::ZERO)
    }

    pub fn relu(&self) -> Result<Tensor<T>> {
        let data = self.data_ref().iter().map(|&x| x.maximum(T::ZERO)).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Unary { a: self.clone(), kind: UnaryKind::Relu },
        ))
    }

    pub fn sigmoid(&self) -> Result<Tensor<T>> {
        let data = self
            .data_ref()
            .iter()
            .map(|&x| {
                // branch keeps exp() off large positive arguments
                if x >= T::ZERO {
                    T::ONE / (T::ONE + (T::ZERO - x).exp())
                } else {
                    let e = x.exp();
                    e / (T::ONE + e)
                }
            })
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Unary { a: self.clone(), kind: UnaryKind::Sigmoid },
        ))
    }

    /// Matrix product with limited batching: 2-D x 2-D, equal-batch
    /// 3-D x 3-D, and either operand rank 2 against a rank-3 batch.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: self.shape().to_vec(),
            rhs: other.shape().to_vec(),
        };
        let (la, lb) = (self.rank(), other.rank());
        let (batch, m, k, n, out_shape) = match (la, lb) {
            (2, 2) => {
                let (m, k) = (self.shape()[0], self.shape()[1]);
                let (k2, n) = (other.shape()[0], other.shape()[1]);
                if k != k2 {
                    return Err(mismatch());
                }
                (1usize, m, k, n, vec![m, n])
            }
            (3, 3) => {
                let (ba, m, k) = (self.shape()[0], self.shape()[1], self.shape()[2]);
                let (bb, k2, n) = (other.shape()[0], other.shape()[1], other.shape()[2]);
                if ba != bb || k != k2 {
                    return Err(mismatch());
                }
                (ba, m, k, n, vec![ba, m, n])
            }
            (3, 2) => {
                let (ba, m, k) = (self.shape()[0], self.shape()[1], self.shape()[2]);
                let (k2, n) = (other.shape()[0], other.shape()[1]);
                if k != k2 {
                    return Err(mismatch());
                }
                (ba, m, k, n, vec![ba, m, n])
            }
            (2, 3) => {
                let (m, k) = (self.shape()[0], self.shape()[1]);
                let (bb, k2, n) = (other.shape()[0], other.shape()[1], other.shape()[2]);
                if k != k2 {
                    return Err(mismatch());
                }
                (bb, m, k, n, vec![bb, m, n])
            }
            _ => return Err(mismatch()),
        };
        let a = self.data_ref();
        let b = other.data_ref();
        let a_batched = la == 3;
        let b_batched = lb == 3;
        let mut out = vec![T::ZERO; batch * m * n];
        exec::for_each_chunk(&mut out, m * n, |i, slice| {
            let a_off = if a_batched { i * m * k } else { 0 };
            let b_off = if b_batched { i * k * n } else { 0 };
            kernels::mm_nn(&a[a_off..a_off + m * k], &b[b_off..b_off + k * n], slice, m, k, n);
        });
        drop(a);
        drop(b);
        Ok(Tensor::from_op(
            out_shape,
            out,
            Op::Matmul { a: self.clone(), b: other.clone() },
        ))
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() {
            return Err(Error::InvalidShape {
                op: "softmax",
                shape: self.shape().to_vec(),
                msg: format!("axis {} out of range", axis),
            });
        }
        let (_outer, len, inner) = kernels::axis_split(self.shape(), axis);
        let x = self.data_ref();
        let mut out = vec![T::ZERO; x.len()];
        exec::for_each_chunk(&mut out, len * inner, |o, block| {
            let base = o * len * inner;
            for i in 0..inner {
                let mut max = x[base + i];
                for l in 1..len {
                    max = max.maximum(x[base + l * inner + i]);
                }
                let mut sum = T::ZERO;
                for l in 0..len {
                    let e = (x[base + l * inner + i] - max).exp();
                    block[l * inner + i] = e;
                    sum = sum + e;
                }
                for l in 0..len {
                    block[l * inner + i] = block[l * inner + i] / sum;
                }
            }
        });
        drop(x);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::Softmax { a: self.clone(), axis },
        ))
    }

    /// Population standard deviation over all non-batch axes: one scalar
    /// per batch slice. `batch_axes` must be sorted ascending; an empty
    /// list reduces the whole tensor to a rank-0 scalar.
    pub fn std_all(&self, batch_axes: &[usize]) -> Result<Tensor<T>> {
        for w in batch_axes.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::InvalidArgument(
                    "std_all: batch_axes must be sorted and unique".into(),
                ));
            }
        }
        if batch_axes.iter().any(|&a| a >= self.rank()) {
            return Err(Error::InvalidShape {
                op: "std_all",
                shape: self.shape().to_vec(),
                msg: "batch axis out of range".into(),
            });
        }
        let batch_dims: Vec<usize> = batch_axes.iter().map(|&a| self.shape()[a]).collect();
        let n_slices: usize = batch_dims.iter().product();
        let reduced = self.numel() / n_slices.max(1);
        if reduced < 2 {
            return Err(Error::Degenerate {
                op: "std_all",
                msg: format!("{} reduced element(s); need at least 2", reduced),
            });
        }
        let x = self.data_ref();
        let slice_of = slice_index_fn(self.shape(), batch_axes);
        // deviations are taken against each slice's first element so a
        // constant slice yields exactly zero
        let (means, anchors) = shifted_slice_means(&x, n_slices, reduced, &slice_of);
        let inv_n = T::ONE / T::from_f64(reduced as f64);
        let mut sq = vec![T::ZERO; n_slices];
        for (i, &v) in x.iter().enumerate() {
            let s = slice_of(i);
            let d = (v - anchors[s]) - means[s];
            sq[s] = sq[s] + d * d;
        }
        drop(x);
        let out: Vec<T> = sq.iter().map(|&s| (s * inv_n).sqrt()).collect();
        Ok(Tensor::from_op(
            batch_dims,
            out,
            Op::StdAll { a: self.clone(), batch_axes: batch_axes.to_vec() },
        ))
    }

    /// 2-D cross-correlation. x: [B,Ci,H,W], w: [Co,Ci,K,K], bias: [Co].
    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<T>> {
        if self.rank() != 4 || weight.rank() != 4 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        let (b, ci, h, w) = shape4(self.shape());
        let (co, ci_w, kh, kw) = shape4(weight.shape());
        if ci != ci_w || kh != kw {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        if let Some(bias) = bias {
            if bias.shape() != [co] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: bias.shape().to_vec(),
                    rhs: vec![co],
                });
            }
        }
        let out_h = kernels::conv_out_extent(h, kh, stride, padding);
        let out_w = kernels::conv_out_extent(w, kw, stride, padding);
        let (out_h, out_w) = match (out_h, out_w) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::InvalidShape {
                    op: "conv2d",
                    shape: self.shape().to_vec(),
                    msg: format!("kernel {} exceeds padded input (padding {})", kh, padding),
                })
            }
        };
        let dims = Conv2dDims {
            batch: b,
            c_in: ci,
            h,
            w,
            c_out: co,
            kernel: kh,
            stride,
            padding,
            out_h,
            out_w,
        };
        let x = self.data_ref();
        let wt = weight.data_ref();
        let bias_data = bias.map(|t| t.to_vec());
        let mut out = vec![T::ZERO; b * co * out_h * out_w];
        kernels::conv2d_forward(&x, &wt, bias_data.as_deref(), &mut out, dims);
        drop(x);
        drop(wt);
        Ok(Tensor::from_op(
            vec![b, co, out_h, out_w],
            out,
            Op::Conv2d {
                x: self.clone(),
                w: weight.clone(),
                b: bias.cloned(),
                stride,
                padding,
            },
        ))
    }

    /// Affine map on the last axis. x: [B,in], w: [out,in], bias: [out].
    pub fn linear(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        if self.rank() != 2 || weight.rank() != 2 || self.shape()[1] != weight.shape()[1] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: self.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        let (b, dim_in) = (self.shape()[0], self.shape()[1]);
        let dim_out = weight.shape()[0];
        if let Some(bias) = bias {
            if bias.shape() != [dim_out] {
                return Err(Error::ShapeMismatch {
                    op: "linear bias",
                    lhs: bias.shape().to_vec(),
                    rhs: vec![dim_out],
                });
            }
        }
        let x = self.data_ref();
        let wt = weight.data_ref();
        let bias_data = bias.map(|t| t.to_vec());
        let mut out = vec![T::ZERO; b * dim_out];
        // y = x . w^T + bias
        kernels::mm_nt(&x, &wt, &mut out, b, dim_in, dim_out);
        if let Some(bv) = &bias_data {
            for row in out.chunks_mut(dim_out) {
                for (o, &bias_v) in row.iter_mut().zip(bv.iter()) {
                    *o = *o + bias_v;
                }
            }
        }
        drop(x);
        drop(wt);
        Ok(Tensor::from_op(
            vec![b, dim_out],
            out,
            Op::Linear {
                x: self.clone(),
                w: weight.clone(),
                b: bias.cloned(),
            },
        ))
    }

    /// Average pooling without padding.
    pub fn avg_pool2d(&self, kernel: usize, stride: usize) -> Result<Tensor<T>> {
        if self.rank() != 4 {
            return Err(Error::InvalidShape {
                op: "avg_pool2d",
                shape: self.shape().to_vec(),
                msg: "expected rank 4".into(),
            });
        }
        let (b, c, h, w) = shape4(self.shape());
        let (out_h, out_w) = match (
            kernels::conv_out_extent(h, kernel, stride, 0),
            kernels::conv_out_extent(w, kernel, stride, 0),
        ) {
            (Some(a), Some(bb)) => (a, bb),
            _ => {
                return Err(Error::InvalidShape {
                    op: "avg_pool2d",
                    shape: self.shape().to_vec(),
                    msg: format!("kernel {} exceeds input", kernel),
                })
            }
        };
        let x = self.data_ref();
        let inv = T::ONE / T::from_f64((kernel * kernel) as f64);
        let mut out = vec![T::ZERO; b * c * out_h * out_w];
        exec::for_each_chunk(&mut out, out_h * out_w, |plane_idx, plane| {
            let src = plane_idx * h * w;
            for oh in 0..out_h {
                for ow in 0..out_w {
                    let mut acc = T::ZERO;
                    for kh in 0..kernel {
                        for kw in 0..kernel {
                            acc = acc + x[src + (oh * stride + kh) * w + ow * stride + kw];
                        }
                    }
                    plane[oh * out_w + ow] = acc * inv;
                }
            }
        });
        drop(x);
        Ok(Tensor::from_op(
            vec![b, c, out_h, out_w],
            out,
            Op::AvgPool2d { x: self.clone(), kernel, stride },
        ))
    }

    /// Mean over `axes` (sorted ascending). `keep` retains size-1 axes.
    pub fn mean_axes(&self, axes: &[usize], keep: bool) -> Result<Tensor<T>> {
        if axes.is_empty() || axes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(
                "mean_axes: axes must be non-empty, sorted, unique".into(),
            ));
        }
        if axes.iter().any(|&a| a >= self.rank()) {
            return Err(Error::InvalidShape {
                op: "mean_axes",
                shape: self.shape().to_vec(),
                msg: "axis out of range".into(),
            });
        }
        let keep_axes: Vec<usize> = (0..self.rank()).filter(|d| !axes.contains(d)).collect();
        let out_shape: Vec<usize> = if keep {
            (0..self.rank())
                .map(|d| if axes.contains(&d) { 1 } else { self.shape()[d] })
                .collect()
        } else {
            keep_axes.iter().map(|&d| self.shape()[d]).collect()
        };
        let slice_of = slice_index_fn(self.shape(), &keep_axes);
        let count = axes.iter().map(|&a| self.shape()[a]).product::<usize>();
        let inv = T::ONE / T::from_f64(count as f64);
        let x = self.data_ref();
        let mut out = vec![T::ZERO; self.numel() / count];
        for (i, &v) in x.iter().enumerate() {
            let s = slice_of(i);
            out[s] = out[s] + v;
        }
        for o in out.iter_mut() {
            *o = *o * inv;
        }
        drop(x);
        Ok(Tensor::from_op(
            out_shape,
            out,
            Op::ReduceMean { a: self.clone(), axes: axes.to_vec() },
        ))
    }

    /// Global spatial average: [B,C,H,W] -> [B,C].
    pub fn global_avg_pool2d(&self) -> Result<Tensor<T>> {
        if self.rank() != 4 {
            return Err(Error::InvalidShape {
                op: "global_avg_pool2d",
                shape: self.shape().to_vec(),
                msg: "expected rank 4".into(),
            });
        }
        self.mean_axes(&[2, 3], false)
    }

    pub fn sum_all(&self) -> Result<Tensor<T>> {
        let mut acc = T::ZERO;
        for &v in self.data_ref().iter() {
            acc = acc + v;
        }
        Ok(Tensor::from_op(vec![], vec![acc], Op::SumAll { a: self.clone() }))
    }

    pub fn mean_all(&self) -> Result<Tensor<T>> {
        let inv = T::ONE / T::from_f64(self.numel() as f64);
        self.sum_all()?.scale(inv)
    }

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor<T>> {
        let numel: usize = new_shape.iter().product();
        if numel != self.numel() {
            return Err(Error::InvalidShape {
                op: "reshape",
                shape: new_shape.to_vec(),
                msg: format!("cannot reshape {:?} into {:?}", self.shape(), new_shape),
            });
        }
        Ok(Tensor::from_op(
            new_shape.to_vec(),
            self.to_vec(),
            Op::Reshape { a: self.clone() },
        ))
    }

    /// Merge all axes from `start_dim` onward into one.
    pub fn flatten(&self, start_dim: usize) -> Result<Tensor<T>> {
        if start_dim >= self.rank() {
            return Err(Error::InvalidShape {
                op: "flatten",
                shape: self.shape().to_vec(),
                msg: format!("start_dim {} out of range", start_dim),
            });
        }
        let mut shape: Vec<usize> = self.shape()[..start_dim].to_vec();
        shape.push(self.shape()[start_dim..].iter().product());
        self.reshape(&shape)
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidArgument(format!(
                "permute: {:?} is not a permutation of 0..{}",
                perm, rank
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape()[p]).collect();
        let data = kernels::permute_copy(&self.data_ref(), self.shape(), perm);
        Ok(Tensor::from_op(
            out_shape,
            data,
            Op::Permute { a: self.clone(), perm: perm.to_vec() },
        ))
    }

    /// Swap the last two axes (matrix transpose within a batch).
    pub fn transpose_last2(&self) -> Result<Tensor<T>> {
        let rank = self.rank();
        if rank < 2 {
            return Err(Error::InvalidShape {
                op: "transpose_last2",
                shape: self.shape().to_vec(),
                msg: "need rank >= 2".into(),
            });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(&perm)
    }

    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| {
            Error::InvalidArgument("concat: empty tensor list".into())
        })?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::InvalidShape {
                op: "concat",
                shape: first.shape().to_vec(),
                msg: format!("axis {} out of range", axis),
            });
        }
        for p in parts.iter().skip(1) {
            let same_elsewhere = p.rank() == rank
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !same_elsewhere {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        let (outer, _, inner) = kernels::axis_split(&out_shape, axis);
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let len = p.shape()[axis];
                let src = p.data_ref();
                data.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        Ok(Tensor::from_op(
            out_shape,
            data,
            Op::Concat { parts: parts.to_vec(), axis },
        ))
    }

    /// Inverted dropout: train scales kept values by 1/(1-p) so eval is
    /// the exact identity (same handle, no new node).
    pub fn dropout(&self, p: f64, mode: DropoutMode<'_>) -> Result<Tensor<T>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "dropout probability {} outside [0, 1)",
                p
            )));
        }
        match mode {
            DropoutMode::Eval => Ok(self.clone()),
            DropoutMode::Train(rng) => {
                let keep_scale = T::from_f64(1.0 / (1.0 - p));
                let mask: Vec<T> = (0..self.numel())
                    .map(|_| if rng.random::<f64>() < p { T::ZERO } else { keep_scale })
                    .collect();
                let data = self
                    .data_ref()
                    .iter()
                    .zip(&mask)
                    .map(|(&x, &m)| x * m)
                    .collect();
                Ok(Tensor::from_op(
                    self.shape().to_vec(),
                    data,
                    Op::Dropout { a: self.clone(), mask },
                ))
            }
        }
    }

    /// [B, C*r^2, H, W] -> [B, C, H*r, W*r].
    pub fn pixel_shuffle(&self, factor: usize) -> Result<Tensor<T>> {
        let (b, c, h, w) = require_rank4(self, "pixel_shuffle")?;
        if factor == 0 || c % (factor * factor) != 0 {
            return Err(Error::InvalidShape {
                op: "pixel_shuffle",
                shape: self.shape().to_vec(),
                msg: format!("channels {} not divisible by {}^2", c, factor),
            });
        }
        let c_out = c / (factor * factor);
        let data = kernels::pixel_shuffle(&self.data_ref(), b, c_out, h, w, factor);
        Ok(Tensor::from_op(
            vec![b, c_out, h * factor, w * factor],
            data,
            Op::PixelShuffle { a: self.clone(), factor },
        ))
    }

    /// [B, C, H*r, W*r] -> [B, C*r^2, H, W].
    pub fn pixel_unshuffle(&self, factor: usize) -> Result<Tensor<T>> {
        let (b, c, h, w) = require_rank4(self, "pixel_unshuffle")?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::InvalidShape {
                op: "pixel_unshuffle",
                shape: self.shape().to_vec(),
                msg: format!("spatial dims {}x{} not divisible by {}", h, w, factor),
            });
        }
        let data = kernels::pixel_unshuffle(&self.data_ref(), b, c, h / factor, w / factor, factor);
        Ok(Tensor::from_op(
            vec![b, c * factor * factor, h / factor, w / factor],
            data,
            Op::PixelUnshuffle { a: self.clone(), factor },
        ))
    }

    pub fn channel_shuffle(&self, groups: usize) -> Result<Tensor<T>> {
        let (b, c, h, w) = require_rank4(self, "channel_shuffle")?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::InvalidShape {
                op: "channel_shuffle",
                shape: self.shape().to_vec(),
                msg: format!("channels {} not divisible by {} groups", c, groups),
            });
        }
        let data = kernels::channel_shuffle(&self.data_ref(), b, c, h * w, groups);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::ChannelShuffle { a: self.clone(), groups },
        ))
    }
}

impl BinaryKind {
    pub(crate) fn name(self) -> &'static str {
        match self {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        }
    }

    #[inline]
    pub(crate) fn apply<T: Scalar>(self, a: T, b: T) -> T {
        match self {
            BinaryKind::Add => a + b,
            BinaryKind::Sub => a - b,
            BinaryKind::Mul => a * b,
            BinaryKind::Div => a / b,
        }
    }
}

fn shape4(shape: &[usize]) -> (usize, usize, usize, usize) {
    (shape[0], shape[1], shape[2], shape[3])
}

fn require_rank4<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    if t.rank() != 4 {
        return Err(Error::InvalidShape {
            op,
            shape: t.shape().to_vec(),
            msg: "expected rank 4".into(),
        });
    }
    Ok(shape4(t.shape()))
}

/// Per-slice mean of (x - first element of the slice), plus those anchor
/// elements. The shift cancels exactly for constant slices and reduces
/// cancellation error in general; `mean = anchor + shifted_mean`.
pub(crate) fn shifted_slice_means<T: Scalar>(
    x: &[T],
    n_slices: usize,
    reduced: usize,
    slice_of: &impl Fn(usize) -> usize,
) -> (Vec<T>, Vec<T>) {
    let mut anchors = vec![T::ZERO; n_slices];
    let mut seen = vec![false; n_slices];
    for (i, &v) in x.iter().enumerate() {
        let s = slice_of(i);
        if !seen[s] {
            seen[s] = true;
            anchors[s] = v;
        }
    }
    let mut sums = vec![T::ZERO; n_slices];
    for (i, &v) in x.iter().enumerate() {
        let s = slice_of(i);
        sums[s] = sums[s] + (v - anchors[s]);
    }
    let inv_n = T::ONE / T::from_f64(reduced as f64);
    (sums.iter().map(|&s| s * inv_n).collect(), anchors)
}

/// Returns a closure mapping a flat element index to its slice index when
/// only `kept_axes` (sorted) of `shape` distinguish slices.
pub(crate) fn slice_index_fn(shape: &[usize], kept_axes: &[usize]) -> impl Fn(usize) -> usize {
    let rank = shape.len();
    // contiguous leading prefix: slice index is a plain division
    if kept_axes.iter().copied().eq(0..kept_axes.len()) {
        let block: usize = shape[kept_axes.len()..].iter().product();
        return SliceIndex::Prefix(block).into_fn();
    }
    // stride of each input axis
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    // stride of each kept axis in the output
    let mut out_strides = vec![0usize; rank];
    let mut acc = 1usize;
    for &a in kept_axes.iter().rev() {
        out_strides[a] = acc;
        acc *= shape[a];
    }
    let dims: Vec<usize> = shape.to_vec();
    SliceIndex::General { rank, in_strides, out_strides, dims }.into_fn()
}

enum SliceIndex {
    Prefix(usize),
    General {
        rank: usize,
        in_strides: Vec<usize>,
        out_strides: Vec<usize>,
        dims: Vec<usize>,
    },
}

impl SliceIndex {
    fn into_fn(self) -> impl Fn(usize) -> usize {
        move |flat: usize| match &self {
            SliceIndex::Prefix(block) => flat / block,
            SliceIndex::General { rank, in_strides, out_strides, dims } => {
                let mut s = 0usize;
                for d in 0..*rank {
                    if out_strides[d] > 0 {
                        let coord = (flat / in_strides[d]) % dims[d];
                        s += coord * out_strides[d];
                    }
                }
                s
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn t64(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::from_vec(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn softmax_uniform_input_gives_uniform_output() {
        let x = t64(&[3.0; 4], &[4]);
        for v in x.softmax(0).unwrap().to_vec() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_closed_form_quarter_three_quarters() {
        let x = t64(&[0.0, 3.0f64.ln()], &[2]);
        let y = x.softmax(0).unwrap().to_vec();
        assert!((y[0] - 0.25).abs() < 1e-12);
        assert!((y[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_sums_to_one_and_shift_invariant() {
        let mut rng = seed::rng(3, "softmax-prop");
        let data = crate::gradcheck::sample(&mut rng, 60, -4.0, 4.0, 0.0);
        let x = t64(&data, &[3, 5, 4]);
        let y = x.softmax(1).unwrap();
        let yd = y.to_vec();
        for o in 0..3 {
            for i in 0..4 {
                let s: f64 = (0..5).map(|l| yd[o * 20 + l * 4 + i]).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
        let shifted = x.add_scalar(17.5).unwrap().softmax(1).unwrap().to_vec();
        for (a, b) in yd.iter().zip(&shifted) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn std_all_constant_is_zero() {
        let x = t64(&[0.7; 8], &[2, 4]);
        assert_eq!(x.std_all(&[]).unwrap().to_vec(), vec![0.0]);
    }

    #[test]
    fn std_all_direct_formula_oracle() {
        // population std of [1,2,3,4] = sqrt(1.25)
        let x = t64(&[1.0, 2.0, 3.0, 4.0], &[4]);
        let s = x.std_all(&[]).unwrap().to_scalar().unwrap();
        assert!((s - 1.25f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn std_all_homogeneity() {
        let mut rng = seed::rng(11, "std-prop");
        let data = crate::gradcheck::sample(&mut rng, 24, -1.0, 1.0, 0.0);
        let x = t64(&data, &[2, 3, 4]);
        let s1 = x.std_all(&[0]).unwrap().to_vec();
        let s7 = x.scale(7.0).unwrap().std_all(&[0]).unwrap().to_vec();
        for (a, b) in s1.iter().zip(&s7) {
            assert!((7.0 * a - b).abs() / b.abs() < 1e-6);
        }
    }

    #[test]
    fn std_all_rejects_single_element_slices() {
        let x = t64(&[1.0, 2.0], &[2, 1]);
        assert!(matches!(
            x.std_all(&[0]).unwrap_err(),
            crate::error::Error::Degenerate { .. }
        ));
    }

    #[test]
    fn conv2d_identity_kernel() {
        let x = t64(&[0.1, 0.2, 0.3, 0.4], &[1, 1, 2, 2]);
        let w = t64(&[1.0], &[1, 1, 1, 1]);
        let y = x.conv2d(&w, None, 1, 0).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn conv2d_all_ones_kernel_center_sum() {
        // 3x3 ones kernel over a constant-1 5x5 input with padding 1:
        // the center output cell sums the full window
        let x = t64(&[1.0; 25], &[1, 1, 5, 5]);
        let w = t64(&[1.0; 9], &[1, 1, 3, 3]);
        let y = x.conv2d(&w, None, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 5, 5]);
        assert_eq!(y.to_vec()[2 * 5 + 2], 9.0);
        assert_eq!(y.to_vec()[0], 4.0); // corner sees a 2x2 window
    }

    #[test]
    fn conv2d_rejects_oversized_kernel() {
        let x = t64(&[1.0; 4], &[1, 1, 2, 2]);
        let w = t64(&[1.0; 25], &[1, 1, 5, 5]);
        assert!(x.conv2d(&w, None, 1, 0).is_err());
    }

    #[test]
    fn relu_definition() {
        let x = t64(&[-2.0, 3.0], &[2]);
        assert_eq!(x.relu().unwrap().to_vec(), vec![0.0, 3.0]);
    }

    #[test]
    fn pixel_unshuffle_then_shuffle_is_bitwise_identity() {
        let mut rng = seed::rng(5, "pixel-prop");
        let data = crate::gradcheck::sample(&mut rng, 64, -1.0, 1.0, 0.0);
        let x = t64(&data, &[1, 4, 4, 4]);
        let back = x.pixel_unshuffle(2).unwrap().pixel_shuffle(2).unwrap();
        assert_eq!(back.to_vec(), x.to_vec());
        let fwd = x.pixel_shuffle(2).unwrap().pixel_unshuffle(2).unwrap();
        assert_eq!(fwd.to_vec(), x.to_vec());
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = t64(&[0.0; 6], &[2, 3]);
        let b = t64(&[0.0; 8], &[4, 2]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{}", msg);
    }

    #[test]
    fn dropout_eval_is_identity_train_scales() {
        let x = t64(&[1.0; 100], &[100]);
        let y = x.dropout(0.3, DropoutMode::Eval).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
        let mut rng = seed::rng(2, "dropout-test");
        let z = x.dropout(0.3, DropoutMode::Train(&mut rng)).unwrap().to_vec();
        let kept = z.iter().filter(|v| **v != 0.0).count();
        assert!(kept > 50 && kept < 90);
        for v in z {
            assert!(v == 0.0 || (v - 1.0 / 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn parallel_and_sequential_kernels_agree_bitwise() {
        let mut rng = seed::rng(8, "par-check");
        let a = t64(&crate::gradcheck::sample(&mut rng, 6 * 12 * 9, -1.0, 1.0, 0.0), &[6, 12, 9]);
        let b = t64(&crate::gradcheck::sample(&mut rng, 6 * 9 * 7, -1.0, 1.0, 0.0), &[6, 9, 7]);
        let x = t64(&crate::gradcheck::sample(&mut rng, 2 * 3 * 8 * 8, -1.0, 1.0, 0.0), &[2, 3, 8, 8]);
        let w = t64(&crate::gradcheck::sample(&mut rng, 4 * 3 * 3 * 3, -1.0, 1.0, 0.0), &[4, 3, 3, 3]);
        crate::exec::set_parallel(true);
        let mm_p = a.matmul(&b).unwrap().to_vec();
        let cv_p = x.conv2d(&w, None, 2, 1).unwrap().to_vec();
        crate::exec::set_parallel(false);
        let mm_s = a.matmul(&b).unwrap().to_vec();
        let cv_s = x.conv2d(&w, None, 2, 1).unwrap().to_vec();
        crate::exec::set_parallel(true);
        assert_eq!(mm_p, mm_s);
        assert_eq!(cv_p, cv_s);
    }
}
