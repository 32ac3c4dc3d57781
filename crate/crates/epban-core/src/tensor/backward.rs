//! Per-operation gradient rules for the reverse sweep.

use std::collections::HashMap;

use super::kernels::{self, Conv2dDims};
use super::{add_grad, BinaryKind, Op, Tensor, UnaryKind};
use crate::error::Result;
use crate::exec;
use crate::scalar::Scalar;

impl<T: Scalar> Op<T> {
    /// Push this node's output gradient `g` into its parents.
    /// `out` is the tensor produced by this op (its data is the saved
    /// activation for ops like softmax and sigmoid).
    pub(crate) fn backward(
        &self,
        out: &Tensor<T>,
        g: &[T],
        grads: &mut HashMap<usize, Vec<T>>,
    ) -> Result<()> {
        match self {
            Op::Leaf => {}

            Op::Binary { a, b, kind } => {
                let out_shape = out.shape();
                match kind {
                    BinaryKind::Add => {
                        if a.requires_grad() {
                            add_grad(grads, a, kernels::reduce_to_shape(g, out_shape, a.shape()));
                        }
                        if b.requires_grad() {
                            add_grad(grads, b, kernels::reduce_to_shape(g, out_shape, b.shape()));
                        }
                    }
                    BinaryKind::Sub => {
                        if a.requires_grad() {
                            add_grad(grads, a, kernels::reduce_to_shape(g, out_shape, a.shape()));
                        }
                        if b.requires_grad() {
                            let neg: Vec<T> = g.iter().map(|&v| T::ZERO - v).collect();
                            add_grad(grads, b, kernels::reduce_to_shape(&neg, out_shape, b.shape()));
                        }
                    }
                    BinaryKind::Mul => {
                        if a.requires_grad() {
                            let eb = kernels::expand_to(&b.data_ref(), b.shape(), out_shape);
                            let da: Vec<T> = g.iter().zip(&eb).map(|(&gv, &bv)| gv * bv).collect();
                            add_grad(grads, a, kernels::reduce_to_shape(&da, out_shape, a.shape()));
                        }
                        if b.requires_grad() {
                            let ea = kernels::expand_to(&a.data_ref(), a.shape(), out_shape);
                            let db: Vec<T> = g.iter().zip(&ea).map(|(&gv, &av)| gv * av).collect();
                            add_grad(grads, b, kernels::reduce_to_shape(&db, out_shape, b.shape()));
                        }
                    }
                    BinaryKind::Div => {
                        let eb = kernels::expand_to(&b.data_ref(), b.shape(), out_shape);
                        if a.requires_grad() {
                            let da: Vec<T> = g.iter().zip(&eb).map(|(&gv, &bv)| gv / bv).collect();
                            add_grad(grads, a, kernels::reduce_to_shape(&da, out_shape, a.shape()));
                        }
                        if b.requires_grad() {
                            let ea = kernels::expand_to(&a.data_ref(), a.shape(), out_shape);
                            let db: Vec<T> = g
                                .iter()
                                .zip(ea.iter().zip(&eb))
                                .map(|(&gv, (&av, &bv))| T::ZERO - gv * av / (bv * bv))
                                .collect();
                            add_grad(grads, b, kernels::reduce_to_shape(&db, out_shape, b.shape()));
                        }
                    }
                }
            }

            Op::Affine { a, mul } => {
                if a.requires_grad() {
                    add_grad(grads, a, g.iter().map(|&v| v * *mul).collect());
                }
            }

            Op::Unary { a, kind } => {
                if a.requires_grad() {
                    let da: Vec<T> = match kind {
                        UnaryKind::Relu => {
                            let x = a.data_ref();
                            g.iter()
                                .zip(x.iter())
                                .map(|(&gv, &xv)| if xv > T::ZERO { gv } else { T::ZERO })
                                .collect()
                        }
                        UnaryKind::Sigmoid => {
                            let y = out.data_ref();
                            g.iter()
                                .zip(y.iter())
                                .map(|(&gv, &yv)| gv * yv * (T::ONE - yv))
                                .collect()
                        }
                    };
                    add_grad(grads, a, da);
                }
            }

            Op::Matmul { a, b } => self.matmul_backward(a, b, g, grads),

            Op::Softmax { a, axis } => {
                if a.requires_grad() {
                    let y = out.data_ref();
                    let (_outer, len, inner) = kernels::axis_split(out.shape(), *axis);
                    let mut dx = vec![T::ZERO; y.len()];
                    exec::for_each_chunk(&mut dx, len * inner, |o, block| {
                        let base = o * len * inner;
                        for i in 0..inner {
                            let mut dot = T::ZERO;
                            for l in 0..len {
                                let idx = base + l * inner + i;
                                dot = dot + g[idx] * y[idx];
                            }
                            for l in 0..len {
                                let idx = base + l * inner + i;
                                block[l * inner + i] = y[idx] * (g[idx] - dot);
                            }
                        }
                    });
                    drop(y);
                    add_grad(grads, a, dx);
                }
            }

            Op::StdAll { a, batch_axes } => {
                if a.requires_grad() {
                    let x = a.data_ref();
                    let sigma = out.data_ref();
                    let n_slices = sigma.len();
                    let reduced = x.len() / n_slices;
                    let slice_of = super::ops::slice_index_fn(a.shape(), batch_axes);
                    let (means, anchors) =
                        super::ops::shifted_slice_means(&x, n_slices, reduced, &slice_of);
                    let inv_n = T::ONE / T::from_f64(reduced as f64);
                    let dx: Vec<T> = x
                        .iter()
                        .enumerate()
                        .map(|(i, &v)| {
                            let s = slice_of(i);
                            g[s] * ((v - anchors[s]) - means[s]) * inv_n / sigma[s]
                        })
                        .collect();
                    drop(x);
                    drop(sigma);
                    add_grad(grads, a, dx);
                }
            }

            Op::Conv2d { x, w, b, stride, padding } => {
                let (batch, c_in, h, width) = dims4(x.shape());
                let (c_out, _, kernel, _) = dims4(w.shape());
                let (_, _, out_h, out_w) = dims4(out.shape());
                let dims = Conv2dDims {
                    batch,
                    c_in,
                    h,
                    w: width,
                    c_out,
                    kernel,
                    stride: *stride,
                    padding: *padding,
                    out_h,
                    out_w,
                };
                if x.requires_grad() {
                    let wt = w.data_ref();
                    let mut dx = vec![T::ZERO; x.numel()];
                    kernels::conv2d_backward_x(g, &wt, &mut dx, dims);
                    drop(wt);
                    add_grad(grads, x, dx);
                }
                if w.requires_grad() {
                    let xd = x.data_ref();
                    let mut dw = vec![T::ZERO; w.numel()];
                    kernels::conv2d_backward_w(g, &xd, &mut dw, dims);
                    drop(xd);
                    add_grad(grads, w, dw);
                }
                if let Some(bias) = b {
                    if bias.requires_grad() {
                        add_grad(grads, bias, kernels::conv2d_backward_bias(g, dims));
                    }
                }
            }

            Op::Linear { x, w, b } => {
                let (batch, dim_in) = (x.shape()[0], x.shape()[1]);
                let dim_out = w.shape()[0];
                if x.requires_grad() {
                    let wt = w.data_ref();
                    let mut dx = vec![T::ZERO; batch * dim_in];
                    // dx = g . w   ([B,out] x [out,in])
                    kernels::mm_nn(g, &wt, &mut dx, batch, dim_out, dim_in);
                    drop(wt);
                    add_grad(grads, x, dx);
                }
                if w.requires_grad() {
                    let xd = x.data_ref();
                    let mut dw = vec![T::ZERO; dim_out * dim_in];
                    // dw = g^T . x  ([out,B] x [B,in])
                    kernels::mm_tn(g, &xd, &mut dw, dim_out, batch, dim_in);
                    drop(xd);
                    add_grad(grads, w, dw);
                }
                if let Some(bias) = b {
                    if bias.requires_grad() {
                        let mut db = vec![T::ZERO; dim_out];
                        for row in g.chunks(dim_out) {
                            for (acc, &gv) in db.iter_mut().zip(row) {
                                *acc = *acc + gv;
                            }
                        }
                        add_grad(grads, bias, db);
                    }
                }
            }

            Op::AvgPool2d { x, kernel, stride } => {
                if x.requires_grad() {
                    let (_, _, h, w) = dims4(x.shape());
                    let (_, _, out_h, out_w) = dims4(out.shape());
                    let inv = T::ONE / T::from_f64((kernel * kernel) as f64);
                    let mut dx = vec![T::ZERO; x.numel()];
                    let (k, s) = (*kernel, *stride);
                    exec::for_each_chunk(&mut dx, h * w, |plane_idx, plane| {
                        let g_plane = plane_idx * out_h * out_w;
                        for ih in 0..h {
                            let oh_min = ih.saturating_sub(k - 1).div_ceil(s);
                            let oh_max = (ih / s).min(out_h.saturating_sub(1));
                            for iw in 0..w {
                                let ow_min = iw.saturating_sub(k - 1).div_ceil(s);
                                let ow_max = (iw / s).min(out_w.saturating_sub(1));
                                let mut acc = T::ZERO;
                                let mut oh = oh_min;
                                while oh <= oh_max && oh < out_h {
                                    if ih >= oh * s && ih < oh * s + k {
                                        let mut ow = ow_min;
                                        while ow <= ow_max && ow < out_w {
                                            if iw >= ow * s && iw < ow * s + k {
                                                acc = acc + g[g_plane + oh * out_w + ow];
                                            }
                                            ow += 1;
                                        }
                                    }
                                    oh += 1;
                                }
                                plane[ih * w + iw] = acc * inv;
                            }
                        }
                    });
                    add_grad(grads, x, dx);
                }
            }

            Op::ReduceMean { a, axes, .. } => {
                if a.requires_grad() {
                    let count: usize = axes.iter().map(|&ax| a.shape()[ax]).product();
                    let inv = T::ONE / T::from_f64(count as f64);
                    // the keep=false grad has the same flat layout as the
                    // keep=true grad, so broadcast from the keep-dims shape
                    let keep_shape: Vec<usize> = (0..a.rank())
                        .map(|d| if axes.contains(&d) { 1 } else { a.shape()[d] })
                        .collect();
                    let expanded = kernels::expand_to(g, &keep_shape, a.shape());
                    add_grad(grads, a, expanded.iter().map(|&v| v * inv).collect());
                }
            }

            Op::SumAll { a } => {
                if a.requires_grad() {
                    add_grad(grads, a, vec![g[0]; a.numel()]);
                }
            }

            Op::Reshape { a } => {
                if a.requires_grad() {
                    add_grad(grads, a, g.to_vec());
                }
            }

            Op::Permute { a, perm } => {
                if a.requires_grad() {
                    let inv = kernels::invert_perm(perm);
                    add_grad(grads, a, kernels::permute_copy(g, out.shape(), &inv));
                }
            }

            Op::Concat { parts, axis } => {
                let (outer, _, inner) = kernels::axis_split(out.shape(), *axis);
                let total_axis = out.shape()[*axis];
                let mut offset = 0usize;
                for p in parts {
                    let len = p.shape()[*axis];
                    if p.requires_grad() {
                        let mut dp = Vec::with_capacity(p.numel());
                        for o in 0..outer {
                            let start = (o * total_axis + offset) * inner;
                            dp.extend_from_slice(&g[start..start + len * inner]);
                        }
                        add_grad(grads, p, dp);
                    }
                    offset += len;
                }
            }

            Op::Dropout { a, mask } => {
                if a.requires_grad() {
                    add_grad(
                        grads,
                        a,
                        g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect(),
                    );
                }
            }

            Op::PixelShuffle { a, factor } => {
                if a.requires_grad() {
                    let (b, c, oh, ow) = dims4(out.shape());
                    add_grad(
                        grads,
                        a,
                        kernels::pixel_unshuffle(g, b, c, oh / factor, ow / factor, *factor),
                    );
                }
            }

            Op::PixelUnshuffle { a, factor } => {
                if a.requires_grad() {
                    let (b, c_r2, oh, ow) = dims4(out.shape());
                    let c = c_r2 / (factor * factor);
                    add_grad(grads, a, kernels::pixel_shuffle(g, b, c, oh, ow, *factor));
                }
            }

            Op::ChannelShuffle { a, groups } => {
                if a.requires_grad() {
                    let (b, c, h, w) = dims4(a.shape());
                    // the inverse of interleaving g groups is interleaving c/g
                    add_grad(
                        grads,
                        a,
                        kernels::channel_shuffle(g, b, c, h * w, c / groups),
                    );
                }
            }
        }
        Ok(())
    }

    fn matmul_backward(
        &self,
        a: &Tensor<T>,
        b: &Tensor<T>,
        g: &[T],
        grads: &mut HashMap<usize, Vec<T>>,
    ) {
        let (la, lb) = (a.rank(), b.rank());
        let (m, k) = (a.shape()[la - 2], a.shape()[la - 1]);
        let n = b.shape()[lb - 1];
        let batch = if la == 3 {
            a.shape()[0]
        } else if lb == 3 {
            b.shape()[0]
        } else {
            1
        };
        let a_batched = la == 3;
        let b_batched = lb == 3;
        if a.requires_grad() {
            let bd = b.data_ref();
            let mut da = vec![T::ZERO; a.numel()];
            if a_batched {
                exec::for_each_chunk(&mut da, m * k, |i, slice| {
                    let b_off = if b_batched { i * k * n } else { 0 };
                    kernels::mm_nt(&g[i * m * n..(i + 1) * m * n], &bd[b_off..b_off + k * n], slice, m, n, k);
                });
            } else {
                // a shared across the batch: sum contributions in batch order
                for i in 0..batch {
                    let b_off = if b_batched { i * k * n } else { 0 };
                    kernels::mm_nt(&g[i * m * n..(i + 1) * m * n], &bd[b_off..b_off + k * n], &mut da, m, n, k);
                }
            }
            drop(bd);
            add_grad(grads, a, da);
        }
        if b.requires_grad() {
            let ad = a.data_ref();
            let mut db = vec![T::ZERO; b.numel()];
            if b_batched {
                exec::for_each_chunk(&mut db, k * n, |i, slice| {
                    let a_off = if a_batched { i * m * k } else { 0 };
                    kernels::mm_tn(&ad[a_off..a_off + m * k], &g[i * m * n..(i + 1) * m * n], slice, k, m, n);
                });
            } else {
                for i in 0..batch {
                    let a_off = if a_batched { i * m * k } else { 0 };
                    kernels::mm_tn(&ad[a_off..a_off + m * k], &g[i * m * n..(i + 1) * m * n], &mut db, k, m, n);
                }
            }
            drop(ad);
            add_grad(grads, b, db);
        }
    }
}

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    (shape[0], shape[1], shape[2], shape[3])
}
