//! Raw numeric kernels shared by the forward and backward passes.
//!
//! Every kernel writes disjoint output regions with a fixed inner
//! accumulation order, so the parallel and sequential drivers in
//! [`crate::exec`] produce bitwise-identical results.

use crate::exec;
use crate::scalar::Scalar;

/// NumPy-style broadcast of two shapes; `None` when incompatible.
pub(crate) fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return None;
        }
    }
    Some(out)
}

/// Left-pad `shape` with ones to `rank` dimensions.
fn pad_shape(shape: &[usize], rank: usize) -> Vec<usize> {
    let mut padded = vec![1usize; rank];
    padded[rank - shape.len()..].copy_from_slice(shape);
    padded
}

/// Flat index into `shape` for the coordinates of `flat` in `out_shape`,
/// treating size-1 axes of `shape` as broadcast.
#[inline]
fn broadcast_source_index(flat: usize, out_shape: &[usize], padded: &[usize]) -> usize {
    let mut rem = flat;
    let mut src = 0usize;
    let mut stride = 1usize;
    for d in (0..out_shape.len()).rev() {
        let coord = rem % out_shape[d];
        rem /= out_shape[d];
        let c = if padded[d] == 1 { 0 } else { coord };
        src += c * stride;
        stride *= padded[d];
    }
    src
}

/// When `small` (padded to `out`'s rank) equals `out` on a leading
/// prefix and is 1 everywhere after, each small element covers one
/// contiguous block; returns that block length.
fn leading_block(out_shape: &[usize], padded_small: &[usize]) -> Option<usize> {
    let mut split = out_shape.len();
    for (d, (&o, &s)) in out_shape.iter().zip(padded_small).enumerate() {
        if s != o {
            split = d;
            break;
        }
    }
    if padded_small[split..].iter().all(|&s| s == 1) {
        Some(out_shape[split..].iter().product())
    } else {
        None
    }
}

/// Expand `data` of `shape` to `out_shape` by repeating broadcast axes.
pub(crate) fn expand_to<T: Scalar>(data: &[T], shape: &[usize], out_shape: &[usize]) -> Vec<T> {
    if shape == out_shape {
        return data.to_vec();
    }
    let padded = pad_shape(shape, out_shape.len());
    let numel: usize = out_shape.iter().product();
    if let Some(block) = leading_block(out_shape, &padded) {
        let mut out = Vec::with_capacity(numel);
        for &v in data {
            out.extend(std::iter::repeat_n(v, block));
        }
        return out;
    }
    (0..numel)
        .map(|i| data[broadcast_source_index(i, out_shape, &padded)])
        .collect()
}

/// Sum `grad` of `grad_shape` down to `target_shape` (inverse of broadcast).
pub(crate) fn reduce_to_shape<T: Scalar>(
    grad: &[T],
    grad_shape: &[usize],
    target_shape: &[usize],
) -> Vec<T> {
    if grad_shape == target_shape {
        return grad.to_vec();
    }
    let padded = pad_shape(target_shape, grad_shape.len());
    let target_numel: usize = target_shape.iter().product();
    if let Some(block) = leading_block(grad_shape, &padded) {
        return grad
            .chunks_exact(block)
            .map(|c| {
                let mut acc = T::ZERO;
                for &g in c {
                    acc = acc + g;
                }
                acc
            })
            .collect();
    }
    let mut out = vec![T::ZERO; target_numel];
    for (i, &g) in grad.iter().enumerate() {
        let dst = broadcast_source_index(i, grad_shape, &padded);
        out[dst] = out[dst] + g;
    }
    out
}

// Matrix micro-kernels on contiguous slices; all ACCUMULATE into `out`,
// which callers zero beforehand. a is m x k, b is k x n unless a `_t`
// suffix marks the operand as stored transposed. Inner loops run over
// contiguous memory so they vectorize.

pub(crate) fn mm_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// out[m,n] += a_t[k,m]^T . b[k,n]
pub(crate) fn mm_tn<T: Scalar>(a_t: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let arow = &a_t[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// out[m,n] += a[m,k] . b_t[n,k]^T
pub(crate) fn mm_nt<T: Scalar>(a: &[T], b_t: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b_t[j * k..(j + 1) * k];
            let mut acc = T::ZERO;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc = acc + av * bv;
            }
            out[i * n + j] = out[i * n + j] + acc;
        }
    }
}

/// Output spatial extent of a conv/pool window: floor((in + 2p - k)/s) + 1.
pub(crate) fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if kernel == 0 || stride == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Range of output positions `o` with 0 <= o*stride + k - padding < input.
#[inline]
fn valid_out_range(input: usize, k: usize, stride: usize, padding: usize, out: usize) -> (usize, usize) {
    // o >= ceil((padding - k) / stride)
    let lo = padding.saturating_sub(k).div_ceil(stride);
    // o*stride + k - padding <= input - 1
    let hi = match (input + padding).checked_sub(k + 1) {
        Some(v) => ((v / stride) + 1).min(out),
        None => 0,
    };
    (lo.min(hi), hi)
}

/// Cross-correlation forward. x: [B,Ci,H,W], w: [Co,Ci,K,K], bias: [Co].
/// Kernel positions sit in the outer loops so the inner width loop is a
/// branch-free multiply-accumulate over contiguous rows.
pub(crate) fn conv2d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    out: &mut [T],
    dims: Conv2dDims,
) {
    let Conv2dDims { c_in, h, w: width, c_out, kernel, stride, padding, out_h, out_w, .. } = dims;
    exec::for_each_chunk(out, out_h * out_w, |chunk_idx, plane| {
        let b = chunk_idx / c_out;
        let co = chunk_idx % c_out;
        let base = bias.map_or(T::ZERO, |bv| bv[co]);
        plane.fill(base);
        for ci in 0..c_in {
            let x_plane = (b * c_in + ci) * h * width;
            let w_plane = (co * c_in + ci) * kernel * kernel;
            for kh in 0..kernel {
                let (oh_lo, oh_hi) = valid_out_range(h, kh, stride, padding, out_h);
                for kw in 0..kernel {
                    let wv = w[w_plane + kh * kernel + kw];
                    let (ow_lo, ow_hi) = valid_out_range(width, kw, stride, padding, out_w);
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    for oh in oh_lo..oh_hi {
                        let ih = oh * stride + kh - padding;
                        let xrow = &x[x_plane + ih * width..x_plane + (ih + 1) * width];
                        let orow = &mut plane[oh * out_w + ow_lo..oh * out_w + ow_hi];
                        if stride == 1 {
                            let xs = &xrow[ow_lo + kw - padding..ow_hi + kw - padding];
                            for (o, &xv) in orow.iter_mut().zip(xs) {
                                *o = *o + wv * xv;
                            }
                        } else {
                            for (i, o) in orow.iter_mut().enumerate() {
                                let iw = (ow_lo + i) * stride + kw - padding;
                                *o = *o + wv * xrow[iw];
                            }
                        }
                    }
                }
            }
        }
    });
}

#[derive(Clone, Copy)]
pub(crate) struct Conv2dDims {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Gradient w.r.t. the conv input: scatter each output-grad row through
/// the kernel taps into the input plane (per (b, ci) chunk).
pub(crate) fn conv2d_backward_x<T: Scalar>(g: &[T], w: &[T], dx: &mut [T], dims: Conv2dDims) {
    let Conv2dDims { c_in, h, w: width, c_out, kernel, stride, padding, out_h, out_w, .. } = dims;
    exec::for_each_chunk(dx, h * width, |chunk_idx, plane| {
        let b = chunk_idx / c_in;
        let ci = chunk_idx % c_in;
        plane.fill(T::ZERO);
        for co in 0..c_out {
            let g_plane = (b * c_out + co) * out_h * out_w;
            let w_plane = (co * c_in + ci) * kernel * kernel;
            for kh in 0..kernel {
                let (oh_lo, oh_hi) = valid_out_range(h, kh, stride, padding, out_h);
                for kw in 0..kernel {
                    let wv = w[w_plane + kh * kernel + kw];
                    let (ow_lo, ow_hi) = valid_out_range(width, kw, stride, padding, out_w);
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    for oh in oh_lo..oh_hi {
                        let ih = oh * stride + kh - padding;
                        let grow = &g[g_plane + oh * out_w + ow_lo..g_plane + oh * out_w + ow_hi];
                        if stride == 1 {
                            let start = ih * width + ow_lo + kw - padding;
                            let drow = &mut plane[start..start + (ow_hi - ow_lo)];
                            for (d, &gv) in drow.iter_mut().zip(grow) {
                                *d = *d + wv * gv;
                            }
                        } else {
                            for (i, &gv) in grow.iter().enumerate() {
                                let iw = (ow_lo + i) * stride + kw - padding;
                                plane[ih * width + iw] = plane[ih * width + iw] + wv * gv;
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Gradient w.r.t. the conv weights: per-(co, ci) dot products of the
/// output-grad rows with the shifted input rows.
pub(crate) fn conv2d_backward_w<T: Scalar>(g: &[T], x: &[T], dw: &mut [T], dims: Conv2dDims) {
    let Conv2dDims { batch, c_in, h, w: width, c_out, kernel, stride, padding, out_h, out_w } = dims;
    exec::for_each_chunk(dw, kernel * kernel, |chunk_idx, patch| {
        let co = chunk_idx / c_in;
        let ci = chunk_idx % c_in;
        for kh in 0..kernel {
            let (oh_lo, oh_hi) = valid_out_range(h, kh, stride, padding, out_h);
            for kw in 0..kernel {
                let (ow_lo, ow_hi) = valid_out_range(width, kw, stride, padding, out_w);
                let mut acc = T::ZERO;
                for b in 0..batch {
                    let g_plane = (b * c_out + co) * out_h * out_w;
                    let x_plane = (b * c_in + ci) * h * width;
                    for oh in oh_lo..oh_hi {
                        let ih = oh * stride + kh - padding;
                        let grow = &g[g_plane + oh * out_w + ow_lo..g_plane + oh * out_w + ow_hi];
                        if stride == 1 {
                            let start = x_plane + ih * width + ow_lo + kw - padding;
                            let xs = &x[start..start + (ow_hi - ow_lo)];
                            for (&gv, &xv) in grow.iter().zip(xs) {
                                acc = acc + gv * xv;
                            }
                        } else {
                            for (i, &gv) in grow.iter().enumerate() {
                                let iw = (ow_lo + i) * stride + kw - padding;
                                acc = acc + gv * x[x_plane + ih * width + iw];
                            }
                        }
                    }
                }
                patch[kh * kernel + kw] = acc;
            }
        }
    });
}

pub(crate) fn conv2d_backward_bias<T: Scalar>(g: &[T], dims: Conv2dDims) -> Vec<T> {
    let Conv2dDims { batch, c_out, out_h, out_w, .. } = dims;
    let mut db = vec![T::ZERO; c_out];
    for b in 0..batch {
        for (co, dbv) in db.iter_mut().enumerate() {
            let plane = (b * c_out + co) * out_h * out_w;
            let mut acc = T::ZERO;
            for i in 0..out_h * out_w {
                acc = acc + g[plane + i];
            }
            *dbv = *dbv + acc;
        }
    }
    db
}

/// Move channel blocks of size r*r into 2x2... spatial positions:
/// [B, C*r^2, H, W] -> [B, C, H*r, W*r].
pub(crate) fn pixel_shuffle<T: Scalar>(
    x: &[T],
    batch: usize,
    c_out: usize,
    h: usize,
    w: usize,
    r: usize,
) -> Vec<T> {
    let mut out = vec![T::ZERO; x.len()];
    let oh = h * r;
    let ow = w * r;
    for b in 0..batch {
        for c in 0..c_out {
            for y in 0..h {
                for x_pos in 0..w {
                    for i in 0..r {
                        for j in 0..r {
                            let src = (((b * c_out + c) * r * r + i * r + j) * h + y) * w + x_pos;
                            let dst = ((b * c_out + c) * oh + y * r + i) * ow + x_pos * r + j;
                            out[dst] = x[src];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`pixel_shuffle`]: [B, C, H*r, W*r] -> [B, C*r^2, H, W].
pub(crate) fn pixel_unshuffle<T: Scalar>(
    x: &[T],
    batch: usize,
    c_in: usize,
    h_out: usize,
    w_out: usize,
    r: usize,
) -> Vec<T> {
    let mut out = vec![T::ZERO; x.len()];
    let ih = h_out * r;
    let iw = w_out * r;
    for b in 0..batch {
        for c in 0..c_in {
            for y in 0..h_out {
                for x_pos in 0..w_out {
                    for i in 0..r {
                        for j in 0..r {
                            let src = ((b * c_in + c) * ih + y * r + i) * iw + x_pos * r + j;
                            let dst = (((b * c_in + c) * r * r + i * r + j) * h_out + y) * w_out + x_pos;
                            out[dst] = x[src];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Interleave channel groups: [B, g, n, H, W] view -> [B, n, g, H, W].
pub(crate) fn channel_shuffle<T: Scalar>(
    x: &[T],
    batch: usize,
    channels: usize,
    plane: usize,
    groups: usize,
) -> Vec<T> {
    let per_group = channels / groups;
    let mut out = vec![T::ZERO; x.len()];
    for b in 0..batch {
        for g in 0..groups {
            for n in 0..per_group {
                let src = ((b * channels) + g * per_group + n) * plane;
                let dst = ((b * channels) + n * groups + g) * plane;
                out[dst..dst + plane].copy_from_slice(&x[src..src + plane]);
            }
        }
    }
    out
}

/// Copy with permuted axes. Ranks 3 and 4 run as nested loops; other
/// ranks fall back to per-element coordinate arithmetic.
pub(crate) fn permute_copy<T: Scalar>(x: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let numel: usize = shape.iter().product();
    let mut out = Vec::with_capacity(numel);
    match rank {
        3 => {
            let (s0, s1, s2) = (out_shape[0], out_shape[1], out_shape[2]);
            let (t0, t1, t2) = (in_strides[perm[0]], in_strides[perm[1]], in_strides[perm[2]]);
            for i0 in 0..s0 {
                for i1 in 0..s1 {
                    let base = i0 * t0 + i1 * t1;
                    for i2 in 0..s2 {
                        out.push(x[base + i2 * t2]);
                    }
                }
            }
        }
        4 => {
            let (s0, s1, s2, s3) = (out_shape[0], out_shape[1], out_shape[2], out_shape[3]);
            let (t0, t1, t2, t3) = (
                in_strides[perm[0]],
                in_strides[perm[1]],
                in_strides[perm[2]],
                in_strides[perm[3]],
            );
            for i0 in 0..s0 {
                for i1 in 0..s1 {
                    for i2 in 0..s2 {
                        let base = i0 * t0 + i1 * t1 + i2 * t2;
                        for i3 in 0..s3 {
                            out.push(x[base + i3 * t3]);
                        }
                    }
                }
            }
        }
        _ => {
            for flat in 0..numel {
                let mut rem = flat;
                let mut src = 0usize;
                for d in (0..rank).rev() {
                    let coord = rem % out_shape[d];
                    rem /= out_shape[d];
                    src += coord * in_strides[perm[d]];
                }
                out.push(x[src]);
            }
        }
    }
    out
}

/// Inverse permutation: inv[perm[i]] = i.
pub(crate) fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Decompose a shape around one axis into (outer, len, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shapes(&[3, 1], &[1, 4]), Some(vec![3, 4]));
        assert_eq!(broadcast_shapes(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shapes(&[], &[2, 2]), Some(vec![2, 2]));
        assert_eq!(broadcast_shapes(&[2], &[3]), None);
    }

    #[test]
    fn expand_and_reduce_round_trip_sum() {
        let g = vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let reduced = reduce_to_shape(&g, &[2, 3], &[1, 3]);
        assert_eq!(reduced, vec![5.0, 7.0, 9.0]);
        let expanded = expand_to(&[1.0f64, 2.0, 3.0], &[1, 3], &[2, 3]);
        assert_eq!(expanded, vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn pixel_shuffle_inverts_unshuffle() {
        let x: Vec<f64> = (0..64).map(|v| v as f64).collect();
        let un = pixel_unshuffle(&x, 1, 1, 4, 4, 2); // [1,1,8,8] -> [1,4,4,4]
        let back = pixel_shuffle(&un, 1, 1, 4, 4, 2);
        assert_eq!(back, x);
    }

    #[test]
    fn channel_shuffle_with_complementary_groups_is_identity() {
        let x: Vec<f64> = (0..24).map(|v| v as f64).collect(); // [1,8,3] planes of 3
        let once = channel_shuffle(&x, 1, 8, 3, 4);
        let back = channel_shuffle(&once, 1, 8, 3, 2);
        assert_eq!(back, x);
    }
}
