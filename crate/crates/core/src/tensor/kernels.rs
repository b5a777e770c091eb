//! Raw compute kernels behind the tape operations.
//!
//! Kernels parallelise only over independent output slots, so each output
//! element is produced by one fixed-order sequential accumulation —
//! results are bitwise identical regardless of thread count. Inner loops
//! run over contiguous slice windows to keep them vectorisable.

use super::Scalar;
use crate::par;

/// Shape bookkeeping for conv2d.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvDims {
    pub fn out_spatial(in_size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = in_size + 2 * pad;
        if padded < k {
            return None;
        }
        Some((padded - k) / stride + 1)
    }
}

/// Output rows `oh` for which `oh * stride + k - pad` lands inside
/// `[0, in_size)`.
fn valid_out_range(d_in: usize, k: usize, stride: usize, pad: usize, d_out: usize) -> (usize, usize) {
    // oh * stride + k - pad >= 0  =>  oh >= ceil((pad - k) / stride)
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    // oh * stride + k - pad < in  =>  oh <= floor((in - 1 + pad - k) / stride)
    let hi_num = d_in + pad;
    let hi = if hi_num > k { ((hi_num - 1 - k) / stride + 1).min(d_out) } else { 0 };
    (lo.min(d_out), hi)
}

pub fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], b: Option<&[T]>, d: ConvDims, out: &mut [T]) {
    let out_plane = d.out_h * d.out_w;
    let in_plane = d.in_h * d.in_w;
    par::for_each_chunk(out, out_plane, |idx, o| {
        let batch = idx / d.out_ch;
        let oc = idx % d.out_ch;
        let bias = b.map_or(T::zero(), |b| b[oc]);
        o.iter_mut().for_each(|v| *v = bias);
        for ic in 0..d.in_ch {
            let x_plane = &x[(batch * d.in_ch + ic) * in_plane..][..in_plane];
            let w_base = ((oc * d.in_ch + ic) * d.k_h) * d.k_w;
            for kh in 0..d.k_h {
                for kw in 0..d.k_w {
                    let wv = w[w_base + kh * d.k_w + kw];
                    let (oh0, oh1) = valid_out_range(d.in_h, kh, d.stride, d.pad, d.out_h);
                    let (ow0, ow1) = valid_out_range(d.in_w, kw, d.stride, d.pad, d.out_w);
                    if ow0 >= ow1 {
                        continue;
                    }
                    for oh in oh0..oh1 {
                        let ih = oh * d.stride + kh - d.pad;
                        let x_row = &x_plane[ih * d.in_w..][..d.in_w];
                        let o_row = &mut o[oh * d.out_w + ow0..oh * d.out_w + ow1];
                        if d.stride == 1 {
                            let x_win = &x_row[ow0 + kw - d.pad..][..ow1 - ow0];
                            for (ov, &xv) in o_row.iter_mut().zip(x_win) {
                                *ov = *ov + wv * xv;
                            }
                        } else {
                            for (j, ov) in o_row.iter_mut().enumerate() {
                                let iw = (ow0 + j) * d.stride + kw - d.pad;
                                *ov = *ov + wv * x_row[iw];
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Gradient w.r.t. the conv input: `gx[ih, iw] += gout[oh, ow] * w` over
/// the same windows as the forward pass, parallel over `(batch, in_ch)`.
pub fn conv2d_backward_input<T: Scalar>(gout: &[T], w: &[T], d: ConvDims, gx: &mut [T]) {
    let in_plane = d.in_h * d.in_w;
    let out_plane = d.out_h * d.out_w;
    par::for_each_chunk(gx, in_plane, |idx, g| {
        let batch = idx / d.in_ch;
        let ic = idx % d.in_ch;
        for oc in 0..d.out_ch {
            let g_plane = &gout[(batch * d.out_ch + oc) * out_plane..][..out_plane];
            let w_base = ((oc * d.in_ch + ic) * d.k_h) * d.k_w;
            for kh in 0..d.k_h {
                for kw in 0..d.k_w {
                    let wv = w[w_base + kh * d.k_w + kw];
                    let (oh0, oh1) = valid_out_range(d.in_h, kh, d.stride, d.pad, d.out_h);
                    let (ow0, ow1) = valid_out_range(d.in_w, kw, d.stride, d.pad, d.out_w);
                    for oh in oh0..oh1 {
                        let ih = oh * d.stride + kh - d.pad;
                        let g_row = &g_plane[oh * d.out_w..][..d.out_w];
                        if d.stride == 1 {
                            let gx_row = &mut g[ih * d.in_w + ow0 + kw - d.pad..][..ow1 - ow0];
                            let g_win = &g_row[ow0..ow1];
                            for (gv, &ov) in gx_row.iter_mut().zip(g_win) {
                                *gv = *gv + wv * ov;
                            }
                        } else {
                            for (ow, &gv) in g_row.iter().enumerate().take(ow1).skip(ow0) {
                                let iw = ow * d.stride + kw - d.pad;
                                g[ih * d.in_w + iw] = g[ih * d.in_w + iw] + wv * gv;
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Gradient w.r.t. the conv weights, parallel over output channels.
pub fn conv2d_backward_weight<T: Scalar>(gout: &[T], x: &[T], d: ConvDims, gw: &mut [T]) {
    let filt = d.in_ch * d.k_h * d.k_w;
    let out_plane = d.out_h * d.out_w;
    let in_plane = d.in_h * d.in_w;
    par::for_each_chunk(gw, filt, |oc, g| {
        for batch in 0..d.batch {
            let g_plane = &gout[(batch * d.out_ch + oc) * out_plane..][..out_plane];
            for ic in 0..d.in_ch {
                let x_plane = &x[(batch * d.in_ch + ic) * in_plane..][..in_plane];
                for kh in 0..d.k_h {
                    for kw in 0..d.k_w {
                        let (oh0, oh1) = valid_out_range(d.in_h, kh, d.stride, d.pad, d.out_h);
                        let (ow0, ow1) = valid_out_range(d.in_w, kw, d.stride, d.pad, d.out_w);
                        if ow0 >= ow1 {
                            continue;
                        }
                        let mut acc = T::zero();
                        for oh in oh0..oh1 {
                            let ih = oh * d.stride + kh - d.pad;
                            let g_row = &g_plane[oh * d.out_w + ow0..oh * d.out_w + ow1];
                            if d.stride == 1 {
                                let x_win = &x_plane[ih * d.in_w + ow0 + kw - d.pad..][..ow1 - ow0];
                                for (&gv, &xv) in g_row.iter().zip(x_win) {
                                    acc = acc + gv * xv;
                                }
                            } else {
                                let x_row = &x_plane[ih * d.in_w..][..d.in_w];
                                for (j, &gv) in g_row.iter().enumerate() {
                                    let iw = (ow0 + j) * d.stride + kw - d.pad;
                                    acc = acc + gv * x_row[iw];
                                }
                            }
                        }
                        let slot = (ic * d.k_h + kh) * d.k_w + kw;
                        g[slot] = g[slot] + acc;
                    }
                }
            }
        }
    });
}

pub fn conv2d_backward_bias<T: Scalar>(gout: &[T], d: ConvDims, gb: &mut [T]) {
    let out_plane = d.out_h * d.out_w;
    par::for_each_chunk(gb, 1, |oc, g| {
        let mut acc = T::zero();
        for batch in 0..d.batch {
            let base = (batch * d.out_ch + oc) * out_plane;
            for v in &gout[base..base + out_plane] {
                acc = acc + *v;
            }
        }
        g[0] = g[0] + acc;
    });
}

/// out[r, j] = sum_k a[r, k] * b[k, j] (or b[j, k] when `transpose_b`).
pub fn matmul<T: Scalar>(
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    transpose_b: bool,
    out: &mut [T],
) {
    debug_assert_eq!(out.len(), m * n);
    par::for_each_chunk(out, n, |r, row| {
        let a_row = &a[r * k..(r + 1) * k];
        if transpose_b {
            for (j, o) in row.iter_mut().enumerate() {
                let b_row = &b[j * k..(j + 1) * k];
                let mut acc = T::zero();
                for (&av, &bv) in a_row.iter().zip(b_row) {
                    acc = acc + av * bv;
                }
                *o = acc;
            }
        } else {
            row.iter_mut().for_each(|o| *o = T::zero());
            for (i, &av) in a_row.iter().enumerate() {
                let b_row = &b[i * n..(i + 1) * n];
                for (o, &bv) in row.iter_mut().zip(b_row) {
                    *o = *o + av * bv;
                }
            }
        }
    });
}

/// out[b, o] = bias[o] + sum_i x[b, i] * w[o, i]
pub fn linear_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
    batch: usize,
    in_dim: usize,
    out_dim: usize,
    out: &mut [T],
) {
    debug_assert_eq!(out.len(), batch * out_dim);
    par::for_each_chunk(out, out_dim, |r, row| {
        let x_row = &x[r * in_dim..(r + 1) * in_dim];
        for (o, slot) in row.iter_mut().enumerate() {
            let w_row = &w[o * in_dim..(o + 1) * in_dim];
            let mut acc = b.map_or(T::zero(), |b| b[o]);
            for (&xv, &wv) in x_row.iter().zip(w_row) {
                acc = acc + xv * wv;
            }
            *slot = acc;
        }
    });
}

/// Population mean and inverse standard deviation over each normalisation
/// group of `x`; writes the normalised output.
#[allow(clippy::too_many_arguments)]
pub fn group_norm_forward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    batch: usize,
    channels: usize,
    plane: usize,
    groups: usize,
    eps: f64,
    out: &mut [T],
    saved_mean: &mut [T],
    saved_inv_std: &mut [T],
) {
    let ch_per_group = channels / groups;
    let group_len = ch_per_group * plane;
    let stats: Vec<(T, T)> = par::map_indexed(batch * groups, |idx| {
        let slice = &x[idx * group_len..][..group_len];
        let mut sum = T::zero();
        for &v in slice {
            sum = sum + v;
        }
        let mean = sum / T::from_f64(group_len as f64);
        let mut var = T::zero();
        for &v in slice {
            let d = v - mean;
            var = var + d * d;
        }
        var = var / T::from_f64(group_len as f64);
        let inv_std = T::one() / (var + T::from_f64(eps)).sqrt();
        (mean, inv_std)
    });
    for (i, (m, s)) in stats.iter().enumerate() {
        saved_mean[i] = *m;
        saved_inv_std[i] = *s;
    }
    par::for_each_chunk(out, group_len, |idx, o| {
        let (mean, inv_std) = stats[idx];
        let g = idx % groups;
        let base = idx * group_len;
        for c in 0..ch_per_group {
            let ch = g * ch_per_group + c;
            let scale = gamma[ch] * inv_std;
            let shift = beta[ch] - mean * scale;
            let x_row = &x[base + c * plane..][..plane];
            let o_row = &mut o[c * plane..(c + 1) * plane];
            for (ov, &xv) in o_row.iter_mut().zip(x_row) {
                *ov = scale * xv + shift;
            }
        }
    });
}

#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward<T: Scalar>(
    gout: &[T],
    x: &[T],
    gamma: &[T],
    saved_mean: &[T],
    saved_inv_std: &[T],
    batch: usize,
    channels: usize,
    plane: usize,
    groups: usize,
    gx: &mut [T],
    g_gamma: &mut [T],
    g_beta: &mut [T],
) {
    let ch_per_group = channels / groups;
    let group_len = ch_per_group * plane;

    // Input gradient: standard normalisation VJP per group.
    par::for_each_chunk(gx, group_len, |idx, g| {
        let mean = saved_mean[idx];
        let inv_std = saved_inv_std[idx];
        let grp = idx % groups;
        let base = idx * group_len;
        let inv_n = T::one() / T::from_f64(group_len as f64);
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for c in 0..ch_per_group {
            let gamma_c = gamma[grp * ch_per_group + c];
            let x_row = &x[base + c * plane..][..plane];
            let go_row = &gout[base + c * plane..][..plane];
            for (&xv, &gv) in x_row.iter().zip(go_row) {
                let xhat = (xv - mean) * inv_std;
                let dxhat = gv * gamma_c;
                sum_dxhat = sum_dxhat + dxhat;
                sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
            }
        }
        let mean_dxhat = sum_dxhat * inv_n;
        let mean_dxhat_xhat = sum_dxhat_xhat * inv_n;
        for c in 0..ch_per_group {
            let gamma_c = gamma[grp * ch_per_group + c];
            let x_row = &x[base + c * plane..][..plane];
            let go_row = &gout[base + c * plane..][..plane];
            let g_row = &mut g[c * plane..(c + 1) * plane];
            for ((gv, &xv), &ov) in g_row.iter_mut().zip(x_row).zip(go_row) {
                let xhat = (xv - mean) * inv_std;
                let dxhat = ov * gamma_c;
                *gv = *gv + inv_std * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
            }
        }
    });

    // Parameter gradients, one channel per slot.
    par::for_each_chunk(g_gamma, 1, |ch, g| {
        let grp = ch / ch_per_group;
        let c_in_g = ch % ch_per_group;
        let mut acc = T::zero();
        for b in 0..batch {
            let idx = b * groups + grp;
            let base = idx * group_len + c_in_g * plane;
            let mean = saved_mean[idx];
            let inv_std = saved_inv_std[idx];
            for (&gv, &xv) in gout[base..base + plane].iter().zip(&x[base..base + plane]) {
                acc = acc + gv * ((xv - mean) * inv_std);
            }
        }
        g[0] = g[0] + acc;
    });
    par::for_each_chunk(g_beta, 1, |ch, g| {
        let grp = ch / ch_per_group;
        let c_in_g = ch % ch_per_group;
        let mut acc = T::zero();
        for b in 0..batch {
            let base = (b * groups + grp) * group_len + c_in_g * plane;
            for &gv in &gout[base..base + plane] {
                acc = acc + gv;
            }
        }
        g[0] = g[0] + acc;
    });
}
