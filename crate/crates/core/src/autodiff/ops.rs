//! Forward and backward kernels behind the graph ops. Convolutions are
//! cross-correlations (no kernel flip), matching mainstream framework
//! semantics.

use super::{make_bn_ctx, BnCtx, BnView, Mode, NodeId, Scalar, Tensor};
use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// conv1d
// ---------------------------------------------------------------------------

pub(crate) fn conv1d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let ([ci, m], [co, wci, k]) = (dims2(x)?, dims3(w)?);
    if ci != wci {
        return Err(Error::shape(format!("conv1d: input channels {ci} vs weight {wci}")));
    }
    if stride == 0 {
        return Err(Error::invalid("conv1d: zero stride"));
    }
    if m + 2 * pad < k {
        return Err(Error::shape("conv1d: kernel longer than padded input"));
    }
    let m_out = (m + 2 * pad - k) / stride + 1;
    let mut out = vec![T::zero(); co * m_out];
    for o in 0..co {
        for c in 0..ci {
            let x_base = c * m;
            for kk in 0..k {
                let wv = w.data[(o * ci + c) * k + kk];
                if wv == T::zero() {
                    continue;
                }
                let (lo, hi) = valid_out_range(kk as isize - pad as isize, stride, m, m_out);
                let shift = kk as isize - pad as isize;
                let row = &mut out[o * m_out..(o + 1) * m_out];
                for (om, slot) in row.iter_mut().enumerate().take(hi).skip(lo) {
                    let im = (om * stride) as isize + shift;
                    *slot += wv * x.data[x_base + im as usize];
                }
            }
        }
    }
    Tensor::new(vec![co, m_out], out)
}

pub(crate) fn conv1d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    out_shape: &[usize],
    gy: &[T],
    stride: usize,
    pad: usize,
) -> (Vec<T>, Vec<T>) {
    let (ci, m) = (x.shape[0], x.shape[1]);
    let (co, k) = (w.shape[0], w.shape[2]);
    let m_out = out_shape[1];
    let mut gx = vec![T::zero(); x.numel()];
    let mut gw = vec![T::zero(); w.numel()];
    for o in 0..co {
        let gy_row = &gy[o * m_out..(o + 1) * m_out];
        for c in 0..ci {
            let x_base = c * m;
            for kk in 0..k {
                let shift = kk as isize - pad as isize;
                let (lo, hi) = valid_out_range(shift, stride, m, m_out);
                let wv = w.data[(o * ci + c) * k + kk];
                let mut acc = T::zero();
                for (om, &g) in gy_row.iter().enumerate().take(hi).skip(lo) {
                    let im = ((om * stride) as isize + shift) as usize;
                    gx[x_base + im] += wv * g;
                    acc += g * x.data[x_base + im];
                }
                gw[(o * ci + c) * k + kk] += acc;
            }
        }
    }
    (gx, gw)
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<Tensor<T>> {
    let ([ci, h, wd], [co, wci, kh, kw]) = (dims3(x)?, dims4(w)?);
    if ci != wci {
        return Err(Error::shape(format!("conv2d: input channels {ci} vs weight {wci}")));
    }
    if stride.0 == 0 || stride.1 == 0 {
        return Err(Error::invalid("conv2d: zero stride"));
    }
    if h + 2 * pad.0 < kh || wd + 2 * pad.1 < kw {
        return Err(Error::shape("conv2d: kernel larger than padded input"));
    }
    let h_out = (h + 2 * pad.0 - kh) / stride.0 + 1;
    let w_out = (wd + 2 * pad.1 - kw) / stride.1 + 1;
    let mut out = vec![T::zero(); co * h_out * w_out];
    for o in 0..co {
        for c in 0..ci {
            for ky in 0..kh {
                let yshift = ky as isize - pad.0 as isize;
                let (oy_lo, oy_hi) = valid_out_range(yshift, stride.0, h, h_out);
                for kx in 0..kw {
                    let wv = w.data[((o * ci + c) * kh + ky) * kw + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    let xshift = kx as isize - pad.1 as isize;
                    let (ox_lo, ox_hi) = valid_out_range(xshift, stride.1, wd, w_out);
                    for oy in oy_lo..oy_hi {
                        let iy = ((oy * stride.0) as isize + yshift) as usize;
                        let x_row = &x.data[(c * h + iy) * wd..(c * h + iy + 1) * wd];
                        let out_row = &mut out[(o * h_out + oy) * w_out..(o * h_out + oy + 1) * w_out];
                        for (ox, slot) in out_row.iter_mut().enumerate().take(ox_hi).skip(ox_lo) {
                            let ix = ((ox * stride.1) as isize + xshift) as usize;
                            *slot += wv * x_row[ix];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![co, h_out, w_out], out)
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    out_shape: &[usize],
    gy: &[T],
    stride: (usize, usize),
    pad: (usize, usize),
) -> (Vec<T>, Vec<T>) {
    let (ci, h, wd) = (x.shape[0], x.shape[1], x.shape[2]);
    let (co, kh, kw) = (w.shape[0], w.shape[2], w.shape[3]);
    let (h_out, w_out) = (out_shape[1], out_shape[2]);
    let mut gx = vec![T::zero(); x.numel()];
    let mut gw = vec![T::zero(); w.numel()];
    for o in 0..co {
        for c in 0..ci {
            for ky in 0..kh {
                let yshift = ky as isize - pad.0 as isize;
                let (oy_lo, oy_hi) = valid_out_range(yshift, stride.0, h, h_out);
                for kx in 0..kw {
                    let xshift = kx as isize - pad.1 as isize;
                    let (ox_lo, ox_hi) = valid_out_range(xshift, stride.1, wd, w_out);
                    let wv = w.data[((o * ci + c) * kh + ky) * kw + kx];
                    let mut acc = T::zero();
                    for oy in oy_lo..oy_hi {
                        let iy = ((oy * stride.0) as isize + yshift) as usize;
                        let gy_row = &gy[(o * h_out + oy) * w_out..(o * h_out + oy + 1) * w_out];
                        let x_base = (c * h + iy) * wd;
                        for (ox, &g) in gy_row.iter().enumerate().take(ox_hi).skip(ox_lo) {
                            let ix = ((ox * stride.1) as isize + xshift) as usize;
                            gx[x_base + ix] += wv * g;
                            acc += g * x.data[x_base + ix];
                        }
                    }
                    gw[((o * ci + c) * kh + ky) * kw + kx] += acc;
                }
            }
        }
    }
    (gx, gw)
}

// ---------------------------------------------------------------------------
// transposed conv2d
// ---------------------------------------------------------------------------

/// Weight layout [C_in, C_out, kh, kw]; output spatial size
/// (in - 1) * stride - 2 * pad + kernel.
pub(crate) fn convt2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<Tensor<T>> {
    let ([ci, h, wd], [wci, co, kh, kw]) = (dims3(x)?, dims4(w)?);
    if ci != wci {
        return Err(Error::shape(format!("conv_transpose2d: input channels {ci} vs weight {wci}")));
    }
    let h_out = (h - 1) * stride.0 + kh;
    let w_out = (wd - 1) * stride.1 + kw;
    if h_out < 2 * pad.0 + 1 || w_out < 2 * pad.1 + 1 {
        return Err(Error::shape("conv_transpose2d: padding swallows the whole output"));
    }
    let (h_out, w_out) = (h_out - 2 * pad.0, w_out - 2 * pad.1);
    let mut out = vec![T::zero(); co * h_out * w_out];
    for c in 0..ci {
        for o in 0..co {
            for ky in 0..kh {
                let yshift = ky as isize - pad.0 as isize;
                let (iy_lo, iy_hi) = valid_out_range(yshift, stride.0, h_out, h);
                for kx in 0..kw {
                    let wv = w.data[((c * co + o) * kh + ky) * kw + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    let xshift = kx as isize - pad.1 as isize;
                    let (ix_lo, ix_hi) = valid_out_range(xshift, stride.1, w_out, wd);
                    for iy in iy_lo..iy_hi {
                        let oy = ((iy * stride.0) as isize + yshift) as usize;
                        let x_row = &x.data[(c * h + iy) * wd..(c * h + iy) * wd + ix_hi];
                        let out_row = &mut out[(o * h_out + oy) * w_out..(o * h_out + oy + 1) * w_out];
                        for (ix, &xv) in x_row.iter().enumerate().take(ix_hi).skip(ix_lo) {
                            let ox = ((ix * stride.1) as isize + xshift) as usize;
                            out_row[ox] += wv * xv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![co, h_out, w_out], out)
}

pub(crate) fn convt2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    out_shape: &[usize],
    gy: &[T],
    stride: (usize, usize),
    pad: (usize, usize),
) -> (Vec<T>, Vec<T>) {
    let (ci, h, wd) = (x.shape[0], x.shape[1], x.shape[2]);
    let (co, kh, kw) = (w.shape[1], w.shape[2], w.shape[3]);
    let (h_out, w_out) = (out_shape[1], out_shape[2]);
    let mut gx = vec![T::zero(); x.numel()];
    let mut gw = vec![T::zero(); w.numel()];
    for c in 0..ci {
        for o in 0..co {
            for ky in 0..kh {
                let yshift = ky as isize - pad.0 as isize;
                let (iy_lo, iy_hi) = valid_out_range(yshift, stride.0, h_out, h);
                for kx in 0..kw {
                    let xshift = kx as isize - pad.1 as isize;
                    let (ix_lo, ix_hi) = valid_out_range(xshift, stride.1, w_out, wd);
                    let wv = w.data[((c * co + o) * kh + ky) * kw + kx];
                    let mut acc = T::zero();
                    for iy in iy_lo..iy_hi {
                        let oy = ((iy * stride.0) as isize + yshift) as usize;
                        let x_base = (c * h + iy) * wd;
                        let gy_base = (o * h_out + oy) * w_out;
                        for ix in ix_lo..ix_hi {
                            let ox = ((ix * stride.1) as isize + xshift) as usize;
                            let g = gy[gy_base + ox];
                            gx[x_base + ix] += wv * g;
                            acc += g * x.data[x_base + ix];
                        }
                    }
                    gw[((c * co + o) * kh + ky) * kw + kx] += acc;
                }
            }
        }
    }
    (gx, gw)
}

// ---------------------------------------------------------------------------
// batchnorm
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
pub(crate) fn batchnorm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
    mode: Mode,
    running_mean: &[T],
    running_var: &[T],
    x_id: NodeId,
    gamma_id: NodeId,
    beta_id: NodeId,
) -> Result<(Tensor<T>, BnCtx<T>)> {
    let channels = *x
        .shape
        .first()
        .ok_or_else(|| Error::shape("batchnorm: rank-0 input"))?;
    let per_channel = x.numel() / channels;
    if per_channel == 0 {
        return Err(Error::shape("batchnorm: empty channels"));
    }
    if gamma.numel() != channels || beta.numel() != channels {
        return Err(Error::shape(format!(
            "batchnorm: gamma/beta must have {channels} entries"
        )));
    }
    let train = mode == Mode::Train;
    if !train && (running_mean.len() != channels || running_var.len() != channels) {
        return Err(Error::shape("batchnorm: running stats length mismatch"));
    }

    let mut xhat = vec![T::zero(); x.numel()];
    let mut inv_std = vec![T::zero(); channels];
    let mut batch_mean = vec![T::zero(); channels];
    let mut batch_var = vec![T::zero(); channels];
    let mut out = vec![T::zero(); x.numel()];
    let m = T::from_f64(per_channel as f64);

    for c in 0..channels {
        let slice = &x.data[c * per_channel..(c + 1) * per_channel];
        let (mean, var) = if train {
            let mean = slice.iter().fold(T::zero(), |a, &v| a + v) / m;
            let var = slice.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / m;
            (mean, var)
        } else {
            (running_mean[c], running_var[c])
        };
        let istd = T::one() / (var + eps).sqrt();
        inv_std[c] = istd;
        batch_mean[c] = mean;
        batch_var[c] = var;
        let (g, b) = (gamma.data[c], beta.data[c]);
        for (i, &v) in slice.iter().enumerate() {
            let xh = (v - mean) * istd;
            xhat[c * per_channel + i] = xh;
            out[c * per_channel + i] = g * xh + b;
        }
    }
    let value = Tensor { shape: x.shape.clone(), data: out };
    let ctx = make_bn_ctx(x_id, gamma_id, beta_id, train, xhat, inv_std, batch_mean, batch_var);
    Ok((value, ctx))
}

pub(crate) fn batchnorm_backward<T: Scalar>(
    ctx: BnView<'_, T>,
    gamma: &Tensor<T>,
    gy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let channels = gamma.numel();
    let per_channel = gy.len() / channels;
    let m = T::from_f64(per_channel as f64);
    let mut gx = vec![T::zero(); gy.len()];
    let mut ggamma = vec![T::zero(); channels];
    let mut gbeta = vec![T::zero(); channels];
    for c in 0..channels {
        let range = c * per_channel..(c + 1) * per_channel;
        let gy_c = &gy[range.clone()];
        let xhat_c = &ctx.xhat[range.clone()];
        let sum_gy = gy_c.iter().fold(T::zero(), |a, &v| a + v);
        let sum_gy_xhat = gy_c.iter().zip(xhat_c).fold(T::zero(), |a, (&g, &xh)| a + g * xh);
        ggamma[c] = sum_gy_xhat;
        gbeta[c] = sum_gy;
        let scale = gamma.data[c] * ctx.inv_std[c];
        let gx_c = &mut gx[range];
        if ctx.train {
            let mean_gy = sum_gy / m;
            let mean_gy_xhat = sum_gy_xhat / m;
            for ((slot, &g), &xh) in gx_c.iter_mut().zip(gy_c).zip(xhat_c) {
                *slot = scale * (g - mean_gy - xh * mean_gy_xhat);
            }
        } else {
            for (slot, &g) in gx_c.iter_mut().zip(gy_c) {
                *slot = scale * g;
            }
        }
    }
    (gx, ggamma, gbeta)
}

// ---------------------------------------------------------------------------
// concat / indexing
// ---------------------------------------------------------------------------

pub(crate) fn concat_forward<T: Scalar>(xs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = xs.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
    let rank = first.shape.len();
    if axis >= rank {
        return Err(Error::shape(format!("concat axis {axis} out of rank {rank}")));
    }
    let mut axis_total = 0;
    for t in xs {
        if t.shape.len() != rank {
            return Err(Error::shape("concat rank mismatch"));
        }
        for (d, (&a, &b)) in t.shape.iter().zip(&first.shape).enumerate() {
            if d != axis && a != b {
                return Err(Error::shape(format!(
                    "concat shape mismatch on axis {d}: {:?} vs {:?}",
                    t.shape, first.shape
                )));
            }
        }
        axis_total += t.shape[axis];
    }
    let outer: usize = first.shape[..axis].iter().product();
    let inner: usize = first.shape[axis + 1..].iter().product();
    let mut shape = first.shape.clone();
    shape[axis] = axis_total;
    let mut data = vec![T::zero(); outer * axis_total * inner];
    let mut offset = 0;
    for t in xs {
        let len_axis = t.shape[axis];
        let block = len_axis * inner;
        for o in 0..outer {
            let src = &t.data[o * block..(o + 1) * block];
            let dst_start = (o * axis_total + offset) * inner;
            data[dst_start..dst_start + block].copy_from_slice(src);
        }
        offset += len_axis;
    }
    Tensor::new(shape, data)
}

pub(crate) fn concat_backward<T: Scalar>(
    shapes: &[&[usize]],
    out_shape: &[usize],
    gy: &[T],
    axis: usize,
) -> Vec<Vec<T>> {
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let axis_total = out_shape[axis];
    let mut parts = Vec::with_capacity(shapes.len());
    let mut offset = 0;
    for shape in shapes {
        let len_axis = shape[axis];
        let block = len_axis * inner;
        let mut part = vec![T::zero(); outer * block];
        for o in 0..outer {
            let src_start = (o * axis_total + offset) * inner;
            part[o * block..(o + 1) * block].copy_from_slice(&gy[src_start..src_start + block]);
        }
        parts.push(part);
        offset += len_axis;
    }
    parts
}

pub(crate) fn index_h_forward<T: Scalar>(x: &Tensor<T>, h: usize) -> Result<Tensor<T>> {
    let [c, hh, w] = dims3(x)?;
    if h >= hh {
        return Err(Error::shape(format!("index_h: row {h} out of {hh}")));
    }
    let mut data = Vec::with_capacity(c * w);
    for ch in 0..c {
        let start = (ch * hh + h) * w;
        data.extend_from_slice(&x.data[start..start + w]);
    }
    Tensor::new(vec![c, w], data)
}

pub(crate) fn index_h_backward<T: Scalar>(x_shape: &[usize], gy: &[T], h: usize) -> Vec<T> {
    let (c, hh, w) = (x_shape[0], x_shape[1], x_shape[2]);
    let mut gx = vec![T::zero(); c * hh * w];
    for ch in 0..c {
        let start = (ch * hh + h) * w;
        gx[start..start + w].copy_from_slice(&gy[ch * w..(ch + 1) * w]);
    }
    gx
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

pub(crate) fn mse_value<T: Scalar>(pred: &[T], target: &[T]) -> T {
    let n = T::from_f64(pred.len() as f64);
    pred.iter()
        .zip(target)
        .fold(T::zero(), |acc, (&p, &t)| {
            let d = p - t;
            acc + d * d
        })
        / n
}

pub(crate) fn mse_backward<T: Scalar>(pred: &[T], target: &[T], gy: T) -> Vec<T> {
    let scale = gy * T::from_f64(2.0 / pred.len() as f64);
    pred.iter().zip(target).map(|(&p, &t)| scale * (p - t)).collect()
}

/// Mean over rows of (1 - r); r is the sample correlation with eps added to
/// each denominator factor so constant rows stay finite.
pub(crate) fn pearson_value<T: Scalar>(pred: &[T], target: &[T], cols: usize, eps: T) -> T {
    let rows = pred.len() / cols;
    let mut total = T::zero();
    for l in 0..rows {
        let p = &pred[l * cols..(l + 1) * cols];
        let t = &target[l * cols..(l + 1) * cols];
        total += T::one() - pearson_row(p, t, eps);
    }
    total / T::from_f64(rows as f64)
}

fn pearson_row<T: Scalar>(p: &[T], t: &[T], eps: T) -> T {
    let n = T::from_f64(p.len() as f64);
    let mp = p.iter().fold(T::zero(), |a, &v| a + v) / n;
    let mt = t.iter().fold(T::zero(), |a, &v| a + v) / n;
    let mut sab = T::zero();
    let mut saa = T::zero();
    let mut sbb = T::zero();
    for (&pv, &tv) in p.iter().zip(t) {
        let a = pv - mp;
        let b = tv - mt;
        sab += a * b;
        saa += a * a;
        sbb += b * b;
    }
    sab / ((saa.sqrt() + eps) * (sbb.sqrt() + eps))
}

pub(crate) fn pearson_backward<T: Scalar>(
    pred: &[T],
    target: &[T],
    cols: usize,
    eps: T,
    gy: T,
) -> Vec<T> {
    let rows = pred.len() / cols;
    let n = T::from_f64(cols as f64);
    let row_scale = gy / T::from_f64(rows as f64);
    let mut gx = vec![T::zero(); pred.len()];
    for l in 0..rows {
        let p = &pred[l * cols..(l + 1) * cols];
        let t = &target[l * cols..(l + 1) * cols];
        let mp = p.iter().fold(T::zero(), |a, &v| a + v) / n;
        let mt = t.iter().fold(T::zero(), |a, &v| a + v) / n;
        let mut sab = T::zero();
        let mut saa = T::zero();
        let mut sbb = T::zero();
        for (&pv, &tv) in p.iter().zip(t) {
            let a = pv - mp;
            let b = tv - mt;
            sab += a * b;
            saa += a * a;
            sbb += b * b;
        }
        let da = saa.sqrt() + eps;
        let db = sbb.sqrt() + eps;
        let denom = da * db;
        // dr/da_i = b_i / denom - sab * a_i / (sqrt(saa) * da^2 * db); the
        // second term vanishes for a constant row (subgradient choice).
        let curv = if saa.sqrt() > T::zero() {
            sab / (saa.sqrt() * da * da * db)
        } else {
            T::zero()
        };
        let mut mean_dr = T::zero();
        let mut dr = vec![T::zero(); cols];
        for (i, (&pv, &tv)) in p.iter().zip(t).enumerate() {
            let a = pv - mp;
            let b = tv - mt;
            let d = b / denom - a * curv;
            dr[i] = d;
            mean_dr += d;
        }
        mean_dr /= n;
        for (i, d) in dr.into_iter().enumerate() {
            // loss row term is (1 - r): negate; centering projects out the mean.
            gx[l * cols + i] = -row_scale * (d - mean_dr);
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// helpers
// ---------------------------------------------------------------------------

fn dims2<T: Scalar>(t: &Tensor<T>) -> Result<[usize; 2]> {
    match t.shape.as_slice() {
        [a, b] => Ok([*a, *b]),
        s => Err(Error::shape(format!("expected rank-2 tensor, got {s:?}"))),
    }
}

fn dims3<T: Scalar>(t: &Tensor<T>) -> Result<[usize; 3]> {
    match t.shape.as_slice() {
        [a, b, c] => Ok([*a, *b, *c]),
        s => Err(Error::shape(format!("expected rank-3 tensor, got {s:?}"))),
    }
}

fn dims4<T: Scalar>(t: &Tensor<T>) -> Result<[usize; 4]> {
    match t.shape.as_slice() {
        [a, b, c, d] => Ok([*a, *b, *c, *d]),
        s => Err(Error::shape(format!("expected rank-4 tensor, got {s:?}"))),
    }
}

/// Output positions `o` for which `o * stride + shift` lands inside
/// `[0, in_len)`, as a half-open range clipped to `[0, out_len)`.
fn valid_out_range(shift: isize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let stride = stride as isize;
    let lo = if shift >= 0 { 0 } else { (-shift + stride - 1) / stride };
    let hi_inclusive = (in_len as isize - 1 - shift).div_euclid(stride);
    let lo = lo.max(0) as usize;
    let hi = (hi_inclusive + 1).clamp(0, out_len as isize) as usize;
    (lo.min(out_len), hi)
}
