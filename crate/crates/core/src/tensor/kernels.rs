//! Forward and backward loops over raw buffers. Every loop nest has a fixed
//! iteration order, so results are bit-reproducible.

use super::Elem;
use crate::error::{shape_err, Result};

/// Geometry of a grouped 2-D convolution over NCHW input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize, groups: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 {
            return shape_err(format!("conv expects 4-d input and weight, got {:?} and {:?}", x, w));
        }
        let (batch, cin, h, wd) = (x[0], x[1], x[2], x[3]);
        let (cout, cin_g, kh, kw) = (w[0], w[1], w[2], w[3]);
        if kh != kw {
            return shape_err(format!("only square kernels are supported, got {}x{}", kh, kw));
        }
        if stride == 0 || groups == 0 {
            return shape_err("stride and groups must be positive");
        }
        if cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
            return shape_err(format!("input channels {} do not match weight {:?} with {} groups", cin, w, groups));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return shape_err(format!("kernel {} larger than padded input {}x{}", kh, h, wd));
        }
        Ok(Self {
            batch,
            cin,
            h,
            w: wd,
            cout,
            k: kh,
            stride,
            pad,
            groups,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.cout, self.ho, self.wo]
    }

    /// Multiply-accumulates for the whole batch.
    pub fn macs(&self) -> u64 {
        (self.batch * self.cout * (self.cin / self.groups) * self.k * self.k * self.ho * self.wo) as u64
    }
}

/// Output indices `o` in `lo..hi` whose input coordinate `o*stride + off - pad`
/// falls inside `0..in_len`.
fn valid_range(off: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let (off, pad, stride, in_len) = (off as i64, pad as i64, stride as i64, in_len as i64);
    let lo = if pad > off { (pad - off + stride - 1) / stride } else { 0 };
    let top = in_len - 1 + pad - off;
    let hi = if top < 0 { 0 } else { (top / stride + 1).min(out_len as i64) };
    (lo as usize, (hi.max(lo)) as usize)
}

pub fn conv_forward<T: Elem>(g: &ConvGeom, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let cin_g = g.cin / g.groups;
    let cout_g = g.cout / g.groups;
    let plane = g.ho * g.wo;
    let mut out = vec![T::ZERO; g.batch * g.cout * plane];
    for n in 0..g.batch {
        for co in 0..g.cout {
            let grp = co / cout_g;
            let o_base = (n * g.cout + co) * plane;
            out[o_base..o_base + plane].fill(b[co]);
            for cl in 0..cin_g {
                let ci = grp * cin_g + cl;
                let x_base = (n * g.cin + ci) * g.h * g.w;
                for ky in 0..g.k {
                    let (oy_lo, oy_hi) = valid_range(ky, g.pad, g.stride, g.h, g.ho);
                    for kx in 0..g.k {
                        let (ox_lo, ox_hi) = valid_range(kx, g.pad, g.stride, g.w, g.wo);
                        let wv = w[((co * cin_g + cl) * g.k + ky) * g.k + kx];
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.pad;
                            let xrow = x_base + iy * g.w;
                            let orow = o_base + oy * g.wo;
                            for ox in ox_lo..ox_hi {
                                let ix = ox * g.stride + kx - g.pad;
                                out[orow + ox] += wv * x[xrow + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(dx, dw, db)`.
pub fn conv_backward<T: Elem>(g: &ConvGeom, x: &[T], w: &[T], dout: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cin_g = g.cin / g.groups;
    let cout_g = g.cout / g.groups;
    let plane = g.ho * g.wo;
    let mut dx = vec![T::ZERO; x.len()];
    let mut dw = vec![T::ZERO; w.len()];
    let mut db = vec![T::ZERO; g.cout];
    for n in 0..g.batch {
        for co in 0..g.cout {
            let grp = co / cout_g;
            let o_base = (n * g.cout + co) * plane;
            for &d in &dout[o_base..o_base + plane] {
                db[co] += d;
            }
            for cl in 0..cin_g {
                let ci = grp * cin_g + cl;
                let x_base = (n * g.cin + ci) * g.h * g.w;
                for ky in 0..g.k {
                    let (oy_lo, oy_hi) = valid_range(ky, g.pad, g.stride, g.h, g.ho);
                    for kx in 0..g.k {
                        let (ox_lo, ox_hi) = valid_range(kx, g.pad, g.stride, g.w, g.wo);
                        let widx = ((co * cin_g + cl) * g.k + ky) * g.k + kx;
                        let wv = w[widx];
                        let mut acc = T::ZERO;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.pad;
                            let xrow = x_base + iy * g.w;
                            let orow = o_base + oy * g.wo;
                            for ox in ox_lo..ox_hi {
                                let ix = ox * g.stride + kx - g.pad;
                                let d = dout[orow + ox];
                                acc += d * x[xrow + ix];
                                dx[xrow + ix] += d * wv;
                            }
                        }
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// `out[r, o] = b[o] + sum_i x[r, i] * w[o, i]`.
pub fn linear_forward<T: Elem>(x: &[T], w: &[T], b: &[T], rows: usize, din: usize, dout: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; rows * dout];
    for r in 0..rows {
        let xr = &x[r * din..(r + 1) * din];
        for o in 0..dout {
            let wr = &w[o * din..(o + 1) * din];
            let mut acc = T::ZERO;
            for i in 0..din {
                acc += xr[i] * wr[i];
            }
            out[r * dout + o] = acc + b[o];
        }
    }
    out
}

pub fn linear_backward<T: Elem>(
    x: &[T],
    w: &[T],
    dy: &[T],
    rows: usize,
    din: usize,
    dout: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::ZERO; rows * din];
    let mut dw = vec![T::ZERO; dout * din];
    let mut db = vec![T::ZERO; dout];
    for r in 0..rows {
        let xr = &x[r * din..(r + 1) * din];
        for o in 0..dout {
            let d = dy[r * dout + o];
            db[o] += d;
            let wr = &w[o * din..(o + 1) * din];
            let dwr = &mut dw[o * din..(o + 1) * din];
            let dxr = &mut dx[r * din..(r + 1) * din];
            for i in 0..din {
                dxr[i] += d * wr[i];
                dwr[i] += d * xr[i];
            }
        }
    }
    (dx, dw, db)
}

/// Layer norm over rows of length `d`. Returns `(y, xhat, rstd)`.
pub fn layer_norm_forward<T: Elem>(x: &[T], gamma: &[T], beta: &[T], d: usize, eps: f64) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let mut y = vec![T::ZERO; x.len()];
    let mut xhat = vec![T::ZERO; x.len()];
    let mut rstd = vec![T::ZERO; rows];
    let inv_d = T::from_f64(1.0 / d as f64);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mut mean = T::ZERO;
        for &v in xr {
            mean += v;
        }
        mean *= inv_d;
        let mut var = T::ZERO;
        for &v in xr {
            let c = v - mean;
            var += c * c;
        }
        var *= inv_d;
        let denom = var + T::from_f64(eps);
        let rs = if denom > T::ZERO { T::ONE / denom.sqrt() } else { T::ZERO };
        rstd[r] = rs;
        for i in 0..d {
            let h = (xr[i] - mean) * rs;
            xhat[r * d + i] = h;
            y[r * d + i] = h * gamma[i] + beta[i];
        }
    }
    (y, xhat, rstd)
}

pub fn layer_norm_backward<T: Elem>(
    xhat: &[T],
    rstd: &[T],
    gamma: &[T],
    dy: &[T],
    d: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = xhat.len() / d;
    let mut dx = vec![T::ZERO; xhat.len()];
    let mut dgamma = vec![T::ZERO; d];
    let mut dbeta = vec![T::ZERO; d];
    let inv_d = T::from_f64(1.0 / d as f64);
    for r in 0..rows {
        let off = r * d;
        let mut mean_g = T::ZERO;
        let mut mean_gx = T::ZERO;
        for i in 0..d {
            let g = dy[off + i] * gamma[i];
            mean_g += g;
            mean_gx += g * xhat[off + i];
            dgamma[i] += dy[off + i] * xhat[off + i];
            dbeta[i] += dy[off + i];
        }
        mean_g *= inv_d;
        mean_gx *= inv_d;
        for i in 0..d {
            let g = dy[off + i] * gamma[i];
            dx[off + i] = rstd[r] * (g - mean_g - xhat[off + i] * mean_gx);
        }
    }
    (dx, dgamma, dbeta)
}

/// Scaled dot-product attention over `[batch, heads, n, dh]` with an optional
/// additive bias `[heads, n, n]` shared across the batch. Returns `(out, probs)`.
pub fn attention_forward<T: Elem>(
    q: &[T],
    k: &[T],
    v: &[T],
    bias: Option<&[T]>,
    bh: usize,
    heads: usize,
    n: usize,
    dh: usize,
) -> (Vec<T>, Vec<T>) {
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut probs = vec![T::ZERO; bh * n * n];
    let mut out = vec![T::ZERO; bh * n * dh];
    for s in 0..bh {
        let head = s % heads;
        let base = s * n * dh;
        for i in 0..n {
            let qi = &q[base + i * dh..base + (i + 1) * dh];
            let row = &mut probs[(s * n + i) * n..(s * n + i + 1) * n];
            for j in 0..n {
                let kj = &k[base + j * dh..base + (j + 1) * dh];
                let mut acc = T::ZERO;
                for t in 0..dh {
                    acc += qi[t] * kj[t];
                }
                let mut logit = acc * scale;
                if let Some(b) = bias {
                    logit += b[(head * n + i) * n + j];
                }
                row[j] = logit;
            }
            let mut mx = row[0];
            for &l in row.iter() {
                mx = mx.max(l);
            }
            let mut total = T::ZERO;
            for l in row.iter_mut() {
                *l = (*l - mx).exp();
                total += *l;
            }
            let inv = T::ONE / total;
            for l in row.iter_mut() {
                *l *= inv;
            }
            let oi = &mut out[base + i * dh..base + (i + 1) * dh];
            for j in 0..n {
                let p = row[j];
                let vj = &v[base + j * dh..base + (j + 1) * dh];
                for t in 0..dh {
                    oi[t] += p * vj[t];
                }
            }
        }
    }
    (out, probs)
}

/// Returns `(dq, dk, dv, dbias)`; `dbias` is summed over the batch.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Elem>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    bh: usize,
    heads: usize,
    n: usize,
    dh: usize,
) -> (Vec<T>, Vec<T>, Vec<T>, Vec<T>) {
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut dq = vec![T::ZERO; q.len()];
    let mut dk = vec![T::ZERO; k.len()];
    let mut dv = vec![T::ZERO; v.len()];
    let mut dbias = vec![T::ZERO; heads * n * n];
    let mut dp = vec![T::ZERO; n];
    for s in 0..bh {
        let head = s % heads;
        let base = s * n * dh;
        for i in 0..n {
            let p_row = &probs[(s * n + i) * n..(s * n + i + 1) * n];
            let doi = &dout[base + i * dh..base + (i + 1) * dh];
            let mut dot = T::ZERO;
            for j in 0..n {
                let vj = &v[base + j * dh..base + (j + 1) * dh];
                let mut acc = T::ZERO;
                for t in 0..dh {
                    acc += doi[t] * vj[t];
                }
                dp[j] = acc;
                dot += acc * p_row[j];
                let dvj = &mut dv[base + j * dh..base + (j + 1) * dh];
                for t in 0..dh {
                    dvj[t] += p_row[j] * doi[t];
                }
            }
            for j in 0..n {
                let ds = p_row[j] * (dp[j] - dot);
                dbias[(head * n + i) * n + j] += ds;
                let dss = ds * scale;
                for t in 0..dh {
                    dq[base + i * dh + t] += dss * k[base + j * dh + t];
                    dk[base + j * dh + t] += dss * q[base + i * dh + t];
                }
            }
        }
    }
    (dq, dk, dv, dbias)
}

/// 2x2 stride-2 max pooling over NCHW. Returns `(out, argmax)` where argmax
/// holds flat input indices; ties resolve to the first maximum in row-major
/// window order.
pub fn max_pool2_forward<T: Elem>(x: &[T], planes: usize, h: usize, w: usize) -> (Vec<T>, Vec<usize>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// `out` has shape `shape[axes[0]], shape[axes[1]], ...`.
pub fn permute<T: Elem>(x: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(x.len());
    let rank = out_shape.len();
    if x.is_empty() {
        return out;
    }
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    loop {
        out.push(x[src]);
        // Odometer increment over the output index.
        let mut d = rank;
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

pub fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

pub fn gelu<T: Elem>(x: T) -> T {
    let xf = x.to_f64();
    T::from_f64(0.5 * xf * (1.0 + libm::erf(xf * std::f64::consts::FRAC_1_SQRT_2)))
}

pub fn gelu_grad<T: Elem>(x: T) -> T {
    let xf = x.to_f64();
    let cdf = 0.5 * (1.0 + libm::erf(xf * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * xf * xf).exp() / (2.0 * std::f64::consts::PI).sqrt();
    T::from_f64(cdf + xf * pdf)
}
