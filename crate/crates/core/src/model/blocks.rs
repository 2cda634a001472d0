//! Building blocks shared by the encoder, decoder and backbone.

use super::params::{Affine, Bound};
use crate::error::Result;
use crate::tensor::{Elem, Graph, SpatialMask, Var};

pub const LN_EPS: f64 = 1e-6;

/// Pre-norm attention block weights.
#[derive(Clone, Copy, Debug)]
pub struct TransformerBlockVars {
    pub norm1: Affine,
    pub q: Affine,
    pub k: Affine,
    pub v: Affine,
    pub proj: Affine,
    pub norm2: Affine,
    pub fc1: Affine,
    pub fc2: Affine,
}

impl TransformerBlockVars {
    pub fn bind(b: &Bound, prefix: &str) -> Result<Self> {
        let a = |s: &str| b.affine(&format!("{prefix}.{s}"));
        Ok(Self {
            norm1: a("norm1")?,
            q: a("q")?,
            k: a("k")?,
            v: a("v")?,
            proj: a("proj")?,
            norm2: a("norm2")?,
            fc1: a("fc1")?,
            fc2: a("fc2")?,
        })
    }
}

/// Convolution block weights: the attention of a transformer block replaced
/// by pointwise → depthwise → pointwise convolutions.
#[derive(Clone, Copy, Debug)]
pub struct ConvBlockVars {
    pub norm1: Affine,
    pub proj_in: Affine,
    pub dwconv: Affine,
    pub proj_out: Affine,
    pub norm2: Affine,
    pub fc1: Affine,
    pub fc2: Affine,
}

impl ConvBlockVars {
    pub fn bind(b: &Bound, prefix: &str) -> Result<Self> {
        let a = |s: &str| b.affine(&format!("{prefix}.{s}"));
        Ok(Self {
            norm1: a("norm1")?,
            proj_in: a("proj_in")?,
            dwconv: a("dwconv")?,
            proj_out: a("proj_out")?,
            norm2: a("norm2")?,
            fc1: a("fc1")?,
            fc2: a("fc2")?,
        })
    }
}

pub fn linear<T: Elem>(g: &mut Graph<T>, x: Var, w: &Affine) -> Result<Var> {
    g.linear(x, w.weight, w.bias)
}

pub fn layer_norm<T: Elem>(g: &mut Graph<T>, x: Var, w: &Affine) -> Result<Var> {
    g.layer_norm(x, w.weight, w.bias, LN_EPS)
}

/// Layer norm over the channel axis of an NCHW map.
pub fn channel_norm<T: Elem>(g: &mut Graph<T>, x: Var, w: &Affine) -> Result<Var> {
    let last = g.permute(x, &[0, 2, 3, 1])?;
    let normed = layer_norm(g, last, w)?;
    g.permute(normed, &[0, 3, 1, 2])
}

/// `[B, N, C]` → `[B, heads, N, C / heads]`.
pub fn split_heads<T: Elem>(g: &mut Graph<T>, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let r = g.reshape(x, &[s[0], s[1], heads, s[2] / heads])?;
    g.permute(r, &[0, 2, 1, 3])
}

/// `[B, heads, N, Dh]` → `[B, N, heads * Dh]`.
pub fn merge_heads<T: Elem>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let p = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(p, &[s[0], s[2], s[1] * s[3]])
}

/// Multi-head attention over all tokens of `[B, N, C]` projections.
pub fn global_attention<T: Elem>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    bias: Option<Var>,
) -> Result<Var> {
    let qh = split_heads(g, q, heads)?;
    let kh = split_heads(g, k, heads)?;
    let vh = split_heads(g, v, heads)?;
    let o = g.softmax_attention(qh, kh, vh, bias)?;
    merge_heads(g, o)
}

/// Pre-norm transformer block over `[B, N, C]`. `attend` maps the q, k, v
/// projections (each `[B, N, C]`) to the attention output `[B, N, C]`.
pub fn transformer_block<T, F>(g: &mut Graph<T>, w: &TransformerBlockVars, x: Var, attend: F) -> Result<Var>
where
    T: Elem,
    F: FnOnce(&mut Graph<T>, Var, Var, Var) -> Result<Var>,
{
    let h = layer_norm(g, x, &w.norm1)?;
    let q = linear(g, h, &w.q)?;
    let k = linear(g, h, &w.k)?;
    let v = linear(g, h, &w.v)?;
    let a = attend(g, q, k, v)?;
    let a = linear(g, a, &w.proj)?;
    let x = g.add(x, a)?;
    let h = layer_norm(g, x, &w.norm2)?;
    let h = linear(g, h, &w.fc1)?;
    let h = g.gelu(h);
    let h = linear(g, h, &w.fc2)?;
    g.add(x, h)
}

/// Convolution block over NCHW:
/// `x + proj_out(dw(proj_in(LN(x))))` then `x + fc2(gelu(fc1(LN(x))))`.
///
/// With a mask, every sub-operation's output is re-zeroed at masked positions,
/// so visible outputs never depend on masked inputs.
pub fn conv_block<T: Elem>(
    g: &mut Graph<T>,
    w: &ConvBlockVars,
    x: Var,
    mask: Option<&SpatialMask>,
    kernel: usize,
) -> Result<Var> {
    let z = |g: &mut Graph<T>, v: Var| -> Result<Var> {
        match mask {
            Some(m) => g.mask_spatial(v, m),
            None => Ok(v),
        }
    };
    let h = channel_norm(g, x, &w.norm1)?;
    let h = z(g, h)?;
    let h = g.conv2d(h, w.proj_in.weight, w.proj_in.bias, 1, 0)?;
    let h = z(g, h)?;
    let h = g.depthwise_conv2d(h, w.dwconv.weight, w.dwconv.bias, (kernel - 1) / 2)?;
    let h = z(g, h)?;
    let h = g.conv2d(h, w.proj_out.weight, w.proj_out.bias, 1, 0)?;
    let h = z(g, h)?;
    let x = g.add(x, h)?;
    let x = z(g, x)?;

    let h = channel_norm(g, x, &w.norm2)?;
    let h = z(g, h)?;
    let h = g.conv2d(h, w.fc1.weight, w.fc1.bias, 1, 0)?;
    let h = z(g, h)?;
    let h = g.gelu(h);
    let h = z(g, h)?;
    let h = g.conv2d(h, w.fc2.weight, w.fc2.bias, 1, 0)?;
    let h = z(g, h)?;
    let x = g.add(x, h)?;
    z(g, x)
}
