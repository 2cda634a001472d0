//! Multi-scale fusion, mask-token decoding and the masked-patch loss.

use super::blocks::{self, TransformerBlockVars};
use super::encoder::{add_table, grid_to_tokens, StageFeatures};
use super::params::{Affine, Bound};
use super::posembed::sincos_2d;
use crate::config::{ArchConfig, DecoderConfig};
use crate::error::{Error, Result};
use crate::masking::BatchMask;
use crate::tensor::{Elem, Graph, Tensor, Var};

/// Variance floor for per-patch target normalization.
pub const TARGET_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct DecoderVars {
    pub fuse1: Affine,
    pub fuse2: Affine,
    pub embed: Affine,
    pub mask_token: Var,
    pub blocks: Vec<TransformerBlockVars>,
    pub norm: Affine,
    pub pred: Affine,
}

impl DecoderVars {
    pub fn bind(b: &Bound, dec: &DecoderConfig) -> Result<Self> {
        Ok(Self {
            fuse1: b.affine("decoder.fuse1")?,
            fuse2: b.affine("decoder.fuse2")?,
            embed: b.affine("decoder.embed")?,
            mask_token: b.var("decoder.mask_token")?,
            blocks: (0..dec.depth)
                .map(|i| TransformerBlockVars::bind(b, &format!("decoder.blocks.{i}")))
                .collect::<Result<_>>()?,
            norm: b.affine("decoder.norm")?,
            pred: b.affine("decoder.pred")?,
        })
    }
}

/// Sums stride-4 and stride-2 projections of the stage-1 and stage-2 maps with
/// the visible stage-3 tokens and projects to decoder width: `[B, Nv, dim]`.
pub fn fuse_multiscale<T: Elem>(
    g: &mut Graph<T>,
    w: &DecoderVars,
    feats: &StageFeatures,
    masks: &BatchMask,
) -> Result<Var> {
    let c3 = g.shape(feats.e3_visible)[2];
    let (c1, c2) = (g.shape(feats.e1)[1], g.shape(feats.e2)[1]);
    let (k1, k2) = (g.shape(w.fuse1.weight).to_vec(), g.shape(w.fuse2.weight).to_vec());
    if k1[..2] != [c3, c1] || k2[..2] != [c3, c2] {
        return Err(Error::Shape(format!(
            "fusion weights {:?}, {:?} do not map ({}, {}) channels to {}",
            k1, k2, c1, c2, c3
        )));
    }
    let s1 = g.conv2d(feats.e1, w.fuse1.weight, w.fuse1.bias, 4, 0)?;
    let s2 = g.conv2d(feats.e2, w.fuse2.weight, w.fuse2.bias, 2, 0)?;
    let sum = g.add(s1, s2)?;
    let tokens = grid_to_tokens(g, sum)?;
    let visible = g.gather_rows(tokens, &masks.visible_indices())?;
    let fused = g.add(visible, feats.e3_visible)?;
    blocks::linear(g, fused, &w.embed)
}

/// Places fused tokens at their grid positions, fills the rest with the mask
/// token and decodes every token to a pixel patch: `[B, N, patch_pixels]`.
pub fn decode<T: Elem>(
    g: &mut Graph<T>,
    w: &DecoderVars,
    dec: &DecoderConfig,
    fused: Var,
    masks: &BatchMask,
) -> Result<Var> {
    let (gh, gw) = masks.grid3();
    let n = gh * gw;
    let batch = masks.batch();
    let mut x = g.scatter_rows(fused, &masks.visible_indices(), n)?;
    let masked = masks.masked_indices();
    let n_masked = masked.first().map_or(0, Vec::len);
    if n_masked > 0 {
        let rows = g.broadcast_leading(w.mask_token, n_masked);
        let rows = g.broadcast_leading(rows, batch);
        let filled = g.scatter_rows(rows, &masked, n)?;
        x = g.add(x, filled)?;
    }
    x = add_table(g, x, sincos_2d::<T>(dec.dim, gh, gw)?)?;
    for blk in &w.blocks {
        x = blocks::transformer_block(g, blk, x, |g, q, k, v| blocks::global_attention(g, q, k, v, dec.heads, None))?;
    }
    let x = blocks::layer_norm(g, x, &w.norm)?;
    blocks::linear(g, x, &w.pred)
}

/// Pixel targets `[B, N, p*p*C]`, each patch normalized to zero mean and unit
/// population variance when `normalize` is set.
pub fn patch_targets<T: Elem>(img: &Tensor<T>, patch: usize, normalize: bool) -> Result<Tensor<T>> {
    let mut t = img.patchify(patch)?;
    if normalize {
        let d = t.shape()[2];
        for row in t.data_mut().chunks_mut(d) {
            let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + TARGET_EPS).sqrt();
            for v in row.iter_mut() {
                *v = T::from_f64((v.to_f64() - mean) * inv);
            }
        }
    }
    Ok(t)
}

/// Mean squared error over masked tokens only.
pub fn reconstruction_loss<T: Elem>(
    g: &mut Graph<T>,
    pred: Var,
    targets: &Tensor<T>,
    masks: &BatchMask,
) -> Result<Var> {
    if g.shape(pred) != targets.shape() {
        return Err(Error::Shape(format!("prediction {:?} vs targets {:?}", g.shape(pred), targets.shape())));
    }
    let masked = masks.masked_indices();
    if masked.first().is_none_or(Vec::is_empty) {
        return Err(Error::Config("loss needs at least one masked token".into()));
    }
    let t = g.constant(targets.clone());
    let p = g.gather_rows(pred, &masked)?;
    let t = g.gather_rows(t, &masked)?;
    let d = g.sub(p, t)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean_all(sq))
}

pub fn check_decoder(arch: &ArchConfig, dec: &DecoderConfig) -> Result<()> {
    dec.validate()?;
    if dec.patch_size != crate::config::STAGE_STRIDES[2] {
        return Err(Error::Config(format!(
            "decoder patch {} must equal the stage-3 stride {}",
            dec.patch_size,
            crate::config::STAGE_STRIDES[2]
        )));
    }
    arch.validate()
}
