//! Three-stage hybrid convolution-transformer encoder.
//!
//! Stages 1 and 2 run convolution blocks on dense `H/4` and `H/8` grids with
//! masked positions held at exactly zero. Stage 3 adds position embeddings,
//! keeps only the visible tokens and runs transformer blocks over them.

use super::blocks::{self, ConvBlockVars, TransformerBlockVars};
use super::params::{Affine, Bound};
use super::posembed::sincos_2d;
use crate::config::ArchConfig;
use crate::error::{Error, Result};
use crate::masking::BatchMask;
use crate::tensor::{Elem, Graph, SpatialMask, Var};

/// Whether convolution stages honour the mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ConvMode {
    /// Masked positions are zeroed after every sub-operation.
    #[default]
    Masked,
    /// Ordinary convolutions; masked content can bleed into visible tokens.
    Plain,
}

#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub patch_embed1: Affine,
    pub stage1: Vec<ConvBlockVars>,
    pub patch_embed2: Affine,
    pub stage2: Vec<ConvBlockVars>,
    pub patch_embed3: Affine,
    pub stage3: Vec<TransformerBlockVars>,
    pub norm: Affine,
}

impl EncoderVars {
    pub fn bind(b: &Bound, arch: &ArchConfig) -> Result<Self> {
        let conv = |stage: usize, n: usize| -> Result<Vec<ConvBlockVars>> {
            (0..n).map(|i| ConvBlockVars::bind(b, &format!("encoder.stage{stage}.{i}"))).collect()
        };
        Ok(Self {
            patch_embed1: b.affine("encoder.patch_embed1")?,
            stage1: conv(1, arch.depths[0])?,
            patch_embed2: b.affine("encoder.patch_embed2")?,
            stage2: conv(2, arch.depths[1])?,
            patch_embed3: b.affine("encoder.patch_embed3")?,
            stage3: (0..arch.depths[2])
                .map(|i| TransformerBlockVars::bind(b, &format!("encoder.stage3.{i}")))
                .collect::<Result<_>>()?,
            norm: b.affine("encoder.norm")?,
        })
    }
}

/// Encoder outputs for one batch.
#[derive(Clone, Copy, Debug)]
pub struct StageFeatures {
    /// `[B, C1, H/4, W/4]`
    pub e1: Var,
    /// `[B, C2, H/8, W/8]`
    pub e2: Var,
    /// `[B, Nv, C3]`, visible tokens in increasing grid order.
    pub e3_visible: Var,
}

/// Non-overlapping 4x4 stride-4 convolution from pixels to stage-1 tokens.
pub fn patch_embed1<T: Elem>(g: &mut Graph<T>, w: &Affine, img: Var) -> Result<Var> {
    let s = g.shape(img).to_vec();
    if s.len() != 4 || s[2] % 4 != 0 || s[3] % 4 != 0 {
        return Err(Error::Config(format!("image {:?} must be NCHW with sides divisible by 4", s)));
    }
    g.conv2d(img, w.weight, w.bias, 4, 0)
}

/// Convolution block whose output is exactly zero at masked positions and,
/// at visible positions, independent of the input at masked positions.
pub fn masked_conv_block<T: Elem>(
    g: &mut Graph<T>,
    w: &ConvBlockVars,
    x: Var,
    mask: &SpatialMask,
    kernel: usize,
) -> Result<Var> {
    let s = g.shape(x);
    if s.len() != 4 || s[0] != mask.batch || s[2] != mask.h || s[3] != mask.w {
        return Err(Error::Shape(format!(
            "mask {}x{}x{} does not match feature map {:?}",
            mask.batch, mask.h, mask.w, s
        )));
    }
    let x = g.mask_spatial(x, mask)?;
    blocks::conv_block(g, w, x, Some(mask), kernel)
}

/// Non-overlapping 2x2 stride-2 downsampling. With masks, every 2x2 input
/// window must be uniformly masked or visible, and the output is re-zeroed.
pub fn stage_transition<T: Elem>(
    g: &mut Graph<T>,
    w: &Affine,
    x: Var,
    masks: Option<(&SpatialMask, &SpatialMask)>,
) -> Result<Var> {
    if let Some((fine, coarse)) = masks {
        check_aligned(fine, coarse)?;
    }
    let y = g.conv2d(x, w.weight, w.bias, 2, 0)?;
    match masks {
        Some((_, coarse)) => g.mask_spatial(y, coarse),
        None => Ok(y),
    }
}

fn check_aligned(fine: &SpatialMask, coarse: &SpatialMask) -> Result<()> {
    if fine.batch != coarse.batch || fine.h != 2 * coarse.h || fine.w != 2 * coarse.w {
        return Err(Error::Invariant(format!(
            "stage masks {}x{} and {}x{} are not a 2x ladder",
            fine.h, fine.w, coarse.h, coarse.w
        )));
    }
    for b in 0..fine.batch {
        for r in 0..fine.h {
            for c in 0..fine.w {
                let f = fine.visible[(b * fine.h + r) * fine.w + c];
                let k = coarse.visible[(b * coarse.h + r / 2) * coarse.w + c / 2];
                if f != k {
                    return Err(Error::Invariant(format!(
                        "sample {} cell ({}, {}) straddles a masked/visible boundary",
                        b, r, c
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Flattens `[B, C, gh, gw]` to `[B, gh*gw, C]` in row-major grid order.
pub fn grid_to_tokens<T: Elem>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let p = g.permute(x, &[0, 2, 3, 1])?;
    g.reshape(p, &[s[0], s[2] * s[3], s[1]])
}

/// Adds a `[N, C]` constant table to every batch element of `[B, N, C]`.
pub fn add_table<T: Elem>(g: &mut Graph<T>, x: Var, table: crate::tensor::Tensor<T>) -> Result<Var> {
    let batch = g.shape(x)[0];
    let t = g.constant(table);
    let tb = g.broadcast_leading(t, batch);
    g.add(x, tb)
}

/// Position embedding, visible-token gather, transformer blocks and final norm.
pub fn stage3_forward<T: Elem>(
    g: &mut Graph<T>,
    vars: &EncoderVars,
    arch: &ArchConfig,
    x: Var,
    masks: &BatchMask,
) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let pos = sincos_2d::<T>(arch.channels[2], s[2], s[3])?;
    let tokens = grid_to_tokens(g, x)?;
    let tokens = add_table(g, tokens, pos)?;
    let mut h = g.gather_rows(tokens, &masks.visible_indices())?;
    for blk in &vars.stage3 {
        h = blocks::transformer_block(g, blk, h, |g, q, k, v| blocks::global_attention(g, q, k, v, arch.heads, None))?;
    }
    blocks::layer_norm(g, h, &vars.norm)
}

pub fn check_masks(arch: &ArchConfig, masks: &BatchMask, batch: usize) -> Result<()> {
    let g3 = arch.resolutions()[2];
    if masks.batch() != batch {
        return Err(Error::Shape(format!("{} masks for a batch of {}", masks.batch(), batch)));
    }
    if masks.grid3() != (g3, g3) {
        return Err(Error::Shape(format!("mask grid {:?} for a {}x{} token grid", masks.grid3(), g3, g3)));
    }
    if masks.visible_per_sample() == 0 {
        return Err(Error::Config("mask leaves no visible stage-3 tokens".into()));
    }
    Ok(())
}

/// Full encoder pass. `img` is `[B, in_channels, image_size, image_size]`.
pub fn encode<T: Elem>(
    g: &mut Graph<T>,
    vars: &EncoderVars,
    arch: &ArchConfig,
    img: Var,
    masks: &BatchMask,
    mode: ConvMode,
) -> Result<StageFeatures> {
    let s = g.shape(img).to_vec();
    if s.len() != 4 || s[1] != arch.in_channels || s[2] != arch.image_size || s[3] != arch.image_size {
        return Err(Error::Config(format!(
            "image {:?} does not match {} ({}x{}x{})",
            s, arch.name, arch.in_channels, arch.image_size, arch.image_size
        )));
    }
    check_masks(arch, masks, s[0])?;
    let (m1, m2, m3) = (masks.spatial(1), masks.spatial(2), masks.spatial(3));
    let masked = mode == ConvMode::Masked;

    let mut x = patch_embed1(g, &vars.patch_embed1, img)?;
    if masked {
        x = g.mask_spatial(x, &m1)?;
    }
    for blk in &vars.stage1 {
        x = if masked {
            masked_conv_block(g, blk, x, &m1, arch.kernel_size)?
        } else {
            blocks::conv_block(g, blk, x, None, arch.kernel_size)?
        };
    }
    let e1 = x;

    let mut x = stage_transition(g, &vars.patch_embed2, e1, masked.then_some((&m1, &m2)))?;
    for blk in &vars.stage2 {
        x = if masked {
            masked_conv_block(g, blk, x, &m2, arch.kernel_size)?
        } else {
            blocks::conv_block(g, blk, x, None, arch.kernel_size)?
        };
    }
    let e2 = x;

    let x = stage_transition(g, &vars.patch_embed3, e2, masked.then_some((&m2, &m3)))?;
    let e3_visible = stage3_forward(g, vars, arch, x, masks)?;
    Ok(StageFeatures { e1, e2, e3_visible })
}
