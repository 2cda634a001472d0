//! Multi-scale feature extraction from a pretrained encoder, with optional
//! conversion of stage-3 attention to shifted local windows.

use std::collections::BTreeSet;

use crate::config::ArchConfig;
use crate::error::{Error, Result};
use crate::model::blocks::{self, merge_heads, split_heads, TransformerBlockVars};
use crate::model::encoder::{add_table, grid_to_tokens, patch_embed1, stage_transition, EncoderVars};
use crate::model::params::encoder_layout;
use crate::model::posembed::sincos_2d;
use crate::model::{ConvMae, ParamStore};
use crate::tensor::{Elem, Graph, Tensor, Var};

pub const GLOBAL_BIAS: &str = "backbone.rel_pos.global";
pub const LOCAL_BIAS: &str = "backbone.rel_pos.local";

/// Which stage-3 layers keep global attention; the rest attend within
/// windows whose offset alternates between 0 and `window / 2`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub window: usize,
    /// 1-based layer indices.
    pub global_layers: BTreeSet<usize>,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self { window: 7, global_layers: [1, 4, 7, 11].into_iter().collect() }
    }
}

/// Attention pattern of one stage-3 layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerAttention {
    Global,
    Local { shift: usize },
}

impl WindowSpec {
    pub fn validate(&self, depth: usize, grid: usize) -> Result<()> {
        if self.window == 0 || self.window > grid {
            return Err(Error::Config(format!("window {} does not fit a {}x{} grid", self.window, grid, grid)));
        }
        if grid % self.window != 0 {
            return Err(Error::Config(format!("grid {} is not a multiple of window {}", grid, self.window)));
        }
        if let Some(&bad) = self.global_layers.iter().find(|&&l| l == 0 || l > depth) {
            return Err(Error::Config(format!("global layer {} outside 1..={}", bad, depth)));
        }
        Ok(())
    }

    pub fn shift(&self) -> usize {
        self.window / 2
    }

    /// Per-layer plan for `depth` layers.
    pub fn plan(&self, depth: usize) -> Vec<LayerAttention> {
        let mut local = 0;
        (1..=depth)
            .map(|l| {
                if self.global_layers.contains(&l) {
                    LayerAttention::Global
                } else {
                    let shift = if local % 2 == 0 { 0 } else { self.shift() };
                    local += 1;
                    LayerAttention::Local { shift }
                }
            })
            .collect()
    }
}

/// Token order that groups a cyclically shifted `h x w` grid into
/// `window x window` tiles. Entry `j` is the row-major grid index placed at
/// position `j`; tile `t` occupies positions `t*window^2 .. (t+1)*window^2`.
pub fn window_partition(h: usize, w: usize, window: usize, shift: usize) -> Vec<usize> {
    let mut order = Vec::with_capacity(h * w);
    for tr in 0..h / window {
        for tc in 0..w / window {
            for r in 0..window {
                for c in 0..window {
                    let gr = (tr * window + r + shift) % h;
                    let gc = (tc * window + c + shift) % w;
                    order.push(gr * w + gc);
                }
            }
        }
    }
    order
}

/// Rows of a `[(2s-1)^2, heads]` relative-offset table for every query/key
/// pair of an `s x s` patch, in row-major query-major order.
pub fn relative_index(side: usize) -> Vec<usize> {
    let span = 2 * side - 1;
    let mut idx = Vec::with_capacity(side.pow(4));
    for q in 0..side * side {
        for k in 0..side * side {
            let dr = q / side + side - 1 - k / side;
            let dc = q % side + side - 1 - k % side;
            idx.push(dr * span + dc);
        }
    }
    idx
}

/// Expands a `[(2s-1)^2, heads]` table into a `[heads, s^2, s^2]` attention bias.
pub fn relative_bias<T: Elem>(g: &mut Graph<T>, table: Var, side: usize) -> Result<Var> {
    let s = g.shape(table).to_vec();
    if s.len() != 2 || s[0] != (2 * side - 1).pow(2) {
        return Err(Error::Shape(format!("relative table {:?} for side {}", s, side)));
    }
    let heads = s[1];
    let t = g.reshape(table, &[1, s[0], heads])?;
    let rows = g.gather_rows(t, &[relative_index(side)])?;
    let n = side * side;
    let r = g.reshape(rows, &[n, n, heads])?;
    g.permute(r, &[2, 0, 1])
}

/// Attention restricted to (shifted) windows of a `grid x grid` token map.
/// q, k, v are `[B, grid^2, C]` in row-major grid order.
#[allow(clippy::too_many_arguments)]
pub fn windowed_attention<T: Elem>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    grid: usize,
    window: usize,
    shift: usize,
    bias: Option<Var>,
) -> Result<Var> {
    let s = g.shape(q).to_vec();
    if s.len() != 3 || s[1] != grid * grid || grid % window != 0 {
        return Err(Error::Shape(format!("windowed attention: tokens {:?}, grid {}, window {}", s, grid, window)));
    }
    let (b, c) = (s[0], s[2]);
    let order = vec![window_partition(grid, grid, window, shift); b];
    let tiles = (grid / window).pow(2);
    let mut parts = [q, k, v];
    for p in &mut parts {
        let rows = g.gather_rows(*p, &order)?;
        let tiled = g.reshape(rows, &[b * tiles, window * window, c])?;
        *p = split_heads(g, tiled, heads)?;
    }
    let o = g.softmax_attention(parts[0], parts[1], parts[2], bias)?;
    let o = merge_heads(g, o)?;
    let o = g.reshape(o, &[b, grid * grid, c])?;
    g.scatter_rows(o, &order, grid * grid)
}

/// Encoder weights prepared for dense multi-scale extraction.
#[derive(Clone, Debug)]
pub struct Backbone<T: Elem> {
    pub arch: ArchConfig,
    pub plan: Vec<LayerAttention>,
    pub window: Option<WindowSpec>,
    /// Encoder parameters, plus relative-bias tables once converted.
    pub params: ParamStore<T>,
}

/// Feature maps at strides 4, 8, 16 and 32, each `[B, C, H/s, W/s]`.
#[derive(Clone, Copy, Debug)]
pub struct Pyramid {
    pub levels: [Var; 4],
}

pub const PYRAMID_STRIDES: [usize; 4] = [4, 8, 16, 32];

impl<T: Elem> Backbone<T> {
    /// Global attention in every layer, no extra parameters.
    pub fn from_model(model: &ConvMae<T>) -> Self {
        let mut params = ParamStore::default();
        for d in encoder_layout(&model.arch) {
            let t = model.params.get(&d.name).expect("model holds every encoder parameter");
            params.insert(d.name, t.clone());
        }
        Self {
            arch: model.arch.clone(),
            plan: vec![LayerAttention::Global; model.arch.depths[2]],
            window: None,
            params,
        }
    }

    fn grid(&self) -> usize {
        self.arch.resolutions()[2]
    }

    pub fn extract_pyramid(&self, g: &mut Graph<T>, img: &Tensor<T>) -> Result<Pyramid> {
        let s = img.shape().to_vec();
        if s.len() != 4 || s[1] != self.arch.in_channels || s[2] % 32 != 0 || s[3] % 32 != 0 || s[2] == 0 || s[3] == 0 {
            return Err(Error::Config(format!(
                "pyramid input {:?} must be [B, {}, H, W] with H and W multiples of 32",
                s, self.arch.in_channels
            )));
        }
        let (gh, gw) = (s[2] / 16, s[3] / 16);
        if self.window.is_some() && (gh != self.grid() || gw != self.grid()) {
            return Err(Error::Config(format!(
                "windowed backbone was converted for a {}px input, got {}x{}",
                self.arch.image_size, s[2], s[3]
            )));
        }
        let b = self.params.bind(g);
        let vars = EncoderVars::bind(&b, &self.arch)?;
        let image = g.constant(img.clone());
        let mut x = patch_embed1(g, &vars.patch_embed1, image)?;
        for blk in &vars.stage1 {
            x = blocks::conv_block(g, blk, x, None, self.arch.kernel_size)?;
        }
        let e1 = x;
        let mut x = stage_transition(g, &vars.patch_embed2, e1, None)?;
        for blk in &vars.stage2 {
            x = blocks::conv_block(g, blk, x, None, self.arch.kernel_size)?;
        }
        let e2 = x;
        let x = stage_transition(g, &vars.patch_embed3, e2, None)?;

        let c3 = self.arch.channels[2];
        let tokens = grid_to_tokens(g, x)?;
        let mut h = add_table(g, tokens, sincos_2d::<T>(c3, gh, gw)?)?;
        let biases = match &self.window {
            Some(spec) => {
                Some((relative_bias(g, b.var(GLOBAL_BIAS)?, gh)?, relative_bias(g, b.var(LOCAL_BIAS)?, spec.window)?))
            }
            None => None,
        };
        for (blk, kind) in vars.stage3.iter().zip(&self.plan) {
            h = self.stage3_layer(g, blk, h, *kind, gh, biases)?;
        }
        let h = blocks::layer_norm(g, h, &vars.norm)?;
        let p = g.permute(h, &[0, 2, 1])?;
        let e3 = g.reshape(p, &[s[0], c3, gh, gw])?;
        let e4 = g.max_pool2d(e3)?;
        Ok(Pyramid { levels: [e1, e2, e3, e4] })
    }

    fn stage3_layer(
        &self,
        g: &mut Graph<T>,
        blk: &TransformerBlockVars,
        x: Var,
        kind: LayerAttention,
        grid: usize,
        biases: Option<(Var, Var)>,
    ) -> Result<Var> {
        let heads = self.arch.heads;
        match (kind, &self.window) {
            (LayerAttention::Local { shift }, Some(spec)) => {
                let bias = biases.map(|b| b.1);
                blocks::transformer_block(g, blk, x, |g, q, k, v| {
                    windowed_attention(g, q, k, v, heads, grid, spec.window, shift, bias)
                })
            }
            _ => {
                let bias = biases.map(|b| b.0);
                blocks::transformer_block(g, blk, x, |g, q, k, v| blocks::global_attention(g, q, k, v, heads, bias))
            }
        }
    }
}

/// Reuses every pretrained weight unchanged, switches non-global stage-3
/// layers to windowed attention and adds zero relative-bias tables shared by
/// the global layers and by the local layers.
pub fn convert_to_windowed<T: Elem>(model: &ConvMae<T>, spec: &WindowSpec) -> Result<Backbone<T>> {
    let mut bb = Backbone::from_model(model);
    let grid = bb.grid();
    spec.validate(model.arch.depths[2], grid)?;
    let heads = model.arch.heads;
    bb.params.insert(GLOBAL_BIAS, Tensor::zeros(&[(2 * grid - 1).pow(2), heads]));
    bb.params.insert(LOCAL_BIAS, Tensor::zeros(&[(2 * spec.window - 1).pow(2), heads]));
    bb.plan = spec.plan(model.arch.depths[2]);
    bb.window = Some(spec.clone());
    Ok(bb)
}
