//! Multiply-accumulate accounting for one pretraining forward pass.
//!
//! Convolutions cost `Cout * Cin/groups * k^2 * Hout * Wout`, linear layers
//! `rows * Din * Dout` and attention `2 * N^2 * C` for scores plus weighted
//! sum. Norms, activations and softmax are free. Stage-1/2 grids and the
//! fusion convolutions are dense in every mode.

use std::fmt;
use std::str::FromStr;

use super::params::count_params;
use crate::config::{ArchConfig, DecoderConfig};
use crate::error::{Error, Result};
use crate::masking::visible_count;

/// How the stage-3 token count follows from the keep ratio.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskingMode {
    /// Block masking: only visible tokens enter stage 3.
    Block,
    /// Pixel-level random masking: every stage-3 token is processed.
    RandomFull,
}

impl MaskingMode {
    pub fn name(self) -> &'static str {
        match self {
            MaskingMode::Block => "block",
            MaskingMode::RandomFull => "random-full",
        }
    }
}

impl FromStr for MaskingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "block" => Ok(MaskingMode::Block),
            "random-full" | "random_full" => Ok(MaskingMode::RandomFull),
            _ => Err(Error::Usage(format!("unknown masking mode {:?} (block, random-full)", s))),
        }
    }
}

impl fmt::Display for MaskingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Part {
    Stage1,
    Stage2,
    Stage3,
    Decoder,
}

impl Part {
    pub const ALL: [Part; 4] = [Part::Stage1, Part::Stage2, Part::Stage3, Part::Decoder];

    pub fn name(self) -> &'static str {
        match self {
            Part::Stage1 => "stage1",
            Part::Stage2 => "stage2",
            Part::Stage3 => "stage3",
            Part::Decoder => "decoder",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpClass {
    /// Strided patch embedding or downsampling convolution.
    Embed,
    /// 1x1 convolutions and linear projections outside attention and MLPs.
    Projection,
    Depthwise,
    /// Query, key, value and output projections.
    AttentionProj,
    /// Score and weighted-sum products.
    AttentionMix,
    Mlp,
    /// Stride-4 and stride-2 fusion convolutions.
    Fusion,
}

impl OpClass {
    pub const ALL: [OpClass; 7] = [
        OpClass::Embed,
        OpClass::Projection,
        OpClass::Depthwise,
        OpClass::AttentionProj,
        OpClass::AttentionMix,
        OpClass::Mlp,
        OpClass::Fusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpClass::Embed => "embed",
            OpClass::Projection => "projection",
            OpClass::Depthwise => "depthwise",
            OpClass::AttentionProj => "attention_proj",
            OpClass::AttentionMix => "attention_mix",
            OpClass::Mlp => "mlp",
            OpClass::Fusion => "fusion",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CostItem {
    pub part: Part,
    pub class: OpClass,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub arch: String,
    pub keep_ratio: f64,
    pub mode: MaskingMode,
    pub kernel_size: usize,
    pub image_size: usize,
    /// Tokens entering stage 3.
    pub stage3_tokens: usize,
    pub params_encoder: u64,
    pub params_decoder: u64,
    /// MACs for one image.
    pub macs: u64,
    pub breakdown: Vec<CostItem>,
}

impl CostReport {
    pub fn macs_for_part(&self, part: Part) -> u64 {
        self.breakdown.iter().filter(|i| i.part == part).map(|i| i.macs).sum()
    }

    pub fn macs_for_class(&self, class: OpClass) -> u64 {
        self.breakdown.iter().filter(|i| i.class == class).map(|i| i.macs).sum()
    }

    /// Flat `key=value` lines.
    pub fn to_kv(&self) -> String {
        let mut out = format!(
            "arch={}\nkeep_ratio={}\nmode={}\nkernel_size={}\nimage_size={}\nstage3_tokens={}\nparams_encoder={}\nparams_decoder={}\nmacs={}\n",
            self.arch,
            self.keep_ratio,
            self.mode,
            self.kernel_size,
            self.image_size,
            self.stage3_tokens,
            self.params_encoder,
            self.params_decoder,
            self.macs
        );
        for item in &self.breakdown {
            out.push_str(&format!("macs.{}.{}={}\n", item.part.name(), item.class.name(), item.macs));
        }
        out
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} at {}px, keep {}, {} masking, {}x{} depthwise",
            self.arch, self.image_size, self.keep_ratio, self.mode, self.kernel_size, self.kernel_size
        )?;
        writeln!(
            f,
            "  params  encoder {:.2}M  decoder {:.2}M",
            self.params_encoder as f64 / 1e6,
            self.params_decoder as f64 / 1e6
        )?;
        writeln!(f, "  stage-3 tokens {}", self.stage3_tokens)?;
        for part in Part::ALL {
            writeln!(f, "  {:<8} {:>10.3} GMACs", part.name(), self.macs_for_part(part) as f64 / 1e9)?;
        }
        write!(f, "  total    {:>10.3} GMACs", self.macs as f64 / 1e9)
    }
}

struct Tally {
    items: Vec<CostItem>,
}

impl Tally {
    fn add(&mut self, part: Part, class: OpClass, macs: u64) {
        match self.items.iter_mut().find(|i| i.part == part && i.class == class) {
            Some(item) => item.macs += macs,
            None => self.items.push(CostItem { part, class, macs }),
        }
    }

    fn conv_block(&mut self, part: Part, c: u64, ratio: u64, k: u64, positions: u64) {
        self.add(part, OpClass::Projection, 2 * c * c * positions);
        self.add(part, OpClass::Depthwise, c * k * k * positions);
        self.add(part, OpClass::Mlp, 2 * ratio * c * c * positions);
    }

    fn transformer_block(&mut self, part: Part, c: u64, ratio: u64, tokens: u64) {
        self.add(part, OpClass::AttentionProj, 4 * c * c * tokens);
        self.add(part, OpClass::AttentionMix, 2 * tokens * tokens * c);
        self.add(part, OpClass::Mlp, 2 * ratio * c * c * tokens);
    }
}

/// Cost of one forward pass (encoder, fusion, decoder) on a single image.
/// `kernel_size` overrides the architecture's depthwise kernel.
pub fn count_flops(
    arch: &ArchConfig,
    dec: &DecoderConfig,
    keep_ratio: f64,
    mode: MaskingMode,
    kernel_size: usize,
) -> Result<CostReport> {
    let arch = arch.clone().with_kernel(kernel_size);
    arch.validate()?;
    dec.validate()?;
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::Config(format!("keep ratio {} outside (0, 1]", keep_ratio)));
    }
    let [c1, c2, c3] = arch.channels.map(|c| c as u64);
    let [g1, g2, g3] = arch.resolutions().map(|g| (g * g) as u64);
    let [p1, p2, p3] = arch.mlp_ratios.map(|p| p as u64);
    let k = kernel_size as u64;
    let n = g3;
    let nv = match mode {
        MaskingMode::Block => (visible_count(n as usize, keep_ratio) as u64).max(1),
        MaskingMode::RandomFull => n,
    };

    let mut t = Tally { items: Vec::new() };
    t.add(Part::Stage1, OpClass::Embed, c1 * arch.in_channels as u64 * 16 * g1);
    for _ in 0..arch.depths[0] {
        t.conv_block(Part::Stage1, c1, p1, k, g1);
    }
    t.add(Part::Stage2, OpClass::Embed, c2 * c1 * 4 * g2);
    for _ in 0..arch.depths[1] {
        t.conv_block(Part::Stage2, c2, p2, k, g2);
    }
    t.add(Part::Stage3, OpClass::Embed, c3 * c2 * 4 * g3);
    for _ in 0..arch.depths[2] {
        t.transformer_block(Part::Stage3, c3, p3, nv);
    }

    let d = dec.dim as u64;
    t.add(Part::Decoder, OpClass::Fusion, c3 * c1 * 16 * n + c3 * c2 * 4 * n);
    t.add(Part::Decoder, OpClass::Projection, d * c3 * nv);
    for _ in 0..dec.depth {
        t.transformer_block(Part::Decoder, d, dec.mlp_ratio as u64, n);
    }
    t.add(Part::Decoder, OpClass::Projection, dec.patch_pixels(arch.in_channels) as u64 * d * n);

    let params = count_params(&arch, dec);
    Ok(CostReport {
        arch: arch.name.clone(),
        keep_ratio,
        mode,
        kernel_size,
        image_size: arch.image_size,
        stage3_tokens: nv as usize,
        params_encoder: params.encoder,
        params_decoder: params.decoder,
        macs: t.items.iter().map(|i| i.macs).sum(),
        breakdown: t.items,
    })
}
