//! Architecture presets.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Encoder hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchConfig {
    pub name: String,
    pub channels: [usize; 3],
    pub depths: [usize; 3],
    pub mlp_ratios: [usize; 3],
    /// Attention heads in stage 3.
    pub heads: usize,
    pub image_size: usize,
    pub in_channels: usize,
    /// Depthwise kernel side in stages 1 and 2.
    pub kernel_size: usize,
}

/// Stride of each stage's token grid relative to the image.
pub const STAGE_STRIDES: [usize; 3] = [4, 8, 16];

impl ArchConfig {
    #[allow(clippy::too_many_arguments)]
    fn preset(
        name: &str,
        channels: [usize; 3],
        depths: [usize; 3],
        mlp_ratios: [usize; 3],
        heads: usize,
        image_size: usize,
    ) -> Self {
        Self { name: name.to_string(), channels, depths, mlp_ratios, heads, image_size, in_channels: 3, kernel_size: 5 }
    }

    pub fn convmae_s() -> Self {
        Self::preset("convmae-s", [128, 256, 384], [2, 2, 11], [4, 4, 4], 6, 224)
    }

    pub fn convmae_b() -> Self {
        Self::preset("convmae-b", [256, 384, 768], [2, 2, 11], [4, 4, 4], 12, 224)
    }

    pub fn convmae_b_star() -> Self {
        Self::preset("convmae-b*", [256, 384, 768], [2, 2, 11], [8, 8, 4], 12, 224)
    }

    pub fn convmae_l() -> Self {
        Self::preset("convmae-l", [384, 768, 1024], [2, 2, 23], [8, 8, 4], 16, 224)
    }

    pub fn convmae_h() -> Self {
        Self::preset("convmae-h", [768, 1024, 1280], [2, 2, 31], [8, 8, 4], 16, 224)
    }

    /// Desk-scale model: 32x32 input, token grids 8/4/2.
    pub fn tiny_test() -> Self {
        Self::preset("tiny-test", [32, 48, 96], [1, 1, 2], [4, 4, 4], 4, 32)
    }

    pub fn with_kernel(mut self, k: usize) -> Self {
        self.kernel_size = k;
        self
    }

    /// Tokens per side at stages 1, 2, 3.
    pub fn resolutions(&self) -> [usize; 3] {
        STAGE_STRIDES.map(|s| self.image_size / s)
    }

    /// Stage-3 token count.
    pub fn tokens(&self) -> usize {
        let g = self.resolutions()[2];
        g * g
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size == 0 || self.image_size % 16 != 0 {
            return bad(format!("image size {} must be a positive multiple of 16", self.image_size));
        }
        if self.channels.contains(&0) || self.mlp_ratios.contains(&0) || self.in_channels == 0 {
            return bad("channels, mlp ratios and input channels must be positive".into());
        }
        if self.heads == 0 || self.channels[2] % self.heads != 0 {
            return bad(format!("stage-3 width {} not divisible by {} heads", self.channels[2], self.heads));
        }
        if self.channels[2] % 4 != 0 {
            return bad("stage-3 width must be divisible by 4 for the sine-cosine embedding".into());
        }
        if self.kernel_size % 2 == 0 {
            return bad(format!("depthwise kernel size must be odd, got {}", self.kernel_size));
        }
        Ok(())
    }
}

/// Multi-scale decoder hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Side of the pixel patch reconstructed per stage-3 token.
    pub patch_size: usize,
    pub norm_target: bool,
}

impl Default for DecoderConfig {
    /// 8 layers of width 512. Heads are 16 because 512 is not divisible by 12.
    fn default() -> Self {
        Self { depth: 8, dim: 512, heads: 16, mlp_ratio: 4, patch_size: 16, norm_target: true }
    }
}

impl DecoderConfig {
    pub fn tiny_test() -> Self {
        Self { depth: 2, dim: 64, heads: 4, ..Self::default() }
    }

    pub fn patch_pixels(&self, in_channels: usize) -> usize {
        self.patch_size * self.patch_size * in_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!("decoder width {} not divisible by {} heads", self.dim, self.heads)));
        }
        if self.dim % 4 != 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("decoder width must be divisible by 4 and mlp ratio positive".into()));
        }
        if self.patch_size != STAGE_STRIDES[2] {
            return Err(Error::Config(format!("patch size must equal the stage-3 stride {}", STAGE_STRIDES[2])));
        }
        Ok(())
    }
}

/// Named presets accepted on the command line and in run configs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ArchPreset {
    ConvMaeS,
    ConvMaeB,
    ConvMaeBStar,
    ConvMaeL,
    ConvMaeH,
    TinyTest,
}

impl ArchPreset {
    pub const ALL: [ArchPreset; 6] = [
        ArchPreset::ConvMaeS,
        ArchPreset::ConvMaeB,
        ArchPreset::ConvMaeBStar,
        ArchPreset::ConvMaeL,
        ArchPreset::ConvMaeH,
        ArchPreset::TinyTest,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ArchPreset::ConvMaeS => "convmae-s",
            ArchPreset::ConvMaeB => "convmae-b",
            ArchPreset::ConvMaeBStar => "convmae-b*",
            ArchPreset::ConvMaeL => "convmae-l",
            ArchPreset::ConvMaeH => "convmae-h",
            ArchPreset::TinyTest => "tiny-test",
        }
    }

    pub fn arch(self) -> ArchConfig {
        match self {
            ArchPreset::ConvMaeS => ArchConfig::convmae_s(),
            ArchPreset::ConvMaeB => ArchConfig::convmae_b(),
            ArchPreset::ConvMaeBStar => ArchConfig::convmae_b_star(),
            ArchPreset::ConvMaeL => ArchConfig::convmae_l(),
            ArchPreset::ConvMaeH => ArchConfig::convmae_h(),
            ArchPreset::TinyTest => ArchConfig::tiny_test(),
        }
    }

    pub fn decoder(self) -> DecoderConfig {
        match self {
            ArchPreset::TinyTest => DecoderConfig::tiny_test(),
            _ => DecoderConfig::default(),
        }
    }
}

impl FromStr for ArchPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|p| p.name() == key || (key == "convmae-b-star" && *p == ArchPreset::ConvMaeBStar))
            .ok_or_else(|| Error::Config(format!("unknown architecture '{}'", s)))
    }
}

impl fmt::Display for ArchPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
