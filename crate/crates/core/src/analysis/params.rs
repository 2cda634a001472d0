//! Parameter counts computed from the architecture alone.

use crate::config::{ArchConfig, DecoderConfig};

/// Encoder and decoder parameter totals.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub encoder: u64,
    pub decoder: u64,
}

impl ParamCount {
    pub fn total(&self) -> u64 {
        self.encoder + self.decoder
    }

    pub fn with_decoder(&self, include_decoder: bool) -> u64 {
        if include_decoder {
            self.total()
        } else {
            self.encoder
        }
    }
}

fn conv(cout: u64, cin_per_group: u64, k: u64) -> u64 {
    cout * cin_per_group * k * k + cout
}

fn norm(c: u64) -> u64 {
    2 * c
}

fn conv_block(c: u64, ratio: u64, k: u64) -> u64 {
    2 * norm(c) + 2 * conv(c, c, 1) + conv(c, 1, k) + conv(ratio * c, c, 1) + conv(c, ratio * c, 1)
}

fn transformer_block(c: u64, ratio: u64) -> u64 {
    2 * norm(c) + 4 * (c * c + c) + (ratio * c * c + ratio * c) + (c * ratio * c + c)
}

/// Encoder parameters (patch embeds, blocks, transitions, final norm) and
/// decoder parameters (fusion, embed, mask token, blocks, norm, prediction).
/// The fixed sine-cosine tables are not parameters.
pub fn count_params(arch: &ArchConfig, dec: &DecoderConfig) -> ParamCount {
    let [c1, c2, c3] = arch.channels.map(|c| c as u64);
    let [l1, l2, l3] = arch.depths.map(|l| l as u64);
    let [p1, p2, p3] = arch.mlp_ratios.map(|p| p as u64);
    let k = arch.kernel_size as u64;
    let cin = arch.in_channels as u64;

    let encoder = conv(c1, cin, 4)
        + l1 * conv_block(c1, p1, k)
        + conv(c2, c1, 2)
        + l2 * conv_block(c2, p2, k)
        + conv(c3, c2, 2)
        + l3 * transformer_block(c3, p3)
        + norm(c3);

    let d = dec.dim as u64;
    let pixels = dec.patch_pixels(arch.in_channels) as u64;
    let decoder = conv(c3, c1, 4)
        + conv(c3, c2, 2)
        + (d * c3 + d)
        + d
        + dec.depth as u64 * transformer_block(d, dec.mlp_ratio as u64)
        + norm(d)
        + (pixels * d + pixels);

    ParamCount { encoder, decoder }
}
