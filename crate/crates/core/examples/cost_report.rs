//! Parameter and compute tables for the model family, plus the masking and
//! kernel-size ratios.
//!
//! ```text
//! cargo run --example cost_report
//! ```

use convmae::analysis::{count_flops, count_params, MaskingMode};
use convmae::config::ArchPreset;

fn main() -> anyhow::Result<()> {
    println!("{:<12} {:>12} {:>12}", "arch", "encoder", "+decoder");
    for preset in ArchPreset::ALL {
        let c = count_params(&preset.arch(), &preset.decoder());
        println!("{:<12} {:>11.2}M {:>11.2}M", preset, c.encoder as f64 / 1e6, c.total() as f64 / 1e6);
    }

    let b = ArchPreset::ConvMaeB;
    let (arch, dec) = (b.arch(), b.decoder());
    let block = count_flops(&arch, &dec, 0.25, MaskingMode::Block, 5)?;
    println!("\n{block}\n");

    let full = count_flops(&arch, &dec, 0.25, MaskingMode::RandomFull, 5)?;
    println!("random-full / block at keep 0.25: {:.3}x", full.macs as f64 / block.macs as f64);
    for k in [7, 9] {
        let r = count_flops(&arch, &dec, 0.25, MaskingMode::Block, k)?;
        println!("{k}x{k} / 5x5 kernels: {:.4}x", r.macs as f64 / block.macs as f64);
    }
    Ok(())
}
