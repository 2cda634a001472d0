//! Perturbs the masked pixels of random images and checks whether anything
//! the loss depends on moves. Masked convolutions should keep every trial
//! bit-identical; plain convolutions leak.
//!
//! ```text
//! cargo run --release --example leakage_probe -- [trials]
//! ```

use convmae::analysis::verify_no_leakage;
use convmae::config::{ArchConfig, DecoderConfig};
use convmae::model::ConvMode;

fn main() -> anyhow::Result<()> {
    let trials: usize = std::env::args().nth(1).map_or(Ok(20), |s| s.parse())?;
    let (arch, dec) = (ArchConfig::tiny_test(), DecoderConfig::tiny_test());
    for mode in [ConvMode::Masked, ConvMode::Plain] {
        let report = verify_no_leakage(&arch, &dec, 1000, trials, 0.25, mode)?;
        print!("{report}");
    }
    Ok(())
}
