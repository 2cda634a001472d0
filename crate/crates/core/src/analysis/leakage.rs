//! Perturbation oracle for information leakage from masked pixels.

use std::fmt;

use crate::config::{ArchConfig, DecoderConfig};
use crate::error::{Error, Result};
use crate::masking::{generate_block_mask, BatchMask, MaskGrid};
use crate::model::{reconstruction_loss, ConvMae, ConvMode};
use crate::parallel::map_indexed;
use crate::rng::CounterRng;
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrialOutcome {
    pub index: usize,
    pub seed: u64,
    /// First tensor that differed after the perturbation, if any.
    pub divergent: Option<&'static str>,
}

impl TrialOutcome {
    pub fn passed(&self) -> bool {
        self.divergent.is_none()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LeakageReport {
    pub mode: ConvMode,
    pub keep_ratio: f64,
    pub trials: Vec<TrialOutcome>,
}

impl LeakageReport {
    pub fn passes(&self) -> usize {
        self.trials.iter().filter(|t| t.passed()).count()
    }

    pub fn failures(&self) -> usize {
        self.trials.len() - self.passes()
    }

    pub fn all_passed(&self) -> bool {
        self.failures() == 0
    }
}

impl fmt::Display for LeakageReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mode = match self.mode {
            ConvMode::Masked => "masked",
            ConvMode::Plain => "plain",
        };
        writeln!(
            f,
            "leakage: {} conv, keep {}: {}/{} trials bit-identical",
            mode,
            self.keep_ratio,
            self.passes(),
            self.trials.len()
        )?;
        let mut shown = 0;
        for t in self.trials.iter().filter(|t| !t.passed()) {
            if shown == 5 {
                writeln!(f, "  ... {} more", self.failures() - shown)?;
                break;
            }
            writeln!(f, "  trial {} (seed {}) diverged at {}", t.index, t.seed, t.divergent.unwrap_or("?"))?;
            shown += 1;
        }
        Ok(())
    }
}

/// Replaces every pixel under a masked stage-3 cell with a fresh random value.
pub fn perturb_masked_pixels(img: &Tensor<f32>, grid: &MaskGrid, rng: &mut CounterRng) -> Tensor<f32> {
    let s = img.shape().to_vec();
    let cell = s[2] / grid.h;
    let mut out = img.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let (r, c) = ((i / s[3]) % s[2], i % s[3]);
        if grid.get(r / cell, c / cell) {
            *v = (rng.unit_f64() * 8.0 - 4.0) as f32;
        }
    }
    out
}

fn run_trial(
    arch: &ArchConfig,
    dec: &DecoderConfig,
    keep: f64,
    mode: ConvMode,
    seed: u64,
) -> Result<Option<&'static str>> {
    let model = ConvMae::<f32>::new(arch.clone(), dec.clone(), seed)?;
    let mut rng = CounterRng::new(seed ^ 0x5EED_1EA4);
    let side = arch.image_size;
    let img = Tensor::from_fn(&[1, arch.in_channels, side, side], |_| rng.unit_f64() as f32);
    let g3 = arch.resolutions()[2];
    let mask = generate_block_mask(g3, g3, keep, seed)?;
    let perturbed = perturb_masked_pixels(&img, &mask.grid3, &mut rng);
    let masks = BatchMask::from_masks(vec![mask])?;

    let mut g = Graph::new();
    let a = model.forward(&mut g, &img, &masks, mode)?;
    let mut h = Graph::new();
    let b = model.forward(&mut h, &perturbed, &masks, mode)?;
    // Targets come from the masked pixels themselves, so both losses are taken
    // against the unperturbed image.
    let loss_b = match a.loss {
        Some(_) => Some(reconstruction_loss(&mut h, b.pred, &a.targets, &masks)?),
        None => None,
    };

    let pairs = [
        ("e3_visible", a.features.e3_visible, b.features.e3_visible),
        ("fused", a.fused, b.fused),
        ("pred", a.pred, b.pred),
    ];
    for (name, x, y) in pairs {
        if !g.value(x).bit_eq(h.value(y)) {
            return Ok(Some(name));
        }
    }
    if let (Some(x), Some(y)) = (a.loss, loss_b) {
        if !g.value(x).bit_eq(h.value(y)) {
            return Ok(Some("loss"));
        }
    }
    Ok(None)
}

/// Runs `trials` independent trials, each with fresh weights, image and mask
/// derived from `seed + index`, and compares the visible stage-3 tokens, fused
/// tokens, predictions and loss before and after perturbing masked pixels.
pub fn verify_no_leakage(
    arch: &ArchConfig,
    dec: &DecoderConfig,
    seed: u64,
    trials: usize,
    keep_ratio: f64,
    mode: ConvMode,
) -> Result<LeakageReport> {
    if trials == 0 {
        return Err(Error::Config("leakage check needs at least one trial".into()));
    }
    let outcomes = map_indexed(trials, |i| {
        let s = seed.wrapping_add(i as u64);
        run_trial(arch, dec, keep_ratio, mode, s).map(|divergent| TrialOutcome { index: i, seed: s, divergent })
    });
    let trials = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(LeakageReport { mode, keep_ratio, trials })
}
