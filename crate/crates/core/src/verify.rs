//! Self-check suites behind the `verify` command.

use std::fmt;
use std::str::FromStr;

use crate::analysis::{count_flops, count_params, verify_no_leakage, MaskingMode, OpClass, Part};
use crate::config::{ArchConfig, ArchPreset, DecoderConfig};
use crate::error::{Error, Result};
use crate::masking::{alignment_check, generate_block_mask, visible_count, BatchMask, MaskSet};
use crate::model::{ConvMae, ConvMode};
use crate::rng::CounterRng;
use crate::tensor::{Graph, SpatialMask, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Masking,
    Leakage,
    Grads,
    Costs,
    All,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "masking" => Ok(Suite::Masking),
            "leakage" => Ok(Suite::Leakage),
            "grads" => Ok(Suite::Grads),
            "costs" => Ok(Suite::Costs),
            "all" => Ok(Suite::All),
            _ => Err(Error::Usage(format!("unknown suite {:?} (masking, leakage, grads, costs, all)", s))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub checks: Vec<Check>,
}

impl Report {
    fn check(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check { name: name.into(), passed, detail: detail.into() });
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> usize {
        self.checks.iter().filter(|c| !c.passed).count()
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{} {:<40} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail)?;
        }
        write!(f, "{} checks, {} failed", self.checks.len(), self.failures())
    }
}

pub fn run(suite: Suite) -> Result<Report> {
    let mut r = Report::default();
    match suite {
        Suite::Masking => masking(&mut r)?,
        Suite::Leakage => leakage(&mut r)?,
        Suite::Grads => grads(&mut r)?,
        Suite::Costs => costs(&mut r)?,
        Suite::All => {
            masking(&mut r)?;
            leakage(&mut r)?;
            grads(&mut r)?;
            costs(&mut r)?;
        }
    }
    Ok(r)
}

pub const MASK_KEEP_RATIOS: [f64; 4] = [0.1, 0.25, 0.5, 1.0];

/// Every grid from 1x1 to 32x32 (rectangles included) at each keep ratio.
/// Returns the number of masks checked and the first problem found.
pub fn sweep_masks(seeds: u64) -> Result<(usize, Option<String>)> {
    let mut checked = 0;
    for h in 1..=32 {
        for w in 1..=32 {
            for keep in MASK_KEEP_RATIOS {
                for seed in 0..seeds {
                    let m = generate_block_mask(h, w, keep, seed)?;
                    checked += 1;
                    let problem = mask_problem(&m, h, w, keep);
                    if problem.is_some() {
                        return Ok((
                            checked,
                            problem.map(|p| format!("{}x{} keep {} seed {}: {}", h, w, keep, seed, p)),
                        ));
                    }
                }
            }
        }
    }
    Ok((checked, None))
}

fn mask_problem(m: &MaskSet, h: usize, w: usize, keep: f64) -> Option<String> {
    if let Err(e) = m.validate() {
        return Some(e.to_string());
    }
    if m.visible3.len() != visible_count(h * w, keep) || m.grid3.masked_count() + m.visible3.len() != h * w {
        return Some("visible count is not round(keep * tokens)".into());
    }
    if (m.grid1.h, m.grid1.w, m.grid2.h, m.grid2.w) != (4 * h, 4 * w, 2 * h, 2 * w) {
        return Some("stage grids do not follow the 4/2/1 ladder".into());
    }
    if !alignment_check(m, [4, 2, 2]) {
        return Some("alignment check failed".into());
    }
    match MaskSet::from_bytes(&m.to_bytes()) {
        Ok(back) if back == *m => None,
        _ => Some("binary round trip changed the mask".into()),
    }
}

fn masking(r: &mut Report) -> Result<()> {
    let (n, problem) = sweep_masks(3)?;
    r.check("mask sweep 1..32 x 1..32", problem.is_none(), problem.unwrap_or_else(|| format!("{} masks", n)));
    let m = generate_block_mask(14, 14, 0.25, 0)?;
    r.check("224px keep 0.25 keeps 49 tokens", m.visible3.len() == 49, format!("{} visible", m.visible3.len()));
    let a = generate_block_mask(14, 14, 0.25, 42)?;
    let b = generate_block_mask(14, 14, 0.25, 42)?;
    r.check("same seed, same mask", a == b, "");
    Ok(())
}

fn leakage(r: &mut Report) -> Result<()> {
    let (arch, dec) = (ArchConfig::tiny_test(), DecoderConfig::tiny_test());
    let masked = verify_no_leakage(&arch, &dec, 0, 100, 0.25, ConvMode::Masked)?;
    r.check(
        "masked conv: visible outputs unchanged",
        masked.all_passed(),
        format!("{}/{} trials bit-identical", masked.passes(), masked.trials.len()),
    );
    let plain = verify_no_leakage(&arch, &dec, 0, 100, 0.25, ConvMode::Plain)?;
    r.check(
        "plain conv: leakage detected",
        plain.failures() >= 99,
        format!("{}/{} trials diverged", plain.failures(), plain.trials.len()),
    );
    let full = verify_no_leakage(&arch, &dec, 0, 5, 1.0, ConvMode::Plain)?;
    r.check("keep 1.0: nothing to leak", full.all_passed(), format!("{}/5", full.passes()));
    Ok(())
}

/// Central-difference check of `build` against the tape: the largest
/// `|analytic - numeric| / (|numeric| + 1e-8)` over every element of every
/// input, for the scalar `sum(out * R)` with a fixed random `R`.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], h: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, &vars)?;
    let mut rng = CounterRng::new(0xC0FFEE);
    let weights = Tensor::from_fn(g.shape(out), |_| rng.unit_f64() * 2.0 - 1.0);
    let rv = g.constant(weights.clone());
    let prod = g.mul(out, rv)?;
    let loss = g.sum_all(prod);
    g.backward(loss)?;
    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum())
    };
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).expect("leaf requires grad").clone();
        for e in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[e] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[e] -= h;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            worst = worst.max((analytic.data()[e] - numeric).abs() / (numeric.abs() + 1e-8));
        }
    }
    Ok(worst)
}

pub type Build = fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

/// Small input shapes and expressions covering each differentiable primitive.
pub fn primitive_cases() -> Vec<(&'static str, Vec<Vec<usize>>, Build)> {
    vec![
        ("conv2d stride 2 pad 1", vec![vec![1, 2, 5, 5], vec![3, 2, 3, 3], vec![3]], |g, v| {
            g.conv2d(v[0], v[1], v[2], 2, 1)
        }),
        ("depthwise 5x5", vec![vec![1, 3, 6, 6], vec![3, 1, 5, 5], vec![3]], |g, v| {
            g.depthwise_conv2d(v[0], v[1], v[2], 2)
        }),
        ("linear", vec![vec![2, 3, 4], vec![5, 4], vec![5]], |g, v| g.linear(v[0], v[1], v[2])),
        ("layer norm", vec![vec![3, 6], vec![6], vec![6]], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-6)),
        ("attention with bias", vec![vec![1, 2, 4, 3], vec![1, 2, 4, 3], vec![1, 2, 4, 3], vec![2, 4, 4]], |g, v| {
            g.softmax_attention(v[0], v[1], v[2], Some(v[3]))
        }),
        ("gelu", vec![vec![2, 7]], |g, v| Ok(g.gelu(v[0]))),
        ("max pool 2x2", vec![vec![1, 2, 4, 4]], |g, v| g.max_pool2d(v[0])),
        ("masked zeroing", vec![vec![2, 2, 3, 3]], |g, v| {
            let visible = (0..18).map(|i| i % 3 != 1).collect();
            g.mask_spatial(v[0], &SpatialMask { batch: 2, h: 3, w: 3, visible })
        }),
        ("gather then scatter", vec![vec![2, 5, 3]], |g, v| {
            let idx = vec![vec![4, 0, 2], vec![1, 3, 0]];
            let x = g.gather_rows(v[0], &idx)?;
            g.scatter_rows(x, &idx, 6)
        }),
        ("patchify", vec![vec![1, 2, 4, 4]], |g, v| g.patchify(v[0], 2)),
        ("mean and variance", vec![vec![3, 5]], |g, v| {
            let m = g.mean_last(v[0])?;
            let s = g.var_last(v[0])?;
            g.mul(m, s)
        }),
        ("permute and reshape", vec![vec![2, 3, 4]], |g, v| {
            let p = g.permute(v[0], &[2, 0, 1])?;
            g.reshape(p, &[4, 6])
        }),
    ]
}

/// The tiny model's loss against finite differences along `sign(grad)` for
/// every parameter tensor. Returns the largest relative error among tensors
/// whose directional derivative exceeds the rounding floor and the number of
/// tensors checked.
pub fn end_to_end_gradcheck(seed: u64) -> Result<(f64, usize, usize)> {
    const H: f64 = 1e-5;
    const FLOOR: f64 = 1e-6;
    let mut model = ConvMae::<f64>::new(ArchConfig::tiny_test(), DecoderConfig::tiny_test(), seed)?;
    let mut rng = CounterRng::new(seed ^ 0x6AD);
    for (_, t) in model.params.iter_mut() {
        let scale = if t.rank() == 1 { 0.5 } else { (3.0 * t.shape()[0] as f64 / t.numel() as f64).sqrt() };
        for x in t.data_mut() {
            *x = (rng.unit_f64() * 2.0 - 1.0) * scale;
        }
    }
    let img = Tensor::from_fn(&[1, 3, 32, 32], |_| rng.unit_f64() * 2.0 - 1.0);
    let masks = BatchMask::generate(1, 2, 2, 0.5, seed)?;
    let loss_of = |m: &ConvMae<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let f = m.forward(&mut g, &img, &masks, ConvMode::Masked)?;
        Ok(g.value(f.loss.expect("masked tokens present")).item())
    };
    let mut g = Graph::new();
    let f = model.forward(&mut g, &img, &masks, ConvMode::Masked)?;
    g.backward(f.loss.expect("masked tokens present"))?;
    let (mut worst, mut checked, mut total) = (0.0f64, 0, 0);
    for (name, var) in f.bound.iter() {
        total += 1;
        let grad = g.grad(*var).expect("parameter gradient");
        let analytic: f64 = grad.data().iter().map(|x| x.abs()).sum();
        let shifted = |sign: f64| -> Result<f64> {
            let mut m = model.clone();
            let t = m.params.get_mut(name).expect("bound parameter exists");
            for (x, d) in t.data_mut().iter_mut().zip(grad.data()) {
                *x += sign * H * if *d < 0.0 { -1.0 } else { 1.0 };
            }
            loss_of(&m)
        };
        let numeric = (shifted(1.0)? - shifted(-1.0)?) / (2.0 * H);
        if numeric.abs() >= FLOOR {
            checked += 1;
            worst = worst.max((analytic - numeric).abs() / (numeric.abs() + 1e-8));
        } else if (analytic - numeric).abs() >= 1e-9 {
            worst = f64::INFINITY;
        }
    }
    Ok((worst, checked, total))
}

fn grads(r: &mut Report) -> Result<()> {
    let mut rng = CounterRng::new(11);
    for (name, shapes, build) in primitive_cases() {
        let inputs: Vec<Tensor<f64>> =
            shapes.iter().map(|s| Tensor::from_fn(s, |_| rng.unit_f64() * 2.0 - 1.0)).collect();
        let err = gradcheck(&inputs, 1e-5, build)?;
        r.check(format!("grad {}", name), err < 1e-4, format!("max rel err {:.2e}", err));
    }
    let (err, checked, total) = end_to_end_gradcheck(3)?;
    r.check(
        "grad end-to-end tiny loss",
        err < 1e-4,
        format!("max rel err {:.2e} over {}/{} tensors", err, checked, total),
    );
    Ok(())
}

/// Published encoder sizes in parameters.
pub const PARAM_TARGETS: [(ArchPreset, f64); 5] = [
    (ArchPreset::ConvMaeS, 22e6),
    (ArchPreset::ConvMaeB, 84e6),
    (ArchPreset::ConvMaeBStar, 88e6),
    (ArchPreset::ConvMaeL, 322e6),
    (ArchPreset::ConvMaeH, 666e6),
];

fn costs(r: &mut Report) -> Result<()> {
    for (preset, target) in PARAM_TARGETS {
        let c = count_params(&preset.arch(), &preset.decoder());
        let rel = (c.encoder as f64 - target) / target;
        r.check(
            format!("params {}", preset),
            rel.abs() <= 0.03,
            format!(
                "encoder {:.2}M (target {:.0}M, {:+.1}%), with decoder {:.2}M",
                c.encoder as f64 / 1e6,
                target / 1e6,
                rel * 100.0,
                c.total() as f64 / 1e6
            ),
        );
    }
    let b = ArchPreset::ConvMaeB;
    let (arch, dec) = (b.arch(), b.decoder());
    let block = count_flops(&arch, &dec, 0.25, MaskingMode::Block, 5)?;
    let full = count_flops(&arch, &dec, 0.25, MaskingMode::RandomFull, 5)?;
    let ratio = full.macs as f64 / block.macs as f64;
    r.check("flops random-full / block", (ratio - 1.7).abs() <= 0.1, format!("{:.3}x (target 1.7x)", ratio));
    for (k, target) in [(7, 1.003), (9, 1.007)] {
        let kr = count_flops(&arch, &dec, 0.25, MaskingMode::Block, k)?.macs as f64 / block.macs as f64;
        r.check(
            format!("flops {}x{} / 5x5", k, k),
            (kr - target).abs() <= 0.002,
            format!("{:.4}x (target {}x)", kr, target),
        );
    }
    let sums = [&block, &full].iter().all(|c| {
        Part::ALL.iter().map(|&p| c.macs_for_part(p)).sum::<u64>() == c.macs
            && OpClass::ALL.iter().map(|&o| c.macs_for_class(o)).sum::<u64>() == c.macs
    });
    r.check("flops breakdown sums to total", sums, "");
    Ok(())
}
