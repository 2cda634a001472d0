//! Release gate: one PASS/FAIL line per acceptance criterion.

mod common;

use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::random_tensor;
use convmae::analysis::{count_flops, count_params, verify_no_leakage, MaskingMode};
use convmae::backbone::{convert_to_windowed, Backbone, WindowSpec, PYRAMID_STRIDES};
use convmae::config::{ArchConfig, ArchPreset, DecoderConfig};
use convmae::export::{export_features, pyramid_tensors};
use convmae::io::read_raw_f32;
use convmae::masking::{generate_block_mask, BatchMask, MaskGrid};
use convmae::model::{patch_targets, reconstruction_loss, ConvMae, ConvMode};
use convmae::rng::CounterRng;
use convmae::tensor::{Graph, Tensor};
use convmae::train::data::load_normalized;
use convmae::train::{pretrain, Checkpoint, RunConfig};
use convmae::verify::primitive_cases;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn params() -> Outcome {
    let targets = [
        (ArchPreset::ConvMaeS, 22e6),
        (ArchPreset::ConvMaeB, 84e6),
        (ArchPreset::ConvMaeBStar, 88e6),
        (ArchPreset::ConvMaeL, 322e6),
        (ArchPreset::ConvMaeH, 666e6),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (preset, target) in targets {
        let n = count_params(&preset.arch(), &preset.decoder()).encoder as f64;
        let rel = (n - target) / target;
        ok &= rel.abs() <= 0.03;
        parts.push(format!("{} {:.2}M ({:+.1}%)", preset, n / 1e6, rel * 100.0));
    }
    outcome(ok, parts.join(", "))
}

fn flops() -> Outcome {
    let b = ArchPreset::ConvMaeB;
    let (arch, dec) = (b.arch(), b.decoder());
    let macs = |mode, k| count_flops(&arch, &dec, 0.25, mode, k).unwrap().macs as f64;
    let base = macs(MaskingMode::Block, 5);
    let full = macs(MaskingMode::RandomFull, 5) / base;
    let k7 = macs(MaskingMode::Block, 7) / base;
    let k9 = macs(MaskingMode::Block, 9) / base;
    let ok = (full - 1.7).abs() <= 0.1 && (k7 - 1.003).abs() <= 0.002 && (k9 - 1.007).abs() <= 0.002;
    outcome(ok, format!("random-full/block {:.3}x, 7x7 {:.4}x, 9x9 {:.4}x", full, k7, k9))
}

fn leakage() -> Outcome {
    let (arch, dec) = (ArchConfig::tiny_test(), DecoderConfig::tiny_test());
    let masked = verify_no_leakage(&arch, &dec, 0, 100, 0.25, ConvMode::Masked).unwrap();
    let plain = verify_no_leakage(&arch, &dec, 0, 100, 0.25, ConvMode::Plain).unwrap();
    outcome(
        masked.passes() == 100 && plain.failures() >= 99,
        format!("masked {}/100 bit-identical, plain {}/100 diverged", masked.passes(), plain.failures()),
    )
}

/// `round(n * num / den)` with ties to even.
fn rounded_share(n: usize, num: usize, den: usize) -> usize {
    let (q, r) = (n * num / den, n * num % den);
    match (2 * r).cmp(&den) {
        std::cmp::Ordering::Less => q,
        std::cmp::Ordering::Greater => q + 1,
        std::cmp::Ordering::Equal => q + q % 2,
    }
}

fn follows(fine: &MaskGrid, coarse: &MaskGrid, s: usize) -> bool {
    fine.h == coarse.h * s
        && fine.w == coarse.w * s
        && (0..fine.h)
            .all(|r| (0..fine.w).all(|c| fine.cells[r * fine.w + c] == coarse.cells[(r / s) * coarse.w + c / s]))
}

fn masking() -> Outcome {
    let mut checked = 0;
    for h in 1..=32 {
        for w in 1..=32 {
            for (keep, num, den) in [(0.1, 1, 10), (0.25, 1, 4), (0.5, 1, 2), (1.0, 1, 1)] {
                for seed in 0..3 {
                    let m = generate_block_mask(h, w, keep, seed).unwrap();
                    let count_ok = m.visible3.len() == rounded_share(h * w, num, den)
                        && m.grid3.cells.iter().filter(|&&c| !c).count() == m.visible3.len()
                        && m.visible3.iter().all(|&v| !m.grid3.cells[v]);
                    let blocks_ok = follows(&m.grid2, &m.grid3, 2) && follows(&m.grid1, &m.grid2, 2);
                    if !(count_ok && blocks_ok) {
                        return outcome(
                            false,
                            format!("{}x{} keep {} seed {}: count {} blocks {}", h, w, keep, seed, count_ok, blocks_ok),
                        );
                    }
                    checked += 1;
                }
            }
        }
    }
    outcome(true, format!("{} masks over grids 1..32 x 1..32", checked))
}

fn gradients() -> Outcome {
    let mut rng = CounterRng::new(21);
    let mut worst = 0.0f64;
    let mut count = 0;
    for (name, shapes, build) in primitive_cases() {
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| random_tensor(s, &mut rng)).collect();
        let err = common::gradcheck(&inputs, &vec![true; inputs.len()], 1e-5, |g, v| {
            build(g, v).unwrap_or_else(|e| panic!("{}: {}", name, e))
        });
        worst = worst.max(err);
        count += 1;
    }
    let probe = common::end_to_end_probe(3, 14, 6);
    outcome(
        worst < 1e-4 && probe.passed(),
        format!(
            "{} primitives max rel {:.1e}; end-to-end max rel {:.1e} over {}/{} tensors, {} floor violations",
            count,
            worst,
            probe.worst_rel,
            probe.checked,
            probe.total,
            probe.floor_violations.len()
        ),
    )
}

fn loss_masking() -> Outcome {
    let mut rng = CounterRng::new(33);
    let img = random_tensor(&[3, 3, 64, 64], &mut rng);
    let targets = patch_targets(&img, 16, true).unwrap();
    let masks = BatchMask::generate(3, 4, 4, 0.25, 8).unwrap();
    let pred = random_tensor(&[3, 16, 768], &mut rng);
    let mut nudged = pred.clone();
    for (b, vis) in masks.visible_indices().iter().enumerate() {
        for &v in vis {
            for x in &mut nudged.data_mut()[(b * 16 + v) * 768..(b * 16 + v + 1) * 768] {
                *x += 10.0 * rng.unit_f64() - 5.0;
            }
        }
    }
    let eval = |p: Tensor<f64>| {
        let mut g = Graph::new();
        let pv = g.leaf(p, true);
        let loss = reconstruction_loss(&mut g, pv, &targets, &masks).unwrap();
        g.backward(loss).unwrap();
        (g.value(loss).item(), g.grad(pv).unwrap().clone())
    };
    let (a, grad) = eval(pred);
    let (b, _) = eval(nudged);
    let mut visible_zero = true;
    let mut masked_live = true;
    for (bi, vis) in masks.visible_indices().iter().enumerate() {
        for t in 0..16 {
            let row = &grad.data()[(bi * 16 + t) * 768..(bi * 16 + t + 1) * 768];
            if vis.contains(&t) {
                visible_zero &= row.iter().all(|&x| x == 0.0);
            } else {
                masked_live &= row.iter().any(|&x| x != 0.0);
            }
        }
    }
    outcome(
        visible_zero && masked_live && a.to_bits() == b.to_bits(),
        format!("visible grads zero {}, loss bit-identical {}", visible_zero, a.to_bits() == b.to_bits()),
    )
}

fn learning() -> Outcome {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let runs: Vec<_> = dirs
        .iter()
        .map(|d| pretrain(RunConfig { out_dir: d.path().to_path_buf(), ..RunConfig::default() }).unwrap())
        .collect();
    let ratio = runs[0].final_eval_loss / runs[0].initial_eval_loss;
    let read = |p: &std::path::Path| std::fs::read(p).unwrap();
    // checkpoints record their own output directory, so compare the tensors
    let weights = |p: &std::path::Path| Checkpoint::<f32>::load(p).unwrap().params;
    let (wa, wb) = (weights(&runs[0].checkpoint), weights(&runs[1].checkpoint));
    let same = read(&runs[0].metrics) == read(&runs[1].metrics)
        && wa.len() == wb.len()
        && wa.iter().all(|(n, t)| wb.get(n).is_some_and(|u| u.bit_eq(t)));
    outcome(
        runs[0].steps == 200 && ratio < 0.5 && same,
        format!(
            "{} steps, eval loss {:.4} -> {:.4} (ratio {:.3}), reruns bit-identical {}",
            runs[0].steps, runs[0].initial_eval_loss, runs[0].final_eval_loss, ratio, same
        ),
    )
}

fn backbone() -> Outcome {
    let arch = ArchConfig { image_size: 224, depths: [1, 1, 3], ..ArchConfig::tiny_test() };
    let model = ConvMae::<f64>::new(arch, DecoderConfig::tiny_test(), 4).unwrap();
    let img = random_tensor(&[1, 3, 224, 224], &mut CounterRng::new(2));
    let e3 = |bb: &Backbone<f64>| pyramid_tensors(bb, &img).unwrap()[2].clone();
    let global = e3(&Backbone::from_model(&model));
    let spec = WindowSpec { window: 14, global_layers: Default::default() };
    let windowed = e3(&convert_to_windowed(&model, &spec).unwrap());
    let diff = windowed.max_abs_diff(&global);

    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("images");
    std::fs::create_dir_all(&images).unwrap();
    image::RgbImage::from_fn(48, 40, |x, y| image::Rgb([(x * 5) as u8, (y * 6) as u8, ((x + y) % 7 * 30) as u8]))
        .save(images.join("a.png"))
        .unwrap();
    let config = RunConfig::default();
    let (a, d) = config.model_configs();
    let small = ConvMae::<f32>::new(a, d, 9).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    Checkpoint { step: 0, rng_state: (0, 0), config, params: small.params.clone(), optimizer: None }
        .save(&ckpt)
        .unwrap();
    let out = dir.path().join("features");
    let summary = export_features(&ckpt, &images, &out).unwrap();
    let side = small.arch.image_size;
    let strides: Vec<usize> = summary.entries.iter().map(|e| e.stride).collect();
    let strides_ok = strides == PYRAMID_STRIDES
        && summary.entries.iter().all(|e| e.shape[2] * e.stride == side && e.shape[3] * e.stride == side);
    let reference =
        pyramid_tensors(&Backbone::from_model(&small), &load_normalized(&images.join("a.png"), side).unwrap()).unwrap();
    let exact = summary
        .entries
        .iter()
        .zip(&reference)
        .all(|(e, t)| read_raw_f32(&out.join(&e.file), &e.shape).unwrap().bit_eq(t));
    outcome(
        diff <= 1e-6 && strides_ok && exact,
        format!("full-window diff {:.1e}, strides {:?}, exported levels bit-exact {}", diff, strides, exact),
    )
}

fn main() -> ExitCode {
    type Criterion = (&'static str, Duration, fn() -> Outcome);
    let secs = Duration::from_secs;
    let criteria: [Criterion; 8] = [
        ("parameter counts", secs(1), params),
        ("FLOPs ratios", secs(1), flops),
        ("no leakage through masked conv", secs(120), leakage),
        ("masking arithmetic", secs(30), masking),
        ("gradient correctness", secs(300), gradients),
        ("loss ignores visible tokens", secs(60), loss_masking),
        ("desk-scale learning signal", secs(1800), learning),
        ("backbone conversion and export", secs(120), backbone),
    ];
    let mut failed = 0;
    for (i, (name, limit, run)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            outcome(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        let took = start.elapsed();
        let passed = result.passed && took <= limit;
        failed += usize::from(!passed);
        println!(
            "criterion {} {:<32} {}  {} [{:.2}s, limit {}s]",
            i + 1,
            name,
            if passed { "PASS" } else { "FAIL" },
            result.detail,
            took.as_secs_f64(),
            limit.as_secs()
        );
    }
    println!("{} of 8 criteria passed", 8 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
