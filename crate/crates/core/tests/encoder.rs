mod common;

use common::random_tensor;
use convmae::config::{ArchConfig, ArchPreset, DecoderConfig};
use convmae::masking::{generate_block_mask, BatchMask, MaskGrid, MaskSet};
use convmae::model::encoder::{self, patch_embed1, EncoderVars};
use convmae::model::params::Affine;
use convmae::model::{masked_conv_block, stage_transition, ConvMae, ConvMode};
use convmae::rng::CounterRng;
use convmae::tensor::{Graph, SpatialMask, Tensor};
use convmae::Error;

fn tiny(image: usize) -> ConvMae<f64> {
    let arch = ArchConfig { image_size: image, ..ArchConfig::tiny_test() };
    ConvMae::new(arch, DecoderConfig::tiny_test(), 11).unwrap()
}

fn random_spatial(batch: usize, h: usize, w: usize, rng: &mut CounterRng) -> SpatialMask {
    let visible = (0..batch * h * w).map(|_| rng.below(2) == 0).collect();
    SpatialMask { batch, h, w, visible }
}

/// Replaces every masked position of an NCHW tensor with a fresh random value.
fn perturb_masked(x: &Tensor<f64>, m: &SpatialMask, rng: &mut CounterRng) -> Tensor<f64> {
    let s = x.shape().to_vec();
    let mut y = x.clone();
    let hw = s[2] * s[3];
    for (i, v) in y.data_mut().iter_mut().enumerate() {
        let b = i / (s[1] * hw);
        if !m.visible[b * hw + i % hw] {
            *v = rng.unit_f64() * 200.0 - 100.0;
        }
    }
    y
}

fn visible_values(x: &Tensor<f64>, m: &SpatialMask) -> Vec<u64> {
    let s = x.shape();
    let hw = s[2] * s[3];
    x.data()
        .iter()
        .enumerate()
        .filter(|(i, _)| m.visible[(i / (s[1] * hw)) * hw + i % hw])
        .map(|(_, v)| v.to_bits())
        .collect()
}

fn const_affine(g: &mut Graph<f64>, wshape: &[usize], w: f64, cout: usize) -> Affine {
    Affine { weight: g.constant(Tensor::full(wshape, w)), bias: g.constant(Tensor::zeros(&[cout])) }
}

// ---------------------------------------------------------------- patch embed

#[test]
fn patch_embed_grid_sizes() {
    for (side, grid) in [(224, 56), (16, 4)] {
        let mut g = Graph::<f64>::new();
        let w = const_affine(&mut g, &[2, 3, 4, 4], 0.1, 2);
        let img = g.constant(Tensor::full(&[1, 3, side, side], 1.0));
        let y = patch_embed1(&mut g, &w, img).unwrap();
        assert_eq!(g.shape(y), &[1, 2, grid, grid]);
    }
}

#[test]
fn patch_embed_of_zero_image_is_zero() {
    let mut g = Graph::<f64>::new();
    let w = const_affine(&mut g, &[4, 3, 4, 4], 0.3, 4);
    let img = g.constant(Tensor::zeros(&[2, 3, 16, 16]));
    let y = patch_embed1(&mut g, &w, img).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn patch_embed_rejects_indivisible_sides() {
    let mut g = Graph::<f64>::new();
    let w = const_affine(&mut g, &[4, 3, 4, 4], 0.3, 4);
    let img = g.constant(Tensor::zeros(&[1, 3, 18, 16]));
    assert!(matches!(patch_embed1(&mut g, &w, img), Err(Error::Config(_))));
}

// ---------------------------------------------------------------- masked conv block

#[test]
fn masked_block_with_all_visible_equals_plain_block() {
    let model = tiny(32);
    let mut rng = CounterRng::new(3);
    let x = random_tensor(&[2, 32, 8, 8], &mut rng);
    let mut g = Graph::new();
    let b = model.params.bind(&mut g);
    let vars = EncoderVars::bind(&b, &model.arch).unwrap();
    let xv = g.constant(x);
    let m = SpatialMask::all_visible(2, 8, 8);
    let masked = masked_conv_block(&mut g, &vars.stage1[0], xv, &m, 5).unwrap();
    let plain = convmae::model::blocks::conv_block(&mut g, &vars.stage1[0], xv, None, 5).unwrap();
    assert!(g.value(masked).bit_eq(g.value(plain)));
}

#[test]
fn masked_block_with_all_masked_is_zero() {
    let model = tiny(32);
    let mut rng = CounterRng::new(4);
    let mut g = Graph::new();
    let b = model.params.bind(&mut g);
    let vars = EncoderVars::bind(&b, &model.arch).unwrap();
    let xv = g.constant(random_tensor(&[1, 32, 8, 8], &mut rng));
    let m = SpatialMask { batch: 1, h: 8, w: 8, visible: vec![false; 64] };
    let y = masked_conv_block(&mut g, &vars.stage1[0], xv, &m, 5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn masked_block_visible_outputs_ignore_masked_inputs() {
    let model = tiny(32);
    let mut rng = CounterRng::new(5);
    for _ in 0..100 {
        let m = random_spatial(2, 6, 6, &mut rng);
        let x = random_tensor(&[2, 32, 6, 6], &mut rng);
        let x2 = perturb_masked(&x, &m, &mut rng);
        let run = |input: Tensor<f64>| {
            let mut g = Graph::new();
            let b = model.params.bind(&mut g);
            let vars = EncoderVars::bind(&b, &model.arch).unwrap();
            let xv = g.constant(input);
            let y = masked_conv_block(&mut g, &vars.stage1[0], xv, &m, 5).unwrap();
            g.value(y).clone()
        };
        let (a, b) = (run(x), run(x2));
        assert_eq!(visible_values(&a, &m), visible_values(&b, &m));
        let zero_at_masked = a.data().iter().enumerate().all(|(i, &v)| {
            let hw = 36;
            m.visible[(i / (32 * hw)) * hw + i % hw] || v == 0.0
        });
        assert!(zero_at_masked);
    }
}

#[test]
fn masked_block_rejects_mismatched_mask() {
    let model = tiny(32);
    let mut g = Graph::new();
    let b = model.params.bind(&mut g);
    let vars = EncoderVars::bind(&b, &model.arch).unwrap();
    let xv = g.constant(Tensor::zeros(&[1, 32, 8, 8]));
    let m = SpatialMask::all_visible(1, 4, 8);
    assert!(matches!(masked_conv_block(&mut g, &vars.stage1[0], xv, &m, 5), Err(Error::Shape(_))));
}

// ---------------------------------------------------------------- stage transition

#[test]
fn transitions_halve_the_grid() {
    let mut g = Graph::<f64>::new();
    let w = const_affine(&mut g, &[2, 2, 2, 2], 0.25, 2);
    let mut x = g.constant(Tensor::full(&[1, 2, 56, 56], 1.0));
    for side in [28, 14] {
        x = stage_transition(&mut g, &w, x, None).unwrap();
        assert_eq!(g.shape(x), &[1, 2, side, side]);
    }
}

#[test]
fn averaging_transition_keeps_constants() {
    let mut g = Graph::<f64>::new();
    let w =
        Affine { weight: g.constant(Tensor::from_fn(&[1, 1, 2, 2], |_| 0.25)), bias: g.constant(Tensor::zeros(&[1])) };
    let x = g.constant(Tensor::full(&[1, 1, 8, 8], 3.0));
    let m1 = SpatialMask::all_visible(1, 8, 8);
    let m2 = SpatialMask::all_visible(1, 4, 4);
    let y = stage_transition(&mut g, &w, x, Some((&m1, &m2))).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 3.0));
}

#[test]
fn misaligned_masks_abort_transition() {
    let mut g = Graph::<f64>::new();
    let w = const_affine(&mut g, &[1, 1, 2, 2], 0.25, 1);
    let x = g.constant(Tensor::full(&[1, 1, 4, 4], 1.0));
    let mut fine = SpatialMask::all_visible(1, 4, 4);
    fine.visible[1] = false;
    let coarse = SpatialMask::all_visible(1, 2, 2);
    assert!(matches!(stage_transition(&mut g, &w, x, Some((&fine, &coarse))), Err(Error::Invariant(_))));
}

#[test]
fn transition_visible_outputs_ignore_masked_inputs() {
    let mut rng = CounterRng::new(8);
    let mask = generate_block_mask(4, 4, 0.5, 9).unwrap();
    let batch = BatchMask::from_masks(vec![mask]).unwrap();
    let (fine, coarse) = (batch.spatial(1), batch.spatial(2));
    let wt = random_tensor(&[3, 2, 2, 2], &mut rng);
    let x = random_tensor(&[1, 2, 16, 16], &mut rng);
    let x2 = perturb_masked(&x, &fine, &mut rng);
    let run = |input: Tensor<f64>| {
        let mut g = Graph::new();
        let w = Affine { weight: g.constant(wt.clone()), bias: g.constant(Tensor::zeros(&[3])) };
        let xv = g.constant(input);
        let xv = g.mask_spatial(xv, &fine).unwrap();
        let y = stage_transition(&mut g, &w, xv, Some((&fine, &coarse))).unwrap();
        g.value(y).clone()
    };
    let (a, b) = (run(x), run(x2));
    assert_eq!(visible_values(&a, &coarse), visible_values(&b, &coarse));
}

// ---------------------------------------------------------------- stage 3 and encode

#[test]
fn quarter_keep_at_224_runs_49_tokens() {
    let model = tiny(224);
    let masks = BatchMask::generate(1, 14, 14, 0.25, 1).unwrap();
    let img = random_tensor(&[1, 3, 224, 224], &mut CounterRng::new(2));
    let mut g = Graph::new();
    let (_, f) = model.encode(&mut g, &img, &masks, ConvMode::Masked).unwrap();
    assert_eq!(g.shape(f.e1), &[1, 32, 56, 56]);
    assert_eq!(g.shape(f.e2), &[1, 48, 28, 28]);
    assert_eq!(g.shape(f.e3_visible), &[1, 49, 96]);
}

#[test]
fn full_keep_runs_every_token_in_order() {
    let model = tiny(32);
    let masks = BatchMask::all_visible(2, 2, 2);
    assert_eq!(masks.visible_indices(), vec![vec![0, 1, 2, 3]; 2]);
    let img = random_tensor(&[2, 3, 32, 32], &mut CounterRng::new(2));
    let mut g = Graph::new();
    let (_, f) = model.encode(&mut g, &img, &masks, ConvMode::Masked).unwrap();
    assert_eq!(g.shape(f.e3_visible), &[2, 4, 96]);
}

#[test]
fn stage3_is_equivariant_to_visible_order() {
    let model = tiny(64);
    let mut rng = CounterRng::new(12);
    let x = random_tensor(&[1, 96, 4, 4], &mut rng);
    let sorted = generate_block_mask(4, 4, 0.5, 3).unwrap();
    let mut shuffled = sorted.clone();
    rng.shuffle(&mut shuffled.visible3);
    let run = |m: MaskSet| {
        let mut g = Graph::new();
        let b = model.params.bind(&mut g);
        let vars = EncoderVars::bind(&b, &model.arch).unwrap();
        let xv = g.constant(x.clone());
        let masks = BatchMask::from_masks(vec![m]).unwrap();
        let y = encoder::stage3_forward(&mut g, &vars, &model.arch, xv, &masks).unwrap();
        g.value(y).clone()
    };
    let (a, b) = (run(sorted.clone()), run(shuffled.clone()));
    let c = 96;
    for (j, idx) in shuffled.visible3.iter().enumerate() {
        let i = sorted.visible3.iter().position(|v| v == idx).unwrap();
        for ch in 0..c {
            let (u, v) = (a.data()[i * c + ch], b.data()[j * c + ch]);
            assert!((u - v).abs() < 1e-12, "token {} channel {}: {} vs {}", idx, ch, u, v);
        }
    }
}

#[test]
fn base_preset_shapes_at_quarter_keep() {
    let preset = ArchPreset::ConvMaeB;
    let model = ConvMae::<f32>::new(preset.arch(), preset.decoder(), 0).unwrap();
    let masks = BatchMask::generate(1, 14, 14, 0.25, 5).unwrap();
    let img = Tensor::<f32>::from_fn(&[1, 3, 224, 224], |i| ((i % 97) as f32) / 97.0);
    let mut g = Graph::new();
    let (_, f) = model.encode(&mut g, &img, &masks, ConvMode::Masked).unwrap();
    assert_eq!(g.shape(f.e1), &[1, 256, 56, 56]);
    assert_eq!(g.shape(f.e2), &[1, 384, 28, 28]);
    assert_eq!(g.shape(f.e3_visible), &[1, 49, 768]);
}

#[test]
fn full_keep_masked_equals_plain_forward() {
    let model = tiny(32);
    let masks = BatchMask::all_visible(2, 2, 2);
    let img = random_tensor(&[2, 3, 32, 32], &mut CounterRng::new(21));
    let run = |mode| {
        let mut g = Graph::new();
        let (_, f) = model.encode(&mut g, &img, &masks, mode).unwrap();
        [f.e1, f.e2, f.e3_visible].map(|v| g.value(v).clone())
    };
    let (a, b) = (run(ConvMode::Masked), run(ConvMode::Plain));
    for (x, y) in a.iter().zip(&b) {
        assert!(x.bit_eq(y));
    }
}

fn perturb_image(img: &Tensor<f64>, m: &MaskGrid, rng: &mut CounterRng) -> Tensor<f64> {
    let s = img.shape().to_vec();
    let cell = s[2] / m.h;
    let mut out = img.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let (r, c) = ((i / s[3]) % s[2], i % s[3]);
        if m.get(r / cell, c / cell) {
            *v = rng.unit_f64() * 10.0 - 5.0;
        }
    }
    out
}

#[test]
fn masked_pixels_never_reach_visible_tokens() {
    let model = tiny(64);
    let mut rng = CounterRng::new(30);
    for seed in 0..5 {
        let mask = generate_block_mask(4, 4, 0.25, seed).unwrap();
        let masks = BatchMask::from_masks(vec![mask.clone()]).unwrap();
        let img = random_tensor(&[1, 3, 64, 64], &mut rng);
        let img2 = perturb_image(&img, &mask.grid3, &mut rng);
        let run = |input: &Tensor<f64>| {
            let mut g = Graph::new();
            let (_, f) = model.encode(&mut g, input, &masks, ConvMode::Masked).unwrap();
            [f.e1, f.e2, f.e3_visible].map(|v| g.value(v).clone())
        };
        let (a, b) = (run(&img), run(&img2));
        assert!(a[2].bit_eq(&b[2]));
        assert_eq!(visible_values(&a[0], &masks.spatial(1)), visible_values(&b[0], &masks.spatial(1)));
        for (t, stage) in [(&a[0], 1), (&a[1], 2)] {
            let m = masks.spatial(stage);
            let c = t.shape()[1];
            let hw = m.h * m.w;
            assert!(t.data().iter().enumerate().all(|(i, &v)| m.visible[(i / (c * hw)) * hw + i % hw] || v == 0.0));
        }
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let model = tiny(32);
    let masks = BatchMask::generate(2, 2, 2, 0.5, 4).unwrap();
    let img = random_tensor(&[2, 3, 32, 32], &mut CounterRng::new(40));
    let mut g = Graph::new();
    let fwd = model.forward(&mut g, &img, &masks, ConvMode::Masked).unwrap();
    g.backward(fwd.loss.unwrap()).unwrap();
    for (name, v) in fwd.bound.iter() {
        let grad = g.grad(*v).unwrap();
        assert!(grad.data().iter().any(|&x| x != 0.0), "{} received no gradient", name);
    }
}

#[test]
fn encode_rejects_wrong_image_size() {
    let model = tiny(32);
    let masks = BatchMask::all_visible(1, 2, 2);
    let mut g = Graph::new();
    let img = Tensor::zeros(&[1, 3, 48, 48]);
    assert!(matches!(model.encode(&mut g, &img, &masks, ConvMode::Masked), Err(Error::Config(_))));
}
