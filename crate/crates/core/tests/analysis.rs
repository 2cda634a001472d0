use convmae::analysis::{count_flops, count_params, verify_no_leakage, MaskingMode, OpClass, Part};
use convmae::config::{ArchConfig, ArchPreset, DecoderConfig};
use convmae::masking::BatchMask;
use convmae::model::params::{encoder_layout, model_layout};
use convmae::model::{ConvMae, ConvMode, ParamStore};
use convmae::tensor::{Graph, Tensor};

fn within(value: f64, target: f64, rel: f64) -> bool {
    (value - target).abs() <= rel * target
}

#[test]
fn encoder_params_match_published_sizes() {
    let table = [
        (ArchPreset::ConvMaeS, 22e6),
        (ArchPreset::ConvMaeB, 84e6),
        (ArchPreset::ConvMaeBStar, 88e6),
        (ArchPreset::ConvMaeL, 322e6),
        (ArchPreset::ConvMaeH, 666e6),
    ];
    for (preset, target) in table {
        let n = count_params(&preset.arch(), &preset.decoder()).encoder as f64;
        assert!(within(n, target, 0.03), "{}: {:.2}M vs {:.0}M", preset, n / 1e6, target / 1e6);
    }
}

#[test]
fn closed_form_matches_layout_for_every_preset() {
    for preset in ArchPreset::ALL {
        let (arch, dec) = (preset.arch(), preset.decoder());
        let c = count_params(&arch, &dec);
        let enc: usize = encoder_layout(&arch).iter().map(|d| d.numel()).sum();
        let all: usize = model_layout(&arch, &dec).iter().map(|d| d.numel()).sum();
        assert_eq!(c.encoder, enc as u64, "{}", preset);
        assert_eq!(c.total(), all as u64, "{}", preset);
        assert_eq!(c.with_decoder(false), c.encoder);
    }
}

#[test]
fn closed_form_matches_instantiated_small_and_base() {
    for preset in [ArchPreset::ConvMaeS, ArchPreset::ConvMaeB] {
        let (arch, dec) = (preset.arch(), preset.decoder());
        let store = ParamStore::<f32>::zeros(&model_layout(&arch, &dec));
        assert_eq!(store.numel() as u64, count_params(&arch, &dec).total(), "{}", preset);
    }
}

#[test]
fn depthless_encoder_is_embeds_and_transitions() {
    let arch = ArchConfig { depths: [0, 0, 0], ..ArchConfig::convmae_b() };
    // 4x4 patch embed 3->256, 2x2 transitions 256->384->768, final norm on 768.
    let hand = (256 * 3 * 16 + 256) + (384 * 256 * 4 + 384) + (768 * 384 * 4 + 768) + 2 * 768;
    assert_eq!(count_params(&arch, &DecoderConfig::default()).encoder, hand);
}

#[test]
fn random_full_costs_about_seventeen_tenths_of_block() {
    let p = ArchPreset::ConvMaeB;
    let block = count_flops(&p.arch(), &p.decoder(), 0.25, MaskingMode::Block, 5).unwrap();
    let full = count_flops(&p.arch(), &p.decoder(), 0.25, MaskingMode::RandomFull, 5).unwrap();
    let ratio = full.macs as f64 / block.macs as f64;
    assert!((ratio - 1.7).abs() <= 0.1, "ratio {}", ratio);
    assert_eq!(block.stage3_tokens, 49);
    assert_eq!(full.stage3_tokens, 196);
}

#[test]
fn larger_kernels_cost_slightly_more() {
    let p = ArchPreset::ConvMaeB;
    let cost = |k| count_flops(&p.arch(), &p.decoder(), 0.25, MaskingMode::Block, k).unwrap().macs as f64;
    let base = cost(5);
    assert!((cost(7) / base - 1.003).abs() <= 0.002, "7x7 {}", cost(7) / base);
    assert!((cost(9) / base - 1.007).abs() <= 0.002, "9x9 {}", cost(9) / base);
    assert_eq!(cost(5) / base, 1.0);
}

#[test]
fn breakdown_sums_to_total() {
    for preset in ArchPreset::ALL {
        for mode in [MaskingMode::Block, MaskingMode::RandomFull] {
            let r = count_flops(&preset.arch(), &preset.decoder(), 0.25, mode, 7).unwrap();
            let by_part: u64 = Part::ALL.iter().map(|&p| r.macs_for_part(p)).sum();
            let by_class: u64 = OpClass::ALL.iter().map(|&c| r.macs_for_class(c)).sum();
            assert_eq!(by_part, r.macs);
            assert_eq!(by_class, r.macs);
        }
    }
}

#[test]
fn modes_agree_at_full_keep() {
    let p = ArchPreset::ConvMaeL;
    let a = count_flops(&p.arch(), &p.decoder(), 1.0, MaskingMode::Block, 5).unwrap();
    let b = count_flops(&p.arch(), &p.decoder(), 1.0, MaskingMode::RandomFull, 5).unwrap();
    assert_eq!(a.macs, b.macs);
}

#[test]
fn analytic_macs_match_executed_graph() {
    let arch = ArchConfig::tiny_test();
    let dec = DecoderConfig::tiny_test();
    let model = ConvMae::<f32>::new(arch.clone(), dec.clone(), 1).unwrap();
    for keep in [0.25, 0.5, 1.0] {
        let masks = BatchMask::generate(1, 2, 2, keep, 3).unwrap();
        let img = Tensor::<f32>::zeros(&[1, 3, 32, 32]);
        let mut g = Graph::new();
        model.forward(&mut g, &img, &masks, ConvMode::Masked).unwrap();
        let r = count_flops(&arch, &dec, keep, MaskingMode::Block, 5).unwrap();
        assert_eq!(g.macs(), r.macs, "keep {}", keep);
    }
}

#[test]
fn kv_report_lists_breakdown() {
    let p = ArchPreset::ConvMaeS;
    let r = count_flops(&p.arch(), &p.decoder(), 0.25, MaskingMode::Block, 5).unwrap();
    let kv = r.to_kv();
    assert!(kv.contains(&format!("macs={}\n", r.macs)));
    assert!(kv.contains("macs.stage1.depthwise="));
    assert!(r.to_string().contains("GMACs"));
}

#[test]
fn masked_conv_never_leaks() {
    let (arch, dec) = (ArchConfig::tiny_test(), DecoderConfig::tiny_test());
    let r = verify_no_leakage(&arch, &dec, 100, 20, 0.25, ConvMode::Masked).unwrap();
    assert!(r.all_passed(), "{}", r);
}

#[test]
fn plain_conv_leaks() {
    let (arch, dec) = (ArchConfig::tiny_test(), DecoderConfig::tiny_test());
    let r = verify_no_leakage(&arch, &dec, 100, 20, 0.25, ConvMode::Plain).unwrap();
    assert_eq!(r.failures(), 20, "{}", r);
    assert!(r.to_string().contains("diverged at"));
}

#[test]
fn nothing_to_leak_at_full_keep() {
    let (arch, dec) = (ArchConfig::tiny_test(), DecoderConfig::tiny_test());
    let r = verify_no_leakage(&arch, &dec, 7, 3, 1.0, ConvMode::Plain).unwrap();
    assert!(r.all_passed());
}

#[test]
fn zero_trials_is_an_error() {
    let (arch, dec) = (ArchConfig::tiny_test(), DecoderConfig::tiny_test());
    assert!(verify_no_leakage(&arch, &dec, 0, 0, 0.25, ConvMode::Masked).is_err());
}
