//! Turns a model's stage-3 global attention into shifted-window attention
//! and compares the two backbones on the same 224px input.
//!
//! ```text
//! cargo run --release --example windowed_backbone
//! ```

use convmae::backbone::{convert_to_windowed, Backbone, WindowSpec};
use convmae::config::{ArchConfig, DecoderConfig};
use convmae::model::ConvMae;
use convmae::rng::CounterRng;
use convmae::tensor::{Graph, Tensor};

fn e3(bb: &Backbone<f64>, img: &Tensor<f64>) -> anyhow::Result<Tensor<f64>> {
    let mut g = Graph::new();
    let p = bb.extract_pyramid(&mut g, img)?;
    Ok(g.value(p.levels[2]).clone())
}

fn main() -> anyhow::Result<()> {
    // tiny widths, 224px input so the stage-3 grid is 14x14
    let arch = ArchConfig { image_size: 224, depths: [1, 1, 4], ..ArchConfig::tiny_test() };
    let model = ConvMae::<f64>::new(arch, DecoderConfig::tiny_test(), 1)?;
    let mut rng = CounterRng::new(9);
    let img = Tensor::from_fn(&[1, 3, 224, 224], |_| rng.unit_f64() * 2.0 - 1.0);

    let global = Backbone::from_model(&model);
    let reference = e3(&global, &img)?;

    let whole = WindowSpec { window: 14, global_layers: [4].into_iter().collect() };
    let same = convert_to_windowed(&model, &whole)?;
    println!("window = grid:  plan {:?}", same.plan);
    println!("                max |diff| vs global {:.2e}", e3(&same, &img)?.max_abs_diff(&reference));

    let local = WindowSpec { window: 7, global_layers: [1, 4].into_iter().collect() };
    let windowed = convert_to_windowed(&model, &local)?;
    println!("7x7 windows:    plan {:?}", windowed.plan);
    println!("                max |diff| vs global {:.2e}", e3(&windowed, &img)?.max_abs_diff(&reference));
    println!(
        "                new parameters: {:?}",
        windowed
            .params
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .filter(|(n, _)| n.starts_with("backbone"))
            .collect::<Vec<_>>()
    );
    Ok(())
}
