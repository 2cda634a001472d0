//! Saves a checkpoint, writes a few PNGs, exports their feature pyramids and
//! checks the stage-3 maps on disk against an in-process forward.
//!
//! ```text
//! cargo run --release --example feature_export -- [work_dir]
//! ```

use std::path::PathBuf;

use convmae::backbone::Backbone;
use convmae::export::{export_features, pyramid_tensors, read_manifest};
use convmae::io::read_raw_f32;
use convmae::model::ConvMae;
use convmae::train::data::{image_files, load_normalized};
use convmae::train::{Checkpoint, RunConfig};

fn main() -> anyhow::Result<()> {
    let work: PathBuf = std::env::args().nth(1).unwrap_or_else(|| "runs/export".into()).into();
    let images = work.join("images");
    std::fs::create_dir_all(&images)?;
    for i in 0..3u32 {
        let img = image::RgbImage::from_fn(64, 48, |x, y| {
            image::Rgb([(x * 4) as u8, (y * 5) as u8, ((x / 8 + y / 8 + i) % 2 * 255) as u8])
        });
        img.save(images.join(format!("sample{i}.png")))?;
    }

    let config = RunConfig::default();
    let (arch, dec) = config.model_configs();
    let model = ConvMae::<f32>::new(arch, dec, config.seed)?;
    let ckpt_path = work.join("model.ckpt");
    Checkpoint { step: 0, rng_state: (0, 0), config, params: model.params.clone(), optimizer: None }
        .save(&ckpt_path)?;

    let out = work.join("features");
    let summary = export_features(&ckpt_path, &images, &out)?;
    println!("{} images -> {} files", summary.images, summary.entries.len());
    for e in read_manifest(&out)? {
        println!("  {}", e.line());
    }

    let backbone = Backbone::from_model(&model);
    let first = &image_files(&images)?[0];
    let levels = pyramid_tensors(&backbone, &load_normalized(first, model.arch.image_size)?)?;
    let e3 = &summary.entries[2];
    let on_disk = read_raw_f32(&out.join(&e3.file), &e3.shape)?;
    println!("stage-3 map of {} matches bit for bit: {}", e3.image, on_disk.bit_eq(&levels[2]));
    Ok(())
}
