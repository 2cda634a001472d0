//! Trains a few steps, saves, reloads and shows that the restored model
//! gives bit-identical outputs and resumes the same loss sequence.
//!
//! ```text
//! cargo run --release --example checkpoint_resume -- [work_dir]
//! ```

use std::path::PathBuf;

use convmae::model::ConvMode;
use convmae::tensor::Graph;
use convmae::train::{Checkpoint, RunConfig, Trainer};

fn main() -> anyhow::Result<()> {
    let work: PathBuf = std::env::args().nth(1).unwrap_or_else(|| "runs/resume".into()).into();
    std::fs::create_dir_all(&work)?;
    let config = RunConfig { batch_size: 4, epochs: 2, steps_per_epoch: 4, warmup_epochs: 1, ..RunConfig::default() };

    let mut straight = Trainer::<f32>::new(config.clone())?;
    let mut resumed = Trainer::<f32>::new(config)?;
    for _ in 0..3 {
        straight.train_step()?;
        resumed.train_step()?;
    }
    let path = work.join("step3.ckpt");
    resumed.checkpoint().save(&path)?;
    let mut resumed = Trainer::resume(Checkpoint::<f32>::load(&path)?)?;

    let (imgs, masks) = straight.eval_batch()?;
    let pred = |t: &Trainer<f32>| -> anyhow::Result<_> {
        let mut g = Graph::new();
        let f = t.model.forward(&mut g, &imgs, &masks, ConvMode::Masked)?;
        Ok(g.value(f.pred).clone())
    };
    println!("reloaded predictions bit-identical: {}", pred(&straight)?.bit_eq(&pred(&resumed)?));

    while straight.step < straight.total_steps() {
        let (a, b) = (straight.train_step()?, resumed.train_step()?);
        println!(
            "step {}  loss {:.6}  resumed {:.6}  same bits: {}",
            a.step,
            a.loss,
            b.loss,
            a.loss.to_bits() == b.loss.to_bits()
        );
    }
    Ok(())
}
