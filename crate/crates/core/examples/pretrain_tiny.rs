//! Pretrains the tiny model on synthetic textures and reports how far the
//! reconstruction loss on a fixed evaluation batch fell.
//!
//! ```text
//! cargo run --release --example pretrain_tiny -- [out_dir] [key=value ...]
//! ```

use convmae::train::{pretrain, RunConfig};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut config =
        RunConfig { out_dir: args.next().unwrap_or_else(|| "runs/tiny".into()).into(), ..RunConfig::default() };
    for kv in args {
        let (k, v) = kv.split_once('=').ok_or_else(|| anyhow::anyhow!("expected key=value, got {kv}"))?;
        config.set(k, v)?;
    }
    config.validate()?;
    let started = std::time::Instant::now();
    let s = pretrain(config)?;
    println!("steps             {}", s.steps);
    println!("eval loss before  {:.4}", s.initial_eval_loss);
    println!("eval loss after   {:.4}", s.final_eval_loss);
    println!("ratio             {:.3}", s.final_eval_loss / s.initial_eval_loss);
    println!("elapsed           {:.1}s", started.elapsed().as_secs_f64());
    println!("metrics           {}", s.metrics.display());
    println!("checkpoint        {}", s.checkpoint.display());
    Ok(())
}
