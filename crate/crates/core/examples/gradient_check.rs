//! Finite-difference checks: a hand-built expression on the tape, then the
//! whole tiny model's loss.
//!
//! ```text
//! cargo run --release --example gradient_check
//! ```

use convmae::rng::CounterRng;
use convmae::tensor::Tensor;
use convmae::verify::{end_to_end_gradcheck, gradcheck, primitive_cases};

fn main() -> anyhow::Result<()> {
    let mut rng = CounterRng::new(5);
    let inputs = vec![
        Tensor::from_fn(&[3, 4], |_| rng.unit_f64() - 0.5),
        Tensor::from_fn(&[2, 4], |_| rng.unit_f64() - 0.5),
        Tensor::from_fn(&[2], |_| rng.unit_f64() - 0.5),
    ];
    // gelu(x W^T + b), squared
    let err = gradcheck(&inputs, 1e-5, |g, v| {
        let h = g.linear(v[0], v[1], v[2])?;
        let h = g.gelu(h);
        g.mul(h, h)
    })?;
    println!("custom expression       max rel err {err:.2e}");

    for (name, shapes, build) in primitive_cases() {
        let inputs: Vec<Tensor<f64>> =
            shapes.iter().map(|s| Tensor::from_fn(s, |_| rng.unit_f64() * 2.0 - 1.0)).collect();
        println!("{name:<23} max rel err {:.2e}", gradcheck(&inputs, 1e-5, build)?);
    }

    let (worst, checked, total) = end_to_end_gradcheck(3)?;
    println!("end-to-end loss         max rel err {worst:.2e} ({checked} of {total} tensors above the noise floor)");
    Ok(())
}
