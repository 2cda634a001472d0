//! Test-only oracles shared by the integration suites. Nothing here calls the
//! library's kernels; each routine is a direct loop transcription of the
//! operation's definition.

#![allow(dead_code)]

use convmae::rng::CounterRng;
use convmae::tensor::{Graph, Tensor, Var};

pub fn random_tensor(shape: &[usize], rng: &mut CounterRng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.unit_f64() * 2.0 - 1.0)
}

/// Direct nested-loop convolution over NCHW with zero padding and groups.
pub fn conv_oracle(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &[f64],
    stride: usize,
    pad: usize,
    groups: usize,
) -> Tensor<f64> {
    let (bn, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, cin_g, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let cout_g = cout / groups;
    let mut out = vec![0.0; bn * cout * ho * wo];
    for n in 0..bn {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[co];
                    for cl in 0..cin_g {
                        let ci = (co / cout_g) * cin_g + cl;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as i64 - pad as i64;
                                let ix = (ox * stride + kx) as i64 - pad as i64;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= wd as i64 {
                                    continue;
                                }
                                let xv = x.data()[((n * cin + ci) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((co * cin_g + cl) * k + ky) * k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((n * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![bn, cout, ho, wo], out).unwrap()
}

/// Naive triple loop `x w^T + b` over the last axis.
pub fn matmul_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64]) -> Vec<f64> {
    let din = *x.shape().last().unwrap();
    let dout = w.shape()[0];
    let rows = x.numel() / din;
    let mut out = vec![0.0; rows * dout];
    for r in 0..rows {
        for o in 0..dout {
            let mut acc = 0.0;
            for i in 0..din {
                acc += x.data()[r * din + i] * w.data()[o * din + i];
            }
            out[r * dout + o] = acc + b[o];
        }
    }
    out
}

/// Explicit scores → softmax → weighted sum over `[B, H, N, D]`.
pub fn attention_oracle(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, bias: Option<&Tensor<f64>>) -> Tensor<f64> {
    let s = q.shape();
    let (bn, hn, n, d) = (s[0], s[1], s[2], s[3]);
    let at = |t: &Tensor<f64>, b: usize, h: usize, i: usize, j: usize| t.data()[((b * hn + h) * n + i) * d + j];
    let mut out = vec![0.0; q.numel()];
    for b in 0..bn {
        for h in 0..hn {
            for i in 0..n {
                let mut scores: Vec<f64> = (0..n)
                    .map(|j| {
                        let dot: f64 = (0..d).map(|t| at(q, b, h, i, t) * at(k, b, h, j, t)).sum();
                        dot / (d as f64).sqrt() + bias.map_or(0.0, |bt| bt.data()[(h * n + i) * n + j])
                    })
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = scores
                    .iter_mut()
                    .map(|x| {
                        *x = (*x - mx).exp();
                        *x
                    })
                    .sum();
                for j in 0..n {
                    for t in 0..d {
                        out[((b * hn + h) * n + i) * d + t] += scores[j] / total * at(v, b, h, j, t);
                    }
                }
            }
        }
    }
    Tensor::new(s.to_vec(), out).unwrap()
}

/// Relative error `|analytic - numeric| / (|numeric| + 1e-8)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (numeric.abs() + 1e-8)
}

/// Central-difference gradient check of `build` against the tape.
///
/// The scalar checked is `sum(out * r)` with a fixed random `r`, so every
/// output element carries a distinct weight. Returns the largest relative
/// error over every element of every input that requires a gradient.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], differentiable: &[bool], h: f64, build: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let weights = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars);
        let mut rng = CounterRng::new(0xC0FFEE);
        random_tensor(g.shape(out), &mut rng)
    };
    let eval = |ins: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().zip(differentiable).map(|(t, &d)| g.leaf(t.clone(), d)).collect();
    let out = build(&mut g, &vars);
    let r = g.constant(weights.clone());
    let prod = g.mul(out, r).unwrap();
    let loss = g.sum_all(prod);
    g.backward(loss).unwrap();

    let mut worst = 0.0f64;
    for (i, var) in vars.iter().enumerate() {
        if !differentiable[i] {
            continue;
        }
        let analytic = g.grad(*var).unwrap().clone();
        for e in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[e] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[e] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            worst = worst.max(rel_err(analytic.data()[e], numeric));
        }
    }
    worst
}

/// Outcome of [`end_to_end_probe`].
#[derive(Debug)]
pub struct Probe {
    /// Largest relative error among probes above the noise floor.
    pub worst_rel: f64,
    /// Probes below the floor whose absolute error exceeded 1e-9.
    pub floor_violations: Vec<String>,
    /// Parameter tensors whose directional derivative cleared the floor.
    pub checked: usize,
    pub total: usize,
}

impl Probe {
    pub fn passed(&self) -> bool {
        self.worst_rel < 1e-4 && self.floor_violations.is_empty()
    }
}

/// Finite differences through the whole tiny model in float64. Each parameter
/// tensor is probed along `sign(grad)`; a few tensors are also probed element
/// by element. With h = 1e-5 a loss near 1 carries ~1e-10 of rounding noise in
/// the numeric derivative, so derivatives below 1e-6 are compared absolutely.
pub fn end_to_end_probe(model_seed: u64, weight_seed: u64, mask_seed: u64) -> Probe {
    use convmae::config::{ArchConfig, DecoderConfig};
    use convmae::masking::BatchMask;
    use convmae::model::{ConvMae, ConvMode, ParamStore};

    const H: f64 = 1e-5;
    const FLOOR: f64 = 1e-6;
    let mut model = ConvMae::<f64>::new(ArchConfig::tiny_test(), DecoderConfig::tiny_test(), model_seed).unwrap();
    let mut rng = CounterRng::new(weight_seed);
    // Default init leaves the deepest gradients near the noise floor, so the
    // probe runs on unit-scale random weights.
    for (_, t) in model.params.iter_mut() {
        let scale = if t.rank() == 1 { 0.5 } else { (3.0 * t.shape()[0] as f64 / t.numel() as f64).sqrt() };
        *t = random_tensor(t.shape(), &mut rng);
        t.data_mut().iter_mut().for_each(|x| *x *= scale);
    }
    let img = random_tensor(&[1, 3, 32, 32], &mut rng);
    let masks = BatchMask::generate(1, 2, 2, 0.5, mask_seed).unwrap();
    let loss_of = |params: &ParamStore<f64>| {
        let m = ConvMae { params: params.clone(), ..model.clone() };
        let mut g = Graph::new();
        let f = m.forward(&mut g, &img, &masks, ConvMode::Masked).unwrap();
        g.value(f.loss.unwrap()).item()
    };
    let mut g = Graph::new();
    let f = model.forward(&mut g, &img, &masks, ConvMode::Masked).unwrap();
    g.backward(f.loss.unwrap()).unwrap();

    let mut probe = Probe { worst_rel: 0.0, floor_violations: Vec::new(), checked: 0, total: 0 };
    let check = |what: String, analytic: f64, numeric: f64, p: &mut Probe| {
        if numeric.abs() >= FLOOR {
            p.worst_rel = p.worst_rel.max(rel_err(analytic, numeric));
            true
        } else {
            if (analytic - numeric).abs() >= 1e-9 {
                p.floor_violations.push(format!("{}: analytic {} numeric {}", what, analytic, numeric));
            }
            false
        }
    };
    for (name, var) in f.bound.iter() {
        probe.total += 1;
        let grad = g.grad(*var).unwrap();
        let dir: Vec<f64> = grad.data().iter().map(|&x| if x < 0.0 { -1.0 } else { 1.0 }).collect();
        let analytic: f64 = grad.data().iter().map(|x| x.abs()).sum();
        let shifted = |sign: f64| {
            let mut p = model.params.clone();
            for (x, d) in p.get_mut(name).unwrap().data_mut().iter_mut().zip(&dir) {
                *x += sign * H * d;
            }
            loss_of(&p)
        };
        let numeric = (shifted(1.0) - shifted(-1.0)) / (2.0 * H);
        if check(name.clone(), analytic, numeric, &mut probe) {
            probe.checked += 1;
        }
    }
    for name in [
        "encoder.patch_embed1.weight",
        "encoder.stage1.0.dwconv.weight",
        "encoder.stage3.1.q.weight",
        "decoder.fuse1.weight",
        "decoder.mask_token",
    ] {
        let grad = g.grad(f.bound.var(name).unwrap()).unwrap().clone();
        for e in [0, 3, 17] {
            let shifted = |sign: f64| {
                let mut p = model.params.clone();
                p.get_mut(name).unwrap().data_mut()[e] += sign * H;
                loss_of(&p)
            };
            let numeric = (shifted(1.0) - shifted(-1.0)) / (2.0 * H);
            check(format!("{}[{}]", name, e), grad.data()[e], numeric, &mut probe);
        }
    }
    probe
}
