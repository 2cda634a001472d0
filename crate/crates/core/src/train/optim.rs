//! AdamW with decoupled weight decay on matrices and kernels.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::{Elem, Tensor};

#[derive(Clone, Debug)]
pub struct AdamW<T: Elem> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Updates applied so far.
    pub steps: u64,
    pub m: IndexMap<String, Tensor<T>>,
    pub v: IndexMap<String, Tensor<T>>,
}

impl<T: Elem> AdamW<T> {
    pub fn new(params: &ParamStore<T>, weight_decay: f64) -> Self {
        let zeros = || params.iter().map(|(n, t)| (n.clone(), Tensor::zeros(t.shape()))).collect();
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay, steps: 0, m: zeros(), v: zeros() }
    }

    /// Biases, norm parameters and the mask token (rank 1) are not decayed.
    pub fn decays(t: &Tensor<T>) -> bool {
        t.rank() >= 2
    }

    /// One update. `grads` must name every parameter.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &IndexMap<String, Tensor<T>>, lr: f64) -> Result<()> {
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (c1, c2) = (T::from_f64(1.0 - self.beta1), T::from_f64(1.0 - self.beta2));
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).ok_or_else(|| Error::Invariant(format!("no gradient for {}", name)))?;
            let m = self.m.get_mut(name).ok_or_else(|| Error::Invariant(format!("no moment for {}", name)))?;
            let v = self.v.get_mut(name).ok_or_else(|| Error::Invariant(format!("no moment for {}", name)))?;
            let decay = if Self::decays(p) { self.weight_decay } else { 0.0 };
            let shrink = T::from_f64(1.0 - lr * decay);
            let step = T::from_f64(lr / bc1);
            let inv_bc2 = T::from_f64(1.0 / bc2);
            let eps = T::from_f64(self.eps);
            for (((w, &gi), mi), vi) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut()).zip(v.data_mut().iter_mut())
            {
                *mi = b1 * *mi + c1 * gi;
                *vi = b2 * *vi + c2 * gi * gi;
                *w = *w * shrink - step * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = ParamStore::<f64>::default();
        p.insert("w", Tensor::from_f64(&[2], &[1.0, -1.0]).unwrap());
        let mut opt = AdamW::new(&p, 0.0);
        let mut g = IndexMap::new();
        g.insert("w".to_string(), Tensor::from_f64(&[2], &[0.3, -5.0]).unwrap());
        opt.step(&mut p, &g, 0.1).unwrap();
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn decay_skips_vectors() {
        let mut p = ParamStore::<f64>::default();
        p.insert("b", Tensor::full(&[3], 2.0));
        p.insert("w", Tensor::full(&[1, 1], 2.0));
        let mut opt = AdamW::new(&p, 0.5);
        let mut g = IndexMap::new();
        g.insert("b".to_string(), Tensor::zeros(&[3]));
        g.insert("w".to_string(), Tensor::zeros(&[1, 1]));
        opt.step(&mut p, &g, 0.1).unwrap();
        assert_eq!(p.get("b").unwrap().data(), &[2.0; 3]);
        assert!((p.get("w").unwrap().data()[0] - 1.9).abs() < 1e-12);
    }
}
