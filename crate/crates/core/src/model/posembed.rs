//! Fixed 2-D sine-cosine position embeddings.

use crate::error::{Error, Result};
use crate::tensor::{Elem, Tensor};

/// `[grid_h * grid_w, dim]` table. The first `dim / 2` channels encode the
/// column, the rest the row; each half is `[sin(p * w_i), cos(p * w_i)]` with
/// `w_i = 10000^(-i / (dim / 4))` for `i < dim / 4`.
pub fn sincos_2d<T: Elem>(dim: usize, grid_h: usize, grid_w: usize) -> Result<Tensor<T>> {
    if dim == 0 || dim % 4 != 0 {
        return Err(Error::Config(format!("position embedding width {} must be a positive multiple of 4", dim)));
    }
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter).map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64)).collect();
    let mut data = Vec::with_capacity(grid_h * grid_w * dim);
    for r in 0..grid_h {
        for c in 0..grid_w {
            for pos in [c as f64, r as f64] {
                data.extend(omega.iter().map(|w| T::from_f64((pos * w).sin())));
                data.extend(omega.iter().map(|w| T::from_f64((pos * w).cos())));
            }
        }
    }
    Tensor::new(vec![grid_h * grid_w, dim], data)
}
