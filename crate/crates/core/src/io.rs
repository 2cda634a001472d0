//! Raw little-endian arrays and the line-oriented manifests that describe them.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Elem, Tensor};

/// `2x3x4` style shape text; an empty shape is `scalar`.
pub fn shape_text(shape: &[usize]) -> String {
    if shape.is_empty() {
        return "scalar".into();
    }
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

pub fn parse_shape(s: &str) -> Result<Vec<usize>> {
    if s == "scalar" {
        return Ok(Vec::new());
    }
    s.split('x').map(|d| d.parse().map_err(|_| Error::Format(format!("bad shape {:?}", s)))).collect()
}

pub fn tensor_bytes<T: Elem>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.numel() * T::DTYPE.size());
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

pub fn tensor_from_bytes<T: Elem>(shape: &[usize], bytes: &[u8]) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    let size = T::DTYPE.size();
    if bytes.len() != n * size {
        return Err(Error::Format(format!("{} bytes for {} {} values", bytes.len(), n, T::DTYPE)));
    }
    Tensor::new(shape.to_vec(), bytes.chunks_exact(size).map(T::read_le).collect())
}

/// Writes `t` as raw little-endian float32, whatever its element type.
pub fn write_raw_f32<T: Elem>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut out = Vec::with_capacity(t.numel() * 4);
    for &v in t.data() {
        out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_raw_f32(path: &Path, shape: &[usize]) -> Result<Tensor<f32>> {
    tensor_from_bytes(shape, &fs::read(path)?)
}

/// Parses `dtype` text written by [`DType::name`].
pub fn parse_dtype(s: &str) -> Result<DType> {
    DType::parse(s).ok_or_else(|| Error::Format(format!("unknown dtype {:?}", s)))
}
