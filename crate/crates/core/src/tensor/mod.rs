//! Dense row-major tensors and a reverse-mode autodiff tape.
//!
//! Shapes are always explicit. The only implicit broadcast is scalar-with-tensor
//! ([`Graph::scale`], [`Graph::add_scalar`]); everything else that repeats data
//! goes through [`Graph::broadcast_leading`].

mod graph;
pub(crate) mod kernels;

pub use graph::{Graph, SpatialMask, Var};

use std::fmt::{self, Debug, Display};
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn parse(s: &str) -> Option<DType> {
        match s {
            "f32" | "float32" => Some(DType::F32),
            "f64" | "float64" => Some(DType::F64),
            _ => None,
        }
    }
}

impl Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Floating-point element type of a tensor.
pub trait Elem:
    Copy
    + Debug
    + Default
    + PartialEq
    + PartialOrd
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    const ZERO: Self;
    const ONE: Self;
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn erf(self) -> Self;
    fn is_finite(self) -> bool;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    fn max(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }
}

impl Elem for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const DTYPE: DType = DType::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn erf(self) -> Self {
        libm::erff(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Elem for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const DTYPE: DType = DType::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn erf(self) -> Self {
        libm::erf(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

/// Contiguous row-major array. A scalar has the empty shape `[]`.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Elem> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!("shape {:?} needs {} elements, buffer has {}", shape, n, data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::ZERO)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return shape_err(format!("cannot reshape {:?} to {:?}", self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    pub fn cast<U: Elem>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect() }
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data.iter().zip(&other.data).map(|(a, b)| (a.to_f64() - b.to_f64()).abs()).fold(0.0, f64::max)
    }

    /// Bitwise equality of shape and every element.
    pub fn bit_eq(&self, other: &Tensor<T>) -> bool {
        if self.shape != other.shape {
            return false;
        }
        let mut a = Vec::new();
        let mut b = Vec::new();
        self.data.iter().zip(&other.data).all(|(x, y)| {
            a.clear();
            b.clear();
            x.write_le(&mut a);
            y.write_le(&mut b);
            a == b
        })
    }

    /// `[B, C, H, W]` → `[B, (H/p)(W/p), p*p*C]`, same layout as [`Graph::patchify`].
    pub fn patchify(&self, patch: usize) -> Result<Tensor<T>> {
        let s = &self.shape;
        if s.len() != 4 || patch == 0 || s[2] % patch != 0 || s[3] % patch != 0 {
            return shape_err(format!("cannot cut {:?} into {}x{} patches", s, patch, patch));
        }
        let data = graph::patchify_data(&self.data, s, patch);
        Tensor::new(vec![s[0], (s[2] / patch) * (s[3] / patch), patch * patch * s[1]], data)
    }

    /// Inverse of [`patchify`](Self::patchify) for a square image.
    pub fn unpatchify(&self, patch: usize, channels: usize) -> Result<Tensor<T>> {
        let s = &self.shape;
        let side = (s.get(1).copied().unwrap_or(0) as f64).sqrt() as usize;
        if s.len() != 3 || patch == 0 || side * side != s[1] || s[2] != patch * patch * channels {
            return shape_err(format!("cannot unpatchify {:?} with patch {} and {} channels", s, patch, channels));
        }
        let img = [s[0], channels, side * patch, side * patch];
        Tensor::new(img.to_vec(), graph::unpatchify_data(&self.data, &img, patch))
    }
}

impl<T: Elem> Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor<{}>{:?} [", T::DTYPE, self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{:?}", v)?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ... ({} total)", self.data.len())?;
        }
        f.write_str("]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_element_count() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn scalar_has_empty_shape() {
        let s = Tensor::scalar(2.5f32);
        assert_eq!(s.shape(), &[] as &[usize]);
        assert_eq!(s.item(), 2.5);
    }

    #[test]
    fn bit_eq_distinguishes_signed_zero() {
        let a = Tensor::<f64>::new(vec![1], vec![0.0]).unwrap();
        let b = Tensor::<f64>::new(vec![1], vec![-0.0]).unwrap();
        assert!(a == b);
        assert!(!a.bit_eq(&b));
    }
}
