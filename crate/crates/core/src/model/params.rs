//! Parameter layout, storage and binding onto a graph.

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{ArchConfig, DecoderConfig};
use crate::error::{Error, Result};
use crate::tensor::{Elem, Graph, Tensor, Var};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Normal with std [`INIT_STD`], resampled outside two standard deviations.
    TruncNormal,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamDecl {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Default)]
struct Layout(Vec<ParamDecl>);

impl Layout {
    fn push(&mut self, name: String, shape: &[usize], init: Init) {
        self.0.push(ParamDecl { name, shape: shape.to_vec(), init });
    }

    fn affine(&mut self, prefix: &str, weight: &[usize], bias: usize) {
        self.push(format!("{prefix}.weight"), weight, Init::TruncNormal);
        self.push(format!("{prefix}.bias"), &[bias], Init::Zeros);
    }

    fn norm(&mut self, prefix: &str, d: usize) {
        self.push(format!("{prefix}.weight"), &[d], Init::Ones);
        self.push(format!("{prefix}.bias"), &[d], Init::Zeros);
    }

    fn conv_block(&mut self, prefix: &str, c: usize, ratio: usize, k: usize) {
        self.norm(&format!("{prefix}.norm1"), c);
        self.affine(&format!("{prefix}.proj_in"), &[c, c, 1, 1], c);
        self.affine(&format!("{prefix}.dwconv"), &[c, 1, k, k], c);
        self.affine(&format!("{prefix}.proj_out"), &[c, c, 1, 1], c);
        self.norm(&format!("{prefix}.norm2"), c);
        self.affine(&format!("{prefix}.fc1"), &[ratio * c, c, 1, 1], ratio * c);
        self.affine(&format!("{prefix}.fc2"), &[c, ratio * c, 1, 1], c);
    }

    fn transformer_block(&mut self, prefix: &str, c: usize, ratio: usize) {
        self.norm(&format!("{prefix}.norm1"), c);
        for p in ["q", "k", "v", "proj"] {
            self.affine(&format!("{prefix}.{p}"), &[c, c], c);
        }
        self.norm(&format!("{prefix}.norm2"), c);
        self.affine(&format!("{prefix}.fc1"), &[ratio * c, c], ratio * c);
        self.affine(&format!("{prefix}.fc2"), &[c, ratio * c], c);
    }
}

/// Encoder parameters in creation order.
pub fn encoder_layout(arch: &ArchConfig) -> Vec<ParamDecl> {
    let [c1, c2, c3] = arch.channels;
    let mut l = Layout::default();
    l.affine("encoder.patch_embed1", &[c1, arch.in_channels, 4, 4], c1);
    for i in 0..arch.depths[0] {
        l.conv_block(&format!("encoder.stage1.{i}"), c1, arch.mlp_ratios[0], arch.kernel_size);
    }
    l.affine("encoder.patch_embed2", &[c2, c1, 2, 2], c2);
    for i in 0..arch.depths[1] {
        l.conv_block(&format!("encoder.stage2.{i}"), c2, arch.mlp_ratios[1], arch.kernel_size);
    }
    l.affine("encoder.patch_embed3", &[c3, c2, 2, 2], c3);
    for i in 0..arch.depths[2] {
        l.transformer_block(&format!("encoder.stage3.{i}"), c3, arch.mlp_ratios[2]);
    }
    l.norm("encoder.norm", c3);
    l.0
}

/// Multi-scale decoder parameters in creation order.
pub fn decoder_layout(arch: &ArchConfig, dec: &DecoderConfig) -> Vec<ParamDecl> {
    let [c1, c2, c3] = arch.channels;
    let mut l = Layout::default();
    l.affine("decoder.fuse1", &[c3, c1, 4, 4], c3);
    l.affine("decoder.fuse2", &[c3, c2, 2, 2], c3);
    l.affine("decoder.embed", &[dec.dim, c3], dec.dim);
    l.push("decoder.mask_token".into(), &[dec.dim], Init::TruncNormal);
    for i in 0..dec.depth {
        l.transformer_block(&format!("decoder.blocks.{i}"), dec.dim, dec.mlp_ratio);
    }
    l.norm("decoder.norm", dec.dim);
    let p = dec.patch_pixels(arch.in_channels);
    l.affine("decoder.pred", &[p, dec.dim], p);
    l.0
}

pub fn model_layout(arch: &ArchConfig, dec: &DecoderConfig) -> Vec<ParamDecl> {
    let mut all = encoder_layout(arch);
    all.extend(decoder_layout(arch, dec));
    all
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Elem> {
    entries: IndexMap<String, Tensor<T>>,
}

impl<T: Elem> Default for ParamStore<T> {
    fn default() -> Self {
        Self { entries: IndexMap::new() }
    }
}

impl<T: Elem> ParamStore<T> {
    pub fn initialize<R: Rng + ?Sized>(layout: &[ParamDecl], rng: &mut R) -> Self {
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut entries = IndexMap::with_capacity(layout.len());
        for d in layout {
            let t = match d.init {
                Init::Zeros => Tensor::zeros(&d.shape),
                Init::Ones => Tensor::full(&d.shape, T::ONE),
                Init::TruncNormal => Tensor::from_fn(&d.shape, |_| loop {
                    let v: f64 = normal.sample(rng);
                    if v.abs() <= 2.0 * INIT_STD {
                        break T::from_f64(v);
                    }
                }),
            };
            entries.insert(d.name.clone(), t);
        }
        Self { entries }
    }

    /// Allocates every tensor as zeros; used to enumerate an instantiated model.
    pub fn zeros(layout: &[ParamDecl]) -> Self {
        Self { entries: layout.iter().map(|d| (d.name.clone(), Tensor::zeros(&d.shape))).collect() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|t| t.numel()).sum()
    }

    /// Confirms names and shapes match `layout` exactly, in order.
    pub fn check_layout(&self, layout: &[ParamDecl]) -> Result<()> {
        if self.entries.len() != layout.len() {
            return Err(Error::Format(format!(
                "{} parameters stored, layout declares {}",
                self.entries.len(),
                layout.len()
            )));
        }
        for ((name, t), d) in self.entries.iter().zip(layout) {
            if *name != d.name || t.shape() != d.shape.as_slice() {
                return Err(Error::Format(format!(
                    "parameter {} {:?} does not match layout entry {} {:?}",
                    name,
                    t.shape(),
                    d.name,
                    d.shape
                )));
            }
        }
        Ok(())
    }

    /// Inserts every tensor as a gradient-receiving leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound { vars: self.entries.iter().map(|(n, t)| (n.clone(), g.param(t.clone()))).collect() }
    }
}

/// Graph handles of bound parameters.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

/// Weight and bias of a linear, convolution or norm layer.
#[derive(Clone, Copy, Debug)]
pub struct Affine {
    pub weight: Var,
    pub bias: Var,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::Invariant(format!("missing parameter {}", name)))
    }

    pub fn affine(&self, prefix: &str) -> Result<Affine> {
        Ok(Affine { weight: self.var(&format!("{prefix}.weight"))?, bias: self.var(&format!("{prefix}.bias"))? })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}
