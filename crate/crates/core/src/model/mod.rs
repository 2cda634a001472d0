//! The masked autoencoder: parameters, encoder, decoder and loss.

pub mod blocks;
pub mod decoder;
pub mod encoder;
pub mod params;
pub mod posembed;

pub use decoder::{decode, fuse_multiscale, patch_targets, reconstruction_loss, DecoderVars};
pub use encoder::{encode, masked_conv_block, stage_transition, ConvMode, EncoderVars, StageFeatures};
pub use params::{model_layout, Affine, Bound, ParamDecl, ParamStore};

use crate::config::{ArchConfig, DecoderConfig};
use crate::error::Result;
use crate::masking::BatchMask;
use crate::rng::CounterRng;
use crate::tensor::{Elem, Graph, Tensor, Var};

/// Weights plus the configuration they were built for.
#[derive(Clone, Debug)]
pub struct ConvMae<T: Elem> {
    pub arch: ArchConfig,
    pub decoder: DecoderConfig,
    pub params: ParamStore<T>,
}

/// Graph handles produced by one pretraining forward pass.
#[derive(Clone, Debug)]
pub struct Forward<T: Elem> {
    pub bound: Bound,
    pub image: Var,
    pub features: StageFeatures,
    pub fused: Var,
    /// `[B, N, patch_pixels]` for every stage-3 token.
    pub pred: Var,
    pub targets: Tensor<T>,
    /// Absent when nothing is masked.
    pub loss: Option<Var>,
}

impl<T: Elem> ConvMae<T> {
    /// Freshly initialized weights drawn from a generator seeded with `seed`.
    pub fn new(arch: ArchConfig, decoder: DecoderConfig, seed: u64) -> Result<Self> {
        decoder::check_decoder(&arch, &decoder)?;
        let mut rng = CounterRng::new(seed);
        let params = ParamStore::initialize(&model_layout(&arch, &decoder), &mut rng);
        Ok(Self { arch, decoder, params })
    }

    pub fn from_params(arch: ArchConfig, decoder: DecoderConfig, params: ParamStore<T>) -> Result<Self> {
        decoder::check_decoder(&arch, &decoder)?;
        params.check_layout(&model_layout(&arch, &decoder))?;
        Ok(Self { arch, decoder, params })
    }

    pub fn layout(&self) -> Vec<ParamDecl> {
        model_layout(&self.arch, &self.decoder)
    }

    /// Encoder only. `img` is `[B, C, H, W]`.
    pub fn encode(
        &self,
        g: &mut Graph<T>,
        img: &Tensor<T>,
        masks: &BatchMask,
        mode: ConvMode,
    ) -> Result<(Bound, StageFeatures)> {
        let bound = self.params.bind(g);
        let vars = EncoderVars::bind(&bound, &self.arch)?;
        let image = g.constant(img.clone());
        let feats = encode(g, &vars, &self.arch, image, masks, mode)?;
        Ok((bound, feats))
    }

    /// Encoder, fusion, decoder and, when any token is masked, the loss.
    pub fn forward(&self, g: &mut Graph<T>, img: &Tensor<T>, masks: &BatchMask, mode: ConvMode) -> Result<Forward<T>> {
        let bound = self.params.bind(g);
        let enc = EncoderVars::bind(&bound, &self.arch)?;
        let dec = DecoderVars::bind(&bound, &self.decoder)?;
        let image = g.constant(img.clone());
        let features = encode(g, &enc, &self.arch, image, masks, mode)?;
        let fused = fuse_multiscale(g, &dec, &features, masks)?;
        let pred = decode(g, &dec, &self.decoder, fused, masks)?;
        let targets = patch_targets(img, self.decoder.patch_size, self.decoder.norm_target)?;
        let loss = if masks.masked_indices().first().is_some_and(|m| !m.is_empty()) {
            Some(reconstruction_loss(g, pred, &targets, masks)?)
        } else {
            None
        };
        Ok(Forward { bound, image, features, fused, pred, targets, loss })
    }
}
