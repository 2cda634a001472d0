//! The pretraining loop.

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::data::Corpus;
use super::metrics::{MetricsLog, StepRecord};
use super::optim::AdamW;
use super::schedule::LrSchedule;
use crate::error::{Error, Result};
use crate::io::{shape_text, write_raw_f32};
use crate::masking::BatchMask;
use crate::model::{ConvMae, ConvMode};
use crate::rng::CounterRng;
use crate::tensor::{DType, Elem, Graph, Tensor};

const DATA_SALT: u64 = 0xD47A_5EED;
const ORDER_SALT: u64 = 0x0DE7_5EED;
const EVAL_SALT: u64 = 0xE7A1_5EED;
/// Images in the fixed evaluation batch.
pub const EVAL_IMAGES: usize = 16;

/// Random draws reserved per step; each step's data stream starts at
/// `step * STEP_STRIDE` so resumption needs only the step counter.
const STEP_STRIDE: u64 = 1 << 32;

pub struct Trainer<T: Elem> {
    pub config: RunConfig,
    pub model: ConvMae<T>,
    pub optimizer: AdamW<T>,
    pub schedule: LrSchedule,
    pub corpus: Corpus,
    pub steps_per_epoch: usize,
    /// Completed steps.
    pub step: usize,
}

impl<T: Elem> Trainer<T> {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        if config.dtype != T::DTYPE {
            return Err(Error::Config(format!("run asks for {} but the trainer is {}", config.dtype, T::DTYPE)));
        }
        let (arch, dec) = config.model_configs();
        let model = ConvMae::new(arch, dec, config.seed)?;
        let optimizer = AdamW::new(&model.params, config.weight_decay);
        Self::assemble(config, model, optimizer, 0)
    }

    /// Continues from a saved state with the same data stream.
    pub fn resume(ckpt: Checkpoint<T>) -> Result<Self> {
        let model = ckpt.model()?;
        let optimizer =
            ckpt.optimizer.clone().ok_or_else(|| Error::Format("checkpoint has no optimizer state".into()))?;
        Self::assemble(ckpt.config, model, optimizer, ckpt.step as usize)
    }

    fn assemble(config: RunConfig, model: ConvMae<T>, optimizer: AdamW<T>, step: usize) -> Result<Self> {
        let size = model.arch.image_size;
        let corpus = match &config.data_path {
            Some(dir) => Corpus::from_dir(dir, size + size / 4)?,
            None => Corpus::synthetic(config.synthetic_images, size, config.seed),
        };
        if corpus.is_empty() {
            return Err(Error::Config("training corpus is empty".into()));
        }
        let steps_per_epoch = match config.steps_per_epoch {
            0 => corpus.len().div_ceil(config.batch_size),
            n => n,
        };
        let schedule = LrSchedule {
            base_lr: config.base_lr,
            warmup_steps: config.warmup_epochs * steps_per_epoch,
            total_steps: config.epochs * steps_per_epoch,
        };
        Ok(Self { config, model, optimizer, schedule, corpus, steps_per_epoch, step })
    }

    pub fn total_steps(&self) -> usize {
        self.schedule.total_steps
    }

    fn data_rng(&self, step: usize) -> CounterRng {
        CounterRng::from_state(self.config.seed ^ DATA_SALT, step as u64 * STEP_STRIDE)
    }

    /// Images and masks for `step`. Each epoch visits the corpus in a fresh
    /// shuffled order.
    pub fn batch_for(&self, step: usize) -> Result<(Tensor<T>, BatchMask)> {
        let epoch = step / self.steps_per_epoch;
        let mut order: Vec<usize> = (0..self.corpus.len()).collect();
        CounterRng::from_state(self.config.seed ^ ORDER_SALT, epoch as u64 * STEP_STRIDE).shuffle(&mut order);
        let b = self.config.batch_size;
        let start = (step % self.steps_per_epoch) * b;
        let idx: Vec<usize> = (start..start + b).map(|i| order[i % order.len()]).collect();
        let mut rng = self.data_rng(step);
        let imgs = self.corpus.batch(&idx, self.model.arch.image_size, &mut rng)?;
        let g = self.model.arch.resolutions()[2];
        let masks = BatchMask::generate(b, g, g, self.config.keep_ratio, rng.next_raw())?;
        Ok((imgs, masks))
    }

    /// Fixed batch for before/after comparisons: the first images of the
    /// corpus with deterministic crops and masks.
    pub fn eval_batch(&self) -> Result<(Tensor<T>, BatchMask)> {
        let n = self.corpus.len().min(EVAL_IMAGES);
        let idx: Vec<usize> = (0..n).collect();
        let mut rng = CounterRng::new(self.config.seed ^ EVAL_SALT);
        let imgs = self.corpus.batch(&idx, self.model.arch.image_size, &mut rng)?;
        let g = self.model.arch.resolutions()[2];
        let masks = BatchMask::generate(n, g, g, self.config.keep_ratio, rng.next_raw())?;
        Ok((imgs, masks))
    }

    pub fn loss_on(&self, imgs: &Tensor<T>, masks: &BatchMask) -> Result<f64> {
        let mut g = Graph::new();
        let f = self.model.forward(&mut g, imgs, masks, ConvMode::Masked)?;
        let loss = f.loss.ok_or_else(|| Error::Config("keep ratio leaves nothing to reconstruct".into()))?;
        Ok(g.value(loss).item().to_f64())
    }

    pub fn eval_loss(&self) -> Result<f64> {
        let (imgs, masks) = self.eval_batch()?;
        self.loss_on(&imgs, &masks)
    }

    /// One forward, backward and AdamW update.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let step = self.step;
        let lr = self.schedule.lr(step);
        let (imgs, masks) = self.batch_for(step)?;
        let mut g = Graph::new();
        let f = self.model.forward(&mut g, &imgs, &masks, ConvMode::Masked)?;
        let loss_var = f.loss.ok_or_else(|| Error::Config("keep ratio leaves nothing to reconstruct".into()))?;
        let loss = g.value(loss_var).item().to_f64();
        if !loss.is_finite() {
            return Err(Error::NonFinite { step, detail: format!("loss is {}", loss) });
        }
        g.backward(loss_var)?;
        let mut grads = IndexMap::with_capacity(self.model.params.len());
        for (name, var) in f.bound.iter() {
            let grad = g.grad(*var).ok_or_else(|| Error::Invariant(format!("no gradient for {}", name)))?;
            if let Some(bad) = grad.data().iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFinite { step, detail: format!("gradient of {} contains {:?}", name, bad) });
            }
            grads.insert(name.clone(), grad.clone());
        }
        self.optimizer.step(&mut self.model.params, &grads, lr)?;
        self.step += 1;
        Ok(StepRecord { step, lr, loss })
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            step: self.step as u64,
            rng_state: self.data_rng(self.step).state(),
            config: self.config.clone(),
            params: self.model.params.clone(),
            optimizer: Some(self.optimizer.clone()),
        }
    }

    /// Writes predictions and targets for the evaluation batch under `dir`:
    /// `pred.f32` and `target.f32` (each `[B, N, patch_pixels]`), `visible.txt`
    /// with one line of visible token indices per image, and `manifest.txt`.
    pub fn dump_reconstruction(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let (imgs, masks) = self.eval_batch()?;
        let mut g = Graph::new();
        let f = self.model.forward(&mut g, &imgs, &masks, ConvMode::Masked)?;
        let pred = g.value(f.pred);
        write_raw_f32(&dir.join("pred.f32"), pred)?;
        write_raw_f32(&dir.join("target.f32"), &f.targets)?;
        let visible: String = masks
            .visible_indices()
            .iter()
            .map(|v| v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ") + "\n")
            .collect();
        fs::write(dir.join("visible.txt"), visible)?;
        let manifest = format!(
            "pred f32 {} pred.f32\ntarget f32 {} target.f32\npatch {}\nchannels {}\nnorm_target {}\n",
            shape_text(pred.shape()),
            shape_text(f.targets.shape()),
            self.model.decoder.patch_size,
            self.model.arch.in_channels,
            self.model.decoder.norm_target
        );
        fs::write(dir.join("manifest.txt"), manifest)?;
        Ok(())
    }
}

/// What a finished run produced.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainSummary {
    pub steps: usize,
    pub initial_eval_loss: f64,
    pub final_eval_loss: f64,
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
    pub reconstruction: PathBuf,
}

fn run<T: Elem>(config: RunConfig) -> Result<PretrainSummary> {
    let out = config.out_dir.clone();
    fs::create_dir_all(&out)?;
    let metrics = out.join("metrics.txt");
    if metrics.exists() {
        fs::remove_file(&metrics)?;
    }
    let mut trainer = Trainer::<T>::new(config)?;
    let initial_eval_loss = trainer.eval_loss()?;
    let mut log = MetricsLog::append(&metrics)?;
    while trainer.step < trainer.total_steps() {
        let rec = trainer.train_step()?;
        log.record(&rec)?;
    }
    let final_eval_loss = trainer.eval_loss()?;
    let checkpoint = out.join("checkpoint.bin");
    trainer.checkpoint().save(&checkpoint)?;
    let reconstruction = out.join("reconstruction");
    trainer.dump_reconstruction(&reconstruction)?;
    Ok(PretrainSummary { steps: trainer.step, initial_eval_loss, final_eval_loss, metrics, checkpoint, reconstruction })
}

/// Trains from scratch, writing `metrics.txt`, `checkpoint.bin` and a
/// `reconstruction/` dump into the configured output directory.
pub fn pretrain(config: RunConfig) -> Result<PretrainSummary> {
    match config.dtype {
        DType::F32 => run::<f32>(config),
        DType::F64 => run::<f64>(config),
    }
}
