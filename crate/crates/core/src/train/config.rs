//! Run configuration read from flat `key=value` files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::{ArchConfig, ArchPreset, DecoderConfig};
use crate::error::{Error, Result};
use crate::tensor::DType;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub arch: ArchPreset,
    pub keep_ratio: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Steps per epoch; 0 derives it from the corpus size and batch size.
    pub steps_per_epoch: usize,
    /// Peak learning rate, used as given.
    pub base_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub dtype: DType,
    /// Image directory; `None` uses the built-in synthetic textures.
    pub data_path: Option<PathBuf>,
    /// Number of synthetic images when no data path is given.
    pub synthetic_images: usize,
    pub norm_target: bool,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    /// Desk-scale run: 200 steps of the tiny model on synthetic textures.
    fn default() -> Self {
        Self {
            arch: ArchPreset::TinyTest,
            keep_ratio: 0.25,
            epochs: 25,
            warmup_epochs: 1,
            steps_per_epoch: 8,
            base_lr: 3e-3,
            weight_decay: 0.05,
            batch_size: 32,
            seed: 0,
            dtype: DType::F32,
            data_path: None,
            synthetic_images: 64,
            norm_target: true,
            out_dir: PathBuf::from("runs/tiny"),
        }
    }
}

const KEYS: [&str; 14] = [
    "arch",
    "keep_ratio",
    "epochs",
    "warmup_epochs",
    "steps_per_epoch",
    "base_lr",
    "weight_decay",
    "batch_size",
    "seed",
    "dtype",
    "data_path",
    "synthetic_images",
    "norm_target",
    "out_dir",
];

fn parse_num<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse().map_err(|_| Error::Config(format!("{}: cannot parse {:?}", key, v)))
}

impl RunConfig {
    /// Optimization settings of the full-scale recipe for `arch`.
    pub fn full_scale(arch: ArchPreset) -> Self {
        Self { arch, epochs: 1600, warmup_epochs: 40, base_lr: 1.5e-4, batch_size: 1024, ..Self::default() }
    }

    /// Encoder and decoder settings for this run.
    pub fn model_configs(&self) -> (ArchConfig, DecoderConfig) {
        let dec = DecoderConfig { norm_target: self.norm_target, ..self.arch.decoder() };
        (self.arch.arch(), dec)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {:?}", n + 1, raw)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "arch" => self.arch = v.parse()?,
            "keep_ratio" => self.keep_ratio = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "warmup_epochs" => self.warmup_epochs = parse_num(key, v)?,
            "steps_per_epoch" => self.steps_per_epoch = parse_num(key, v)?,
            "base_lr" => self.base_lr = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "dtype" => {
                self.dtype =
                    DType::parse(v).ok_or_else(|| Error::Config(format!("dtype: expected f32 or f64, got {:?}", v)))?
            }
            "data_path" => self.data_path = (!v.is_empty()).then(|| PathBuf::from(v)),
            "synthetic_images" => self.synthetic_images = parse_num(key, v)?,
            "norm_target" => self.norm_target = parse_num(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown key {:?} (known: {})", key, KEYS.join(", ")))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.keep_ratio > 0.0 && self.keep_ratio < 1.0) {
            return bad(format!("keep_ratio {} must lie in (0, 1) for pretraining", self.keep_ratio));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if self.warmup_epochs >= self.epochs {
            return bad(format!("warmup_epochs {} must be below epochs {}", self.warmup_epochs, self.epochs));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return bad("base_lr and weight_decay must be finite and non-negative".into());
        }
        if self.data_path.is_none() && self.synthetic_images == 0 {
            return bad("synthetic_images must be positive without a data_path".into());
        }
        Ok(())
    }

    /// Canonical `key=value` text; parsing it gives back an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let data = self.data_path.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let _ = writeln!(s, "arch={}", self.arch);
        let _ = writeln!(s, "keep_ratio={}", self.keep_ratio);
        let _ = writeln!(s, "epochs={}", self.epochs);
        let _ = writeln!(s, "warmup_epochs={}", self.warmup_epochs);
        let _ = writeln!(s, "steps_per_epoch={}", self.steps_per_epoch);
        let _ = writeln!(s, "base_lr={}", self.base_lr);
        let _ = writeln!(s, "weight_decay={}", self.weight_decay);
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "dtype={}", self.dtype.name());
        let _ = writeln!(s, "data_path={}", data);
        let _ = writeln!(s, "synthetic_images={}", self.synthetic_images);
        let _ = writeln!(s, "norm_target={}", self.norm_target);
        let _ = writeln!(s, "out_dir={}", self.out_dir.display());
        s
    }
}
