//! Checkpoint file: magic, manifest length, UTF-8 manifest, raw payload.
//!
//! ```text
//! CMAECKPT <u64 LE manifest bytes> <manifest> <payload>
//! ```
//!
//! Manifest lines are `step <n>`, `rng <seed> <counter>`, `optimizer_steps <n>`,
//! `config <key>=<value>` and `tensor <name> <dtype> <shape> <offset> <bytes>`.
//! Tensor names are prefixed `param.`, `adam.m.` or `adam.v.`; offsets count
//! from the start of the payload.

use std::fmt::Write as _;
use std::path::Path;

use indexmap::IndexMap;

use super::config::RunConfig;
use super::optim::AdamW;
use crate::error::{Error, Result};
use crate::io::{parse_dtype, parse_shape, shape_text, tensor_bytes, tensor_from_bytes};
use crate::model::{ConvMae, ParamStore};
use crate::tensor::{DType, Elem, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CMAECKPT";

#[derive(Clone, Debug)]
pub struct Checkpoint<T: Elem> {
    /// Completed optimizer steps.
    pub step: u64,
    /// Data stream position for the next step.
    pub rng_state: (u64, u64),
    pub config: RunConfig,
    pub params: ParamStore<T>,
    pub optimizer: Option<AdamW<T>>,
}

/// Element type of the tensors in a checkpoint file, read from its manifest.
pub fn stored_dtype(bytes: &[u8]) -> Result<DType> {
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let manifest = 16usize
        .checked_add(len)
        .and_then(|end| bytes.get(16..end))
        .and_then(|m| std::str::from_utf8(m).ok())
        .ok_or_else(|| Error::Format("truncated manifest".into()))?;
    let dtype = manifest
        .lines()
        .find_map(|l| l.strip_prefix("tensor ").and_then(|rest| rest.split(' ').nth(1)))
        .ok_or_else(|| Error::Format("checkpoint holds no tensors".into()))?;
    parse_dtype(dtype)
}

impl<T: Elem> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = String::new();
        let mut payload = Vec::new();
        let _ = writeln!(manifest, "step {}", self.step);
        let _ = writeln!(manifest, "rng {} {}", self.rng_state.0, self.rng_state.1);
        if let Some(opt) = &self.optimizer {
            let _ = writeln!(manifest, "optimizer_steps {}", opt.steps);
        }
        for line in self.config.to_text().lines() {
            let _ = writeln!(manifest, "config {}", line);
        }
        let mut add = |name: String, t: &Tensor<T>| {
            let bytes = tensor_bytes(t);
            let _ = writeln!(
                manifest,
                "tensor {} {} {} {} {}",
                name,
                T::DTYPE.name(),
                shape_text(t.shape()),
                payload.len(),
                bytes.len()
            );
            payload.extend_from_slice(&bytes);
        };
        for (n, t) in self.params.iter() {
            add(format!("param.{n}"), t);
        }
        if let Some(opt) = &self.optimizer {
            for (n, t) in &opt.m {
                add(format!("adam.m.{n}"), t);
            }
            for (n, t) in &opt.v {
                add(format!("adam.v.{n}"), t);
            }
        }
        let mut out = Vec::with_capacity(16 + manifest.len() + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: String| Error::Format(m);
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(fmt("not a checkpoint file".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let end =
            16usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| fmt("truncated manifest".into()))?;
        let manifest = std::str::from_utf8(&bytes[16..end]).map_err(|_| fmt("manifest is not UTF-8".into()))?;
        let payload = &bytes[end..];

        let mut step = None;
        let mut rng_state = None;
        let mut opt_steps = None;
        let mut config_text = String::new();
        let mut params = ParamStore::default();
        let mut m = IndexMap::new();
        let mut v = IndexMap::new();
        for line in manifest.lines() {
            let mut it = line.split(' ');
            let num = |s: Option<&str>| -> Result<u64> {
                s.and_then(|x| x.parse().ok()).ok_or_else(|| fmt(format!("bad manifest line {:?}", line)))
            };
            match it.next() {
                Some("step") => step = Some(num(it.next())?),
                Some("rng") => rng_state = Some((num(it.next())?, num(it.next())?)),
                Some("optimizer_steps") => opt_steps = Some(num(it.next())?),
                Some("config") => {
                    config_text.push_str(&line["config ".len()..]);
                    config_text.push('\n');
                }
                Some("tensor") => {
                    let name = it.next().ok_or_else(|| fmt(format!("bad manifest line {:?}", line)))?;
                    let dtype = parse_dtype(it.next().unwrap_or(""))?;
                    if dtype != T::DTYPE {
                        return Err(fmt(format!("{} stored as {}, requested {}", name, dtype, T::DTYPE)));
                    }
                    let shape = parse_shape(it.next().unwrap_or(""))?;
                    let (off, n) = (num(it.next())? as usize, num(it.next())? as usize);
                    let data = off
                        .checked_add(n)
                        .and_then(|e| payload.get(off..e))
                        .ok_or_else(|| fmt(format!("{} lies outside the payload", name)))?;
                    let t = tensor_from_bytes::<T>(&shape, data)?;
                    if let Some(p) = name.strip_prefix("param.") {
                        params.insert(p, t);
                    } else if let Some(p) = name.strip_prefix("adam.m.") {
                        m.insert(p.to_string(), t);
                    } else if let Some(p) = name.strip_prefix("adam.v.") {
                        v.insert(p.to_string(), t);
                    } else {
                        return Err(fmt(format!("unknown tensor {}", name)));
                    }
                }
                _ => return Err(fmt(format!("bad manifest line {:?}", line))),
            }
        }
        let config = RunConfig::parse(&config_text)?;
        let optimizer = match opt_steps {
            Some(steps) => {
                let mut opt = AdamW::new(&params, config.weight_decay);
                opt.steps = steps;
                opt.m = m;
                opt.v = v;
                Some(opt)
            }
            None => None,
        };
        Ok(Self {
            step: step.ok_or_else(|| fmt("manifest lacks a step".into()))?,
            rng_state: rng_state.ok_or_else(|| fmt("manifest lacks an rng state".into()))?,
            config,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Format(format!("cannot read checkpoint {}: {}", path.display(), e)))?;
        Self::from_bytes(&bytes)
    }

    /// The model described by the stored configuration and weights.
    pub fn model(&self) -> Result<ConvMae<T>> {
        let (arch, dec) = self.config.model_configs();
        ConvMae::from_params(arch, dec, self.params.clone())
    }
}
