//! Writes multi-scale encoder features for a directory of images.
//!
//! Each image yields four raw little-endian float32 files, `NNNN.e1.f32`
//! through `NNNN.e4.f32`, shaped `[1, C, H/s, W/s]`. `manifest.txt` holds one
//! line per file: `<image> <level> <stride> <shape> <file>`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::backbone::{Backbone, PYRAMID_STRIDES};
use crate::error::{Error, Result};
use crate::io::{shape_text, write_raw_f32};
use crate::tensor::{DType, Elem, Graph, Tensor};
use crate::train::checkpoint::{stored_dtype, Checkpoint};
use crate::train::data::{image_files, load_normalized};

pub const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExportEntry {
    pub image: String,
    pub level: usize,
    pub stride: usize,
    pub shape: Vec<usize>,
    pub file: String,
}

impl ExportEntry {
    pub fn line(&self) -> String {
        format!("{} e{} {} {} {}", self.image, self.level, self.stride, shape_text(&self.shape), self.file)
    }

    pub fn parse(line: &str) -> Result<Self> {
        let bad = || Error::Format(format!("bad manifest line {:?}", line));
        let f: Vec<&str> = line.split(' ').collect();
        if f.len() != 5 {
            return Err(bad());
        }
        Ok(Self {
            image: f[0].to_string(),
            level: f[1].strip_prefix('e').and_then(|l| l.parse().ok()).ok_or_else(bad)?,
            stride: f[2].parse().map_err(|_| bad())?,
            shape: crate::io::parse_shape(f[3])?,
            file: f[4].to_string(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct ExportSummary {
    pub images: usize,
    pub entries: Vec<ExportEntry>,
    pub manifest: PathBuf,
}

/// Pyramid levels of one normalized `[1, 3, H, W]` image.
pub fn pyramid_tensors<T: Elem>(backbone: &Backbone<T>, img: &Tensor<T>) -> Result<[Tensor<T>; 4]> {
    let mut g = Graph::new();
    let p = backbone.extract_pyramid(&mut g, img)?;
    Ok(p.levels.map(|v| g.value(v).clone()))
}

/// Runs `backbone` over every image in `input`, resized to the model's input
/// size, and writes the pyramid files under `out`.
pub fn export_pyramids<T: Elem>(backbone: &Backbone<T>, input: &Path, out: &Path) -> Result<ExportSummary> {
    let files = image_files(input)?;
    fs::create_dir_all(out)?;
    let mut entries = Vec::new();
    for (i, path) in files.iter().enumerate() {
        let img = load_normalized::<T>(path, backbone.arch.image_size)?;
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("image").replace(' ', "_");
        for (k, level) in pyramid_tensors(backbone, &img)?.iter().enumerate() {
            let file = format!("{:04}.e{}.f32", i, k + 1);
            write_raw_f32(&out.join(&file), level)?;
            entries.push(ExportEntry {
                image: name.clone(),
                level: k + 1,
                stride: PYRAMID_STRIDES[k],
                shape: level.shape().to_vec(),
                file,
            });
        }
    }
    let mut text = String::new();
    for e in &entries {
        let _ = writeln!(text, "{}", e.line());
    }
    let manifest = out.join(MANIFEST);
    fs::write(&manifest, text)?;
    Ok(ExportSummary { images: files.len(), entries, manifest })
}

/// Loads a checkpoint of either element type and exports its pyramids.
pub fn export_features(ckpt: &Path, input: &Path, out: &Path) -> Result<ExportSummary> {
    let bytes =
        fs::read(ckpt).map_err(|e| Error::Format(format!("cannot read checkpoint {}: {}", ckpt.display(), e)))?;
    match stored_dtype(&bytes)? {
        DType::F32 => export_with::<f32>(&bytes, input, out),
        DType::F64 => export_with::<f64>(&bytes, input, out),
    }
}

fn export_with<T: Elem>(bytes: &[u8], input: &Path, out: &Path) -> Result<ExportSummary> {
    let model = Checkpoint::<T>::from_bytes(bytes)?.model()?;
    export_pyramids(&Backbone::from_model(&model), input, out)
}

/// Reads back a manifest written by [`export_pyramids`].
pub fn read_manifest(dir: &Path) -> Result<Vec<ExportEntry>> {
    fs::read_to_string(dir.join(MANIFEST))?.lines().map(ExportEntry::parse).collect()
}
