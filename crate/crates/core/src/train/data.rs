//! Training images: built-in synthetic textures or a directory of RGB files,
//! served as randomly cropped, normalized batches.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::tensor::{Elem, Tensor};

pub const PIXEL_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const PIXEL_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Lowest luminance swing of a texture. Flatter textures would be mostly
/// noise once each patch is normalized.
const MIN_CONTRAST: f32 = 0.3;
const NOISE_STD: f64 = 0.01;

/// Images stored as `[3, side, side]` with values in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub side: usize,
    pub images: Vec<Tensor<f32>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Texture {
    Stripes { horizontal: bool },
    Diagonal,
    Checker,
    Ramp,
}

/// Pattern value in `[0, 1]` at pixel `(r, c)`.
fn pattern(kind: Texture, period: usize, phase: usize, r: usize, c: usize, side: usize) -> f32 {
    let half = period / 2;
    match kind {
        Texture::Stripes { horizontal } => {
            let x = if horizontal { r } else { c };
            f32::from(u8::from((x + phase) % period < half))
        }
        Texture::Diagonal => f32::from(u8::from((r + c + phase) % period < half)),
        Texture::Checker => f32::from(u8::from((((r + phase) / half) + (c / half)) % 2 == 0)),
        Texture::Ramp => ((r + c) as f32) / (2 * side - 2) as f32,
    }
}

impl Corpus {
    /// `count` textures of side `side`: stripes, diagonals and checkerboards
    /// with periods 8 or 16 aligned to the pixel grid, and ramps. Each
    /// modulates the brightness of a random base colour and carries light noise.
    pub fn synthetic(count: usize, side: usize, seed: u64) -> Self {
        let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
        let mut master = CounterRng::new(seed);
        let images = (0..count)
            .map(|_| {
                let mut rng = master.fork();
                let kind = match rng.below(4) {
                    0 => Texture::Stripes { horizontal: rng.below(2) == 0 },
                    1 => Texture::Diagonal,
                    2 => Texture::Checker,
                    _ => Texture::Ramp,
                };
                let period = [8, 16][rng.below(2)];
                let phase = rng.below(2) * period / 2;
                let base: [f32; 3] = std::array::from_fn(|_| 0.25 + 0.5 * rng.unit_f64() as f32);
                let contrast = MIN_CONTRAST + (1.0 - MIN_CONTRAST) * rng.unit_f64() as f32;
                let mut data = Vec::with_capacity(3 * side * side);
                for ch in 0..3 {
                    for r in 0..side {
                        for c in 0..side {
                            let t = pattern(kind, period, phase, r, c, side);
                            let v = base[ch] + 0.5 * contrast * (t - 0.5) + noise.sample(&mut rng) as f32;
                            data.push(v.clamp(0.0, 1.0));
                        }
                    }
                }
                Tensor::new(vec![3, side, side], data).expect("consistent")
            })
            .collect();
        Self { side, images }
    }

    /// Every PNG or JPEG in `dir` (sorted by name), resized to `side x side`.
    pub fn from_dir(dir: &Path, side: usize) -> Result<Self> {
        let images = image_files(dir)?.iter().map(|p| load_rgb(p, side)).collect::<Result<_>>()?;
        Ok(Self { side, images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Normalized `[B, 3, crop, crop]` batch of `indices`, each cropped at an
    /// offset drawn from `rng`.
    pub fn batch<T: Elem>(&self, indices: &[usize], crop: usize, rng: &mut CounterRng) -> Result<Tensor<T>> {
        if crop > self.side {
            return Err(Error::Config(format!("crop {} larger than images of side {}", crop, self.side)));
        }
        let span = self.side - crop + 1;
        let mut data = Vec::with_capacity(indices.len() * 3 * crop * crop);
        for &i in indices {
            let img =
                self.images.get(i).ok_or_else(|| Error::Invariant(format!("image {} of {}", i, self.images.len())))?;
            let (r0, c0) = (rng.below(span), rng.below(span));
            for ch in 0..3 {
                for r in 0..crop {
                    let row = (ch * self.side + r0 + r) * self.side + c0;
                    data.extend(
                        img.data()[row..row + crop]
                            .iter()
                            .map(|&v| T::from_f64(f64::from((v - PIXEL_MEAN[ch]) / PIXEL_STD[ch]))),
                    );
                }
            }
        }
        Tensor::new(vec![indices.len(), 3, crop, crop], data)
    }
}

/// Sorted PNG and JPEG paths directly inside `dir`.
pub fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// `[3, side, side]` in `[0, 1]`, resized with a triangle filter.
pub fn load_rgb(path: &Path, side: usize) -> Result<Tensor<f32>> {
    let img = image::open(path)?.to_rgb8();
    let img = image::imageops::resize(&img, side as u32, side as u32, FilterType::Triangle);
    let mut data = vec![0.0f32; 3 * side * side];
    for (x, y, px) in img.enumerate_pixels() {
        for ch in 0..3 {
            data[(ch * side + y as usize) * side + x as usize] = f32::from(px[ch]) / 255.0;
        }
    }
    Tensor::new(vec![3, side, side], data)
}

/// Normalized `[1, 3, side, side]` network input for one image file.
pub fn load_normalized<T: Elem>(path: &Path, side: usize) -> Result<Tensor<T>> {
    let corpus = Corpus { side, images: vec![load_rgb(path, side)?] };
    corpus.batch(&[0], side, &mut CounterRng::new(0))
}
