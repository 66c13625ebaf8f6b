//! Soft elliptical blobs on textured noise, with exact masks.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{tensor_to_pnm, Dataset, LabelMap, Manifest, ManifestEntry, Pnm, Sample, Splits};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n: usize,
    pub size: usize,
    /// Blob radius range as fractions of `size`.
    pub scale_range: (f64, f64),
    pub max_blobs: usize,
    pub seed: u64,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 20,
            size: 64,
            scale_range: (0.05, 0.4),
            max_blobs: 2,
            seed: 0,
            val_fraction: 0.2,
            test_fraction: 0.2,
        }
    }
}

/// An ellipse in pixel coordinates; `angle` rotates the `rx` axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Blob {
    pub cy: f64,
    pub cx: f64,
    pub ry: f64,
    pub rx: f64,
    pub angle: f64,
}

impl Blob {
    /// Normalised elliptical distance: 1 on the boundary.
    fn distance(&self, y: f64, x: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        ((u / self.rx).powi(2) + (v / self.ry).powi(2)).sqrt()
    }

    pub fn area(&self) -> f64 {
        PI * self.rx * self.ry
    }
}

#[derive(Clone, Debug)]
pub struct SynthSample {
    pub id: String,
    /// 1×H×W, 8-bit quantised values in [0, 1].
    pub image: Tensor,
    pub mask: LabelMap,
    pub blobs: Vec<Blob>,
}

/// Renders `blobs` over fresh background texture drawn from `rng`.
pub fn blob_image<R: Rng + ?Sized>(size: usize, blobs: &[Blob], rng: &mut R) -> (Tensor, LabelMap) {
    let waves: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| {
            let f = rng.gen_range(0.05..0.35);
            let th: f64 = rng.gen_range(0.0..PI);
            (f * th.cos(), f * th.sin(), rng.gen_range(0.0..2.0 * PI))
        })
        .collect();
    let fg = rng.gen_range(0.65..0.85);
    let noise = Normal::new(0.0, 0.04).expect("valid noise");
    let mut pixels = Vec::with_capacity(size * size);
    let mut labels = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let texture: f64 = waves.iter().map(|&(fy, fx, ph)| (fy * py + fx * px + ph).sin()).sum::<f64>() / 4.0;
            let bg = 0.35 + 0.1 * texture;
            let mut inside = false;
            let mut alpha: f64 = 0.0;
            for b in blobs {
                let d = b.distance(py, px);
                inside |= d <= 1.0;
                // Edge softness of roughly one pixel.
                let a = 1.0 / (1.0 + (-(1.0 - d) * b.rx.min(b.ry) / 0.75).exp());
                alpha = alpha.max(a);
            }
            let v = bg * (1.0 - alpha) + fg * alpha + noise.sample(rng);
            pixels.push((v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
            labels.push(u8::from(inside));
        }
    }
    (Tensor::new(vec![1, size, size], pixels).expect("consistent extents"), LabelMap::new(size, size, labels))
}

fn random_blob<R: Rng + ?Sized>(rng: &mut R, size: usize, range: (f64, f64)) -> Blob {
    let s = size as f64;
    let r = (rng.gen_range(range.0..=range.1) * s).max(1.5);
    let margin = r.min(s / 2.0);
    Blob {
        cy: rng.gen_range(margin..=s - margin),
        cx: rng.gen_range(margin..=s - margin),
        rx: r,
        ry: r * rng.gen_range(0.6..=1.0),
        angle: rng.gen_range(0.0..PI),
    }
}

/// Generates `cfg.n` samples deterministically from `cfg.seed`.
pub fn synth_blobs(cfg: &SynthConfig) -> Result<Vec<SynthSample>> {
    if cfg.size == 0 || cfg.size % 16 != 0 {
        return Err(Error::config(format!("synthetic image size must be a positive multiple of 16, got {}", cfg.size)));
    }
    let (lo, hi) = cfg.scale_range;
    if !(lo > 0.0 && lo <= hi && hi <= 0.5) {
        return Err(Error::config(format!("scale_range must satisfy 0 < lo ≤ hi ≤ 0.5, got {lo}..{hi}")));
    }
    if cfg.max_blobs == 0 {
        return Err(Error::config("max_blobs must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok((0..cfg.n)
        .map(|i| {
            let count = rng.gen_range(1..=cfg.max_blobs);
            let blobs: Vec<Blob> = (0..count).map(|_| random_blob(&mut rng, cfg.size, cfg.scale_range)).collect();
            let (image, mask) = blob_image(cfg.size, &blobs, &mut rng);
            SynthSample {
                id: format!("blob_{i:04}"),
                image,
                mask,
                blobs,
            }
        })
        .collect())
}

/// Mean and population standard deviation of the pixel values.
pub fn intensity_stats(samples: &[SynthSample]) -> (f64, f64) {
    let n: usize = samples.iter().map(|s| s.image.len()).sum();
    let mean = samples.iter().map(|s| s.image.sum()).sum::<f64>() / n as f64;
    let var = samples
        .iter()
        .flat_map(|s| s.image.data())
        .map(|v| (v - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    (mean, var.sqrt().max(1e-6))
}

/// Normalised in-memory dataset, identical to what loading the written files gives.
pub fn to_dataset(samples: &[SynthSample], mean: f64, std: f64) -> Dataset {
    let samples = samples
        .iter()
        .map(|s| {
            let mut image = s.image.clone();
            super::normalize(&mut image, &[mean], &[std]);
            Sample {
                id: s.id.clone(),
                image,
                mask: s.mask.clone(),
            }
        })
        .collect();
    Dataset {
        samples,
        classes: 2,
        channels: 1,
    }
}

/// Writes images, masks and `manifest.json` under `dir`.
///
/// Samples are split in order into train, val and test; normalisation
/// statistics come from the training split.
pub fn write_dataset(samples: &[SynthSample], cfg: &SynthConfig, dir: &Path) -> Result<Manifest> {
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let n = samples.len();
    let n_test = (n as f64 * cfg.test_fraction).round() as usize;
    let n_val = (n as f64 * cfg.val_fraction).round() as usize;
    if n_test + n_val >= n {
        return Err(Error::config("val and test fractions leave no training samples"));
    }
    let n_train = n - n_val - n_test;
    let mut splits = Splits::default();
    for (i, s) in samples.iter().enumerate() {
        let image = format!("images/{}.pgm", s.id);
        let mask = format!("masks/{}.pgm", s.id);
        tensor_to_pnm(&s.image)?.write(&dir.join(&image))?;
        let mask_px = s.mask.labels.iter().map(|&l| l * 255).collect();
        Pnm::gray(s.mask.width, s.mask.height, mask_px).write(&dir.join(&mask))?;
        let entry = ManifestEntry {
            id: s.id.clone(),
            image: image.into(),
            mask: mask.into(),
        };
        match i {
            i if i < n_train => splits.train.push(entry),
            i if i < n_train + n_val => splits.val.push(entry),
            _ => splits.test.push(entry),
        }
    }
    let (mean, std) = intensity_stats(&samples[..n_train]);
    let manifest = Manifest {
        classes: 2,
        channels: 1,
        mean: vec![mean],
        std: vec![std],
        value_to_label: BTreeMap::from([(0, 0), (255, 1)]),
        splits,
        root: dir.to_path_buf(),
    };
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}
