//! Images, label maps, dataset manifests and the synthetic blob generator.

mod manifest;
pub mod pnm;
mod synth;

pub use manifest::{Manifest, ManifestEntry, Split, Splits};
pub use pnm::Pnm;
pub use synth::{blob_image, intensity_stats, synth_blobs, to_dataset, write_dataset, Blob, SynthConfig, SynthSample};

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Integer class label per pixel, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Self {
        assert_eq!(labels.len(), height * width, "label count does not match extents");
        LabelMap { height, width, labels }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn max_label(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// K×H×W indicator tensor.
    pub fn one_hot(&self, classes: usize) -> Tensor {
        let hw = self.height * self.width;
        Tensor::from_fn(&[classes, self.height, self.width], |i| {
            f64::from(u8::from(self.labels[i % hw] as usize == i / hw))
        })
    }

    /// Pixels equal to `class`.
    pub fn select(&self, class: u8) -> Vec<bool> {
        self.labels.iter().map(|&l| l == class).collect()
    }
}

/// A normalised C×H×W image with its label map.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub mask: LabelMap,
}

/// Samples plus the statistics needed to interpret them.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub classes: usize,
    pub channels: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Loads one split of a manifest.
    pub fn load(manifest: &Manifest, split: Split) -> Result<Self> {
        let samples = manifest
            .entries(split)
            .iter()
            .map(|e| {
                let image = load_image(&manifest.resolve(&e.image), &manifest.mean, &manifest.std)?;
                let mask = load_mask(&manifest.resolve(&e.mask), &manifest.value_to_label)?;
                if image.shape()[1..] != [mask.height, mask.width] {
                    return Err(Error::dim(format!("{}: image and mask extents differ", e.id)));
                }
                if image.shape()[0] != manifest.channels {
                    return Err(Error::config(format!(
                        "{}: image has {} channels, manifest says {}",
                        e.id,
                        image.shape()[0],
                        manifest.channels
                    )));
                }
                Ok(Sample {
                    id: e.id.clone(),
                    image,
                    mask,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            samples,
            classes: manifest.classes,
            channels: manifest.channels,
        })
    }
}

/// 8-bit pixels scaled to [0, 1] as a C×H×W tensor.
pub fn pnm_to_tensor(img: &Pnm) -> Tensor {
    let (c, hw) = (img.channels, img.width * img.height);
    Tensor::from_fn(&[c, img.height, img.width], |i| {
        f64::from(img.pixels[(i % hw) * c + i / hw]) / 255.0
    })
}

/// Inverse of [`pnm_to_tensor`] for values in [0, 1]; out-of-range values clamp.
pub fn tensor_to_pnm(t: &Tensor) -> Result<Pnm> {
    let s = t.shape();
    if s.len() != 3 || !(s[0] == 1 || s[0] == 3) {
        return Err(Error::dim(format!("image tensor must be 1×H×W or 3×H×W, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let hw = h * w;
    let pixels = (0..c * hw)
        .map(|i| {
            let (p, ch) = (i / c, i % c);
            (t.data()[ch * hw + p].clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect();
    Ok(Pnm {
        width: w,
        height: h,
        channels: c,
        pixels,
    })
}

/// Per-channel `(v − mean) / std`.
pub fn normalize(t: &mut Tensor, mean: &[f64], std: &[f64]) {
    let plane = t.len() / t.shape()[0];
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        let c = i / plane;
        *v = (*v - mean[c]) / std[c];
    }
}

pub fn denormalize(t: &mut Tensor, mean: &[f64], std: &[f64]) {
    let plane = t.len() / t.shape()[0];
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        let c = i / plane;
        *v = *v * std[c] + mean[c];
    }
}

/// Reads a PGM/PPM and standardises it with dataset statistics.
pub fn load_image(path: &Path, mean: &[f64], std: &[f64]) -> Result<Tensor> {
    let img = Pnm::read(path)?;
    if mean.len() != img.channels || std.len() != img.channels {
        return Err(Error::config(format!(
            "{}: {} channels but {} normalisation entries",
            path.display(),
            img.channels,
            mean.len()
        )));
    }
    let mut t = pnm_to_tensor(&img);
    normalize(&mut t, mean, std);
    Ok(t)
}

/// Reads a PGM mask, mapping gray values to labels.
pub fn load_mask(path: &Path, table: &BTreeMap<u8, u8>) -> Result<LabelMap> {
    let img = Pnm::read(path)?;
    if img.channels != 1 {
        return Err(Error::Format(format!("{}: masks must be grayscale PGM", path.display())));
    }
    let mut unknown: Vec<u8> = img.pixels.iter().copied().filter(|v| !table.contains_key(v)).collect();
    if !unknown.is_empty() {
        unknown.sort_unstable();
        unknown.dedup();
        return Err(Error::config(format!(
            "{}: mask values {unknown:?} are not in value_to_label",
            path.display()
        )));
    }
    let labels = img.pixels.iter().map(|v| table[v]).collect();
    Ok(LabelMap::new(img.height, img.width, labels))
}
