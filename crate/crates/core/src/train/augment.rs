use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Random crop to `[height, width]`.
    pub crop: Option<[usize; 2]>,
    pub hflip: bool,
    pub vflip: bool,
    /// Rotations are drawn uniformly from `[-rotation, rotation]` radians.
    pub rotation: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop: None,
            hflip: true,
            vflip: true,
            rotation: std::f64::consts::FRAC_PI_6,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            crop: None,
            hflip: false,
            vflip: false,
            rotation: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=std::f64::consts::PI).contains(&self.rotation) {
            return Err(Error::config(format!("rotation bound must lie in [0, π], got {}", self.rotation)));
        }
        if let Some([h, w]) = self.crop {
            if h == 0 || w == 0 {
                return Err(Error::config("crop extents must be positive"));
            }
        }
        Ok(())
    }
}

/// Applies one random draw of the configured transforms to an image/mask
/// pair. Geometry is shared; the mask is resampled nearest-neighbour.
pub fn augment<R: Rng + ?Sized>(
    image: &Tensor,
    mask: &LabelMap,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(Tensor, LabelMap)> {
    let s = image.shape();
    if s.len() != 3 || s[1] != mask.height || s[2] != mask.width {
        return Err(Error::dim(format!(
            "image {s:?} does not match mask {}×{}",
            mask.height, mask.width
        )));
    }
    let (mut img, mut m) = (image.clone(), mask.clone());
    if let Some([ch, cw]) = cfg.crop {
        if ch > m.height || cw > m.width {
            return Err(Error::config(format!(
                "crop {ch}×{cw} larger than image {}×{}",
                m.height, m.width
            )));
        }
        let y0 = rng.gen_range(0..=m.height - ch);
        let x0 = rng.gen_range(0..=m.width - cw);
        (img, m) = crop(&img, &m, y0, x0, ch, cw);
    }
    if cfg.hflip && rng.gen_bool(0.5) {
        (img, m) = flip(&img, &m, false);
    }
    if cfg.vflip && rng.gen_bool(0.5) {
        (img, m) = flip(&img, &m, true);
    }
    if cfg.rotation > 0.0 {
        let angle = rng.gen_range(-cfg.rotation..=cfg.rotation);
        (img, m) = rotate(&img, &m, angle);
    }
    Ok((img, m))
}

fn crop(img: &Tensor, m: &LabelMap, y0: usize, x0: usize, h: usize, w: usize) -> (Tensor, LabelMap) {
    let (c, iw) = (img.shape()[0], m.width);
    let ih = m.height;
    let t = Tensor::from_fn(&[c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        img.data()[(ch * ih + y0 + y) * iw + x0 + x]
    });
    let labels = (0..h * w).map(|i| m.get(y0 + i / w, x0 + i % w)).collect();
    (t, LabelMap::new(h, w, labels))
}

/// Mirrors left-right, or top-bottom when `vertical`.
pub fn flip(img: &Tensor, m: &LabelMap, vertical: bool) -> (Tensor, LabelMap) {
    let (h, w) = (m.height, m.width);
    let src = |y: usize, x: usize| if vertical { (h - 1 - y, x) } else { (y, w - 1 - x) };
    let t = Tensor::from_fn(img.shape(), |i| {
        let (p, y, x) = (i / (h * w), (i / w) % h, i % w);
        let (sy, sx) = src(y, x);
        img.data()[(p * h + sy) * w + sx]
    });
    let labels = (0..h * w)
        .map(|i| {
            let (sy, sx) = src(i / w, i % w);
            m.get(sy, sx)
        })
        .collect();
    (t, LabelMap::new(h, w, labels))
}

/// Rotates about the image centre. The image is sampled bilinearly with zero
/// padding; the mask takes the nearest label, background outside.
pub fn rotate(img: &Tensor, m: &LabelMap, angle: f64) -> (Tensor, LabelMap) {
    let (h, w) = (m.height, m.width);
    let c = img.shape()[0];
    let (sin, cos) = angle.sin_cos();
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    // Source position (in pixel-index units) of each output pixel centre.
    let source = |y: usize, x: usize| {
        let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
        let sy = cos * dy - sin * dx + cy - 0.5;
        let sx = sin * dy + cos * dx + cx - 0.5;
        (sy, sx)
    };
    let at = |p: usize, y: i64, x: i64| -> f64 {
        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
            0.0
        } else {
            img.data()[(p * h + y as usize) * w + x as usize]
        }
    };
    let mut data = Vec::with_capacity(c * h * w);
    for p in 0..c {
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = source(y, x);
                let (y0, x0) = (sy.floor(), sx.floor());
                let (fy, fx) = (sy - y0, sx - x0);
                let (y0, x0) = (y0 as i64, x0 as i64);
                let top = at(p, y0, x0) * (1.0 - fx) + at(p, y0, x0 + 1) * fx;
                let bottom = at(p, y0 + 1, x0) * (1.0 - fx) + at(p, y0 + 1, x0 + 1) * fx;
                data.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    let labels = (0..h * w)
        .map(|i| {
            let (sy, sx) = source(i / w, i % w);
            let (ny, nx) = (sy.round(), sx.round());
            if ny < 0.0 || nx < 0.0 || ny >= h as f64 || nx >= w as f64 {
                0
            } else {
                m.get(ny as usize, nx as usize)
            }
        })
        .collect();
    (Tensor::from_parts(vec![c, h, w], data), LabelMap::new(h, w, labels))
}
