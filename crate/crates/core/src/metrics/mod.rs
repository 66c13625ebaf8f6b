//! Overlap and surface-distance metrics for binary masks, plus per-class
//! aggregation.

mod edt;
mod report;

pub use edt::squared_distance_transform;
pub use report::{report, ClassReport, ImageScore, MetricsReport, Summary};

use crate::data::LabelMap;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), height * width, "mask size does not match extents");
        BinaryMask { height, width, bits }
    }

    pub fn from_labels(map: &LabelMap, class: u8) -> Self {
        Self::new(map.height, map.width, map.select(class))
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }
}

fn same_shape(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if (a.height, a.width) == (b.height, b.width) {
        Ok(())
    } else {
        Err(Error::dim(format!(
            "mask shapes differ: {}×{} vs {}×{}",
            a.height, a.width, b.height, b.width
        )))
    }
}

/// `2|A∩B| / (|A|+|B|)`; two empty masks score 1.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    same_shape(a, b)?;
    let inter = a.bits.iter().zip(&b.bits).filter(|(x, y)| **x && **y).count();
    let total = a.count() + b.count();
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// Foreground pixels with at least one background 4-neighbour, the image
/// border counting as background. Row-major `(y, x)` order.
pub fn extract_boundary(m: &BinaryMask) -> Vec<(usize, usize)> {
    let (h, w) = (m.height, m.width);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !m.get(y, x) {
                continue;
            }
            let edge = y == 0
                || x == 0
                || y + 1 == h
                || x + 1 == w
                || !m.get(y - 1, x)
                || !m.get(y + 1, x)
                || !m.get(y, x - 1)
                || !m.get(y, x + 1);
            if edge {
                out.push((y, x));
            }
        }
    }
    out
}

/// Average symmetric surface distance in pixels (Euclidean).
///
/// Point-to-set distances are read off an exact distance transform of each
/// boundary, so the cost is linear in the image size.
pub fn assd(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    same_shape(a, b)?;
    if a.is_empty() || b.is_empty() {
        return Err(Error::UndefinedMetric("surface distance needs two nonempty masks".into()));
    }
    let (sa, sb) = (extract_boundary(a), extract_boundary(b));
    let (h, w) = (a.height, a.width);
    let to_b = squared_distance_transform(h, w, &sb);
    let to_a = squared_distance_transform(h, w, &sa);
    let sum_a: f64 = sa.iter().map(|&(y, x)| to_b[y * w + x].sqrt()).sum();
    let sum_b: f64 = sb.iter().map(|&(y, x)| to_a[y * w + x].sqrt()).sum();
    Ok((sum_a + sum_b) / (sa.len() + sb.len()) as f64)
}
