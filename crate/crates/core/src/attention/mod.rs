//! Spatial, channel and scale attention blocks and the exported coefficient maps.

mod channel;
mod gate;
mod nonlocal;
mod scale;

pub use channel::{channel_residual, ChannelAttention, ChannelOutput};
pub use gate::{AttentionGate, DualPathGate, GateOutput};
pub use nonlocal::{NonLocalBlock, NonLocalOutput, MAX_NONLOCAL_PIXELS};
pub use scale::{scale_residual, scale_weighted, ScaleAttention, ScaleOutput, SCALE_GROUP};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Detached coefficients of one attention block.
#[derive(Clone, Debug)]
pub enum AttentionMap {
    /// Pixel affinity, N×HW×HW, at an H×W feature grid.
    NonLocal { alpha: Tensor, height: usize, width: usize },
    /// Per-pathway gate maps, each N×1×H×W, and their mean.
    Gate { alphas: Vec<Tensor>, mean: Tensor },
    /// N×C×1×1.
    Channel { beta: Tensor },
    /// γ (N×S×1×1), γ* and the pixel-wise product γ·γ* (N×S×H×W).
    Scale { gamma: Tensor, gamma_star: Tensor, pixelwise: Tensor },
}

impl AttentionMap {
    /// A per-pixel N×1×H×W summary for spatial blocks: the gate mean, or the
    /// attention each pixel receives averaged over all query pixels.
    pub fn spatial(&self) -> Option<Tensor> {
        match self {
            AttentionMap::NonLocal { alpha, height, width } => {
                let (n, hw) = (alpha.shape()[0], height * width);
                let d = alpha.data();
                let t = Tensor::from_fn(&[n, 1, *height, *width], |i| {
                    let (b, j) = (i / hw, i % hw);
                    (0..hw).map(|r| d[(b * hw + r) * hw + j]).sum::<f64>() / hw as f64
                });
                Some(t)
            }
            AttentionMap::Gate { mean, .. } => Some(mean.clone()),
            _ => None,
        }
    }

    /// Every coefficient tensor held by this entry.
    pub fn tensors(&self) -> Vec<&Tensor> {
        match self {
            AttentionMap::NonLocal { alpha, .. } => vec![alpha],
            AttentionMap::Gate { alphas, mean } => alphas.iter().chain(std::iter::once(mean)).collect(),
            AttentionMap::Channel { beta } => vec![beta],
            AttentionMap::Scale { gamma, gamma_star, pixelwise } => vec![gamma, gamma_star, pixelwise],
        }
    }
}

/// Tape handles of attention coefficients recorded during a forward pass.
#[derive(Clone, Debug, Default)]
pub struct AttentionRecord {
    entries: Vec<(String, Recorded)>,
}

#[derive(Clone, Debug)]
enum Recorded {
    NonLocal { alpha: Var, height: usize, width: usize },
    Gate(Vec<Var>),
    Channel(Var),
    Scale { gamma: Var, gamma_star: Var, pixelwise: Var },
}

impl AttentionRecord {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn push_nonlocal(&mut self, name: &str, out: &NonLocalOutput, height: usize, width: usize) {
        let r = Recorded::NonLocal {
            alpha: out.alpha,
            height,
            width,
        };
        self.entries.push((name.to_string(), r));
    }

    pub fn push_gate(&mut self, name: &str, out: &GateOutput) {
        self.entries.push((name.to_string(), Recorded::Gate(out.alphas.clone())));
    }

    pub fn push_channel(&mut self, name: &str, out: &ChannelOutput) {
        self.entries.push((name.to_string(), Recorded::Channel(out.beta)));
    }

    pub fn push_scale(&mut self, name: &str, out: &ScaleOutput) {
        let r = Recorded::Scale {
            gamma: out.gamma,
            gamma_star: out.gamma_star,
            pixelwise: out.pixelwise,
        };
        self.entries.push((name.to_string(), r));
    }

    /// Copies every recorded coefficient off the tape.
    pub fn export(&self, tape: &Tape) -> Result<Vec<(String, AttentionMap)>> {
        if self.entries.is_empty() {
            return Err(Error::contract("no attention coefficients recorded; run a forward pass first"));
        }
        let get = |v: Var| tape.value(v).detach();
        let maps = self
            .entries
            .iter()
            .map(|(name, r)| {
                let m = match r {
                    Recorded::NonLocal { alpha, height, width } => AttentionMap::NonLocal {
                        alpha: get(*alpha),
                        height: *height,
                        width: *width,
                    },
                    Recorded::Gate(vars) => {
                        let alphas: Vec<Tensor> = vars.iter().map(|&v| get(v)).collect();
                        let k = alphas.len() as f64;
                        let mean = Tensor::from_fn(alphas[0].shape(), |i| {
                            alphas.iter().map(|a| a.data()[i]).sum::<f64>() / k
                        });
                        AttentionMap::Gate { alphas, mean }
                    }
                    Recorded::Channel(b) => AttentionMap::Channel { beta: get(*b) },
                    Recorded::Scale {
                        gamma,
                        gamma_star,
                        pixelwise,
                    } => AttentionMap::Scale {
                        gamma: get(*gamma),
                        gamma_star: get(*gamma_star),
                        pixelwise: get(*pixelwise),
                    },
                };
                (name.clone(), m)
            })
            .collect();
        Ok(maps)
    }
}

#[cfg(test)]
mod tests;
