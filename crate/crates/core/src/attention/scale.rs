use rand::Rng;

use super::channel::pooled_mlp;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Graph, Linear, Module, ParamId, ParamStore};

/// Channels each scale is compressed to before fusion.
pub const SCALE_GROUP: usize = 4;

/// Scale-wise and pixel-wise weighting of multi-resolution decoder features.
#[derive(Clone, Debug)]
pub struct ScaleAttention {
    pub compress: Vec<Conv2d>,
    pub fc1: Linear,
    pub fc2: Linear,
    /// 3×3 convolution of the refiner.
    pub star1: Conv2d,
    /// 1×1 convolution of the refiner, one output per scale or a single map.
    pub star2: Conv2d,
    pub scales: usize,
}

pub struct ScaleOutput {
    /// N×(4·S)×H×W.
    pub y: Var,
    /// N×S×1×1.
    pub gamma: Var,
    /// N×S×H×W, or N×1×H×W with a single-map refiner.
    pub gamma_star: Var,
    /// `γ·γ*`, N×S×H×W.
    pub pixelwise: Var,
}

impl ScaleAttention {
    /// `scale_channels[s]` is the channel count of the feature at scale `s`.
    /// A `single_map` refiner emits one γ* map shared by every scale.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        scale_channels: &[usize],
        single_map: bool,
        rng: &mut R,
    ) -> Self {
        let s = scale_channels.len();
        let width = SCALE_GROUP * s;
        let compress = scale_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv2d::k1(store, &format!("{name}.compress{}", i + 1), c, SCALE_GROUP, true, rng))
            .collect();
        ScaleAttention {
            compress,
            fc1: Linear::new(store, &format!("{name}.fc1"), width, width / 2, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), width / 2, s, rng),
            star1: Conv2d::k3(store, &format!("{name}.star1"), width, SCALE_GROUP, true, rng),
            star2: Conv2d::k1(store, &format!("{name}.star2"), SCALE_GROUP, if single_map { 1 } else { s }, true, rng),
            scales: s,
        }
    }

    pub fn width(&self) -> usize {
        SCALE_GROUP * self.scales
    }

    /// Fuses `features` (finest first) at `out_h`×`out_w`.
    pub fn forward(&self, g: &mut Graph, features: &[Var], out_h: usize, out_w: usize) -> Result<ScaleOutput> {
        if features.len() != self.scales {
            return Err(Error::contract(format!(
                "scale attention built for {} scales, got {}",
                self.scales,
                features.len()
            )));
        }
        let mut parts = Vec::with_capacity(self.scales);
        for (conv, &f) in self.compress.iter().zip(features) {
            // Pointwise convolution and bilinear resampling commute (the
            // interpolation weights sum to one), so compress first.
            let c = conv.forward(g, f)?;
            let s = g.tape.shape(c);
            let c = if s[2] == out_h && s[3] == out_w { c } else { g.tape.bilinear_resize(c, out_h, out_w)? };
            parts.push(c);
        }
        let fhat = g.tape.concat_channels(&parts)?;
        let n = g.tape.shape(fhat)[0];

        let gamma = pooled_mlp(g, fhat, &self.fc1, &self.fc2)?;
        let gamma = g.tape.sigmoid(gamma);
        let gamma = g.tape.reshape(gamma, &[n, self.scales, 1, 1])?;

        let weighted = scale_weighted(&mut g.tape, fhat, gamma, self.scales)?;
        let r = self.star1.forward(g, weighted)?;
        let r = g.tape.relu(r);
        let r = self.star2.forward(g, r)?;
        let gamma_star = g.tape.sigmoid(r);

        let y = scale_residual(&mut g.tape, fhat, gamma, gamma_star, self.scales)?;
        // Broadcasting also expands a single γ* map across scales.
        let pixelwise = g.tape.mul(gamma, gamma_star)?;
        Ok(ScaleOutput {
            y,
            gamma,
            gamma_star,
            pixelwise,
        })
    }
}

impl Module for ScaleAttention {
    fn params(&self) -> Vec<ParamId> {
        self.compress
            .iter()
            .flat_map(Module::params)
            .chain(self.fc1.params())
            .chain(self.fc2.params())
            .chain(self.star1.params())
            .chain(self.star2.params())
            .collect()
    }
}

fn grouped(tape: &mut Tape, fhat: Var, scales: usize) -> Result<(Var, Vec<usize>)> {
    let s = tape.shape(fhat).to_vec();
    if s.len() != 4 || s[1] != SCALE_GROUP * scales {
        return Err(Error::dim(format!(
            "expected N×{}×H×W fused features, got {s:?}",
            SCALE_GROUP * scales
        )));
    }
    let g = tape.reshape(fhat, &[s[0], scales, SCALE_GROUP, s[2] * s[3]])?;
    Ok((g, s))
}

/// Reshapes an N×k×(1|H)×(1|W) coefficient so it broadcasts over groups.
fn per_group(tape: &mut Tape, coeff: Var) -> Result<Var> {
    let s = tape.shape(coeff).to_vec();
    tape.reshape(coeff, &[s[0], s[1], 1, s[2] * s[3]])
}

/// `F̂·γ` with each γ entry applied to its scale's channel group.
pub fn scale_weighted(tape: &mut Tape, fhat: Var, gamma: Var, scales: usize) -> Result<Var> {
    let (f, shape) = grouped(tape, fhat, scales)?;
    let gm = per_group(tape, gamma)?;
    let w = tape.mul(f, gm)?;
    tape.reshape(w, &shape)
}

/// `F̂·γ·γ* + F̂·γ + F̂`.
pub fn scale_residual(tape: &mut Tape, fhat: Var, gamma: Var, gamma_star: Var, scales: usize) -> Result<Var> {
    let (f, shape) = grouped(tape, fhat, scales)?;
    let gm = per_group(tape, gamma)?;
    let gs = per_group(tape, gamma_star)?;
    let fg = tape.mul(f, gm)?;
    let fgs = tape.mul(fg, gs)?;
    let y = tape.add(fgs, fg)?;
    let y = tape.add(y, f)?;
    tape.reshape(y, &shape)
}
