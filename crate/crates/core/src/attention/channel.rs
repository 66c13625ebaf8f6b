use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Graph, Linear, Module, ParamId, ParamStore};

/// Channel reweighting from average- and max-pooled descriptors through one
/// shared two-layer perceptron.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub fc1: Linear,
    pub fc2: Linear,
    pub channels: usize,
}

pub struct ChannelOutput {
    pub y: Var,
    /// N×C×1×1.
    pub beta: Var,
}

impl ChannelAttention {
    /// Reduction ratio of the hidden layer.
    pub const RATIO: usize = 2;

    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, rng: &mut R) -> Result<Self> {
        if channels == 0 || channels % Self::RATIO != 0 {
            return Err(Error::contract(format!(
                "channel attention needs a channel count divisible by {}, got {channels}",
                Self::RATIO
            )));
        }
        let hidden = channels / Self::RATIO;
        Ok(ChannelAttention {
            fc1: Linear::new(store, &format!("{name}.fc1"), channels, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, channels, rng),
            channels,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<ChannelOutput> {
        let s = g.tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.channels {
            return Err(Error::dim(format!(
                "channel attention expects N×{}×H×W, got {s:?}",
                self.channels
            )));
        }
        let beta = pooled_mlp(g, x, &self.fc1, &self.fc2)?;
        let beta = g.tape.sigmoid(beta);
        let beta = g.tape.reshape(beta, &[s[0], self.channels, 1, 1])?;
        let y = channel_residual(&mut g.tape, x, beta)?;
        Ok(ChannelOutput { y, beta })
    }
}

impl Module for ChannelAttention {
    fn params(&self) -> Vec<ParamId> {
        let mut p = self.fc1.params();
        p.extend(self.fc2.params());
        p
    }
}

/// `M(avg(x)) + M(max(x))` for a shared perceptron `M`, shape N×out.
pub(crate) fn pooled_mlp(g: &mut Graph, x: Var, fc1: &Linear, fc2: &Linear) -> Result<Var> {
    let n = g.tape.shape(x)[0];
    let c = fc1.in_features;
    let avg = g.tape.global_avg_pool(x)?;
    let max = g.tape.global_max_pool(x)?;
    let avg = g.tape.reshape(avg, &[n, 1, c])?;
    let max = g.tape.reshape(max, &[n, 1, c])?;
    // Both descriptors go through the perceptron as rows of one batch.
    let both = g.tape.concat_channels(&[avg, max])?;
    let both = g.tape.reshape(both, &[2 * n, c])?;
    let h = fc1.forward(g, both)?;
    let h = g.tape.relu(h);
    let o = fc2.forward(g, h)?;
    let o = g.tape.reshape(o, &[n, 2, fc2.out_features])?;
    let o = g.tape.sum_to(o, &[n, 1, fc2.out_features])?;
    g.tape.reshape(o, &[n, fc2.out_features])
}

/// `x·β + x` with β broadcast over the spatial axes.
pub fn channel_residual(tape: &mut Tape, x: Var, beta: Var) -> Result<Var> {
    let scaled = tape.mul(x, beta)?;
    tape.add(scaled, x)
}
