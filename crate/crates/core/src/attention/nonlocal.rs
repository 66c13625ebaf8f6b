use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Graph, Module, ParamId, ParamStore};

/// Largest H·W the block accepts; the affinity matrix is (H·W)².
pub const MAX_NONLOCAL_PIXELS: usize = 4096;

/// Self-attention over all pixel pairs with a residual connection.
#[derive(Clone, Debug)]
pub struct NonLocalBlock {
    pub theta: Conv2d,
    pub phi: Conv2d,
    pub g: Conv2d,
    pub expand: Conv2d,
    pub expand_bn: BatchNorm2d,
    pub channels: usize,
    pub inner: usize,
}

pub struct NonLocalOutput {
    pub y: Var,
    /// Row-stochastic N×HW×HW affinity.
    pub alpha: Var,
}

impl NonLocalBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, inner: usize, rng: &mut R) -> Self {
        NonLocalBlock {
            theta: Conv2d::k1(store, &format!("{name}.theta"), channels, inner, true, rng),
            phi: Conv2d::k1(store, &format!("{name}.phi"), channels, inner, true, rng),
            g: Conv2d::k1(store, &format!("{name}.g"), channels, inner, true, rng),
            expand: Conv2d::k1(store, &format!("{name}.expand"), inner, channels, false, rng),
            expand_bn: BatchNorm2d::new(store, &format!("{name}.expand_bn"), channels),
            channels,
            inner,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<NonLocalOutput> {
        let s = g.tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.channels {
            return Err(Error::contract(format!(
                "non-local block expects N×{}×H×W, got {s:?}",
                self.channels
            )));
        }
        let (n, h, w) = (s[0], s[2], s[3]);
        let hw = h * w;
        if hw > MAX_NONLOCAL_PIXELS {
            return Err(Error::contract(format!(
                "non-local block limited to {MAX_NONLOCAL_PIXELS} pixels, got {h}×{w}"
            )));
        }
        let flat = [n, self.inner, hw];
        let q = self.theta.forward(g, x)?;
        let q = g.tape.reshape(q, &flat)?;
        let k = self.phi.forward(g, x)?;
        let k = g.tape.reshape(k, &flat)?;
        let v = self.g.forward(g, x)?;
        let v = g.tape.reshape(v, &flat)?;

        let qt = g.tape.transpose(q)?;
        let logits = g.tape.matmul(qt, k)?;
        let alpha = g.tape.softmax_rows(logits)?;
        let vt = g.tape.transpose(v)?;
        let mixed = g.tape.matmul(alpha, vt)?;
        let mixed = g.tape.transpose(mixed)?;
        let mixed = g.tape.reshape(mixed, &[n, self.inner, h, w])?;

        let e = self.expand.forward(g, mixed)?;
        let e = self.expand_bn.forward(g, e)?;
        let y = g.tape.add(e, x)?;
        Ok(NonLocalOutput { y, alpha })
    }
}

impl Module for NonLocalBlock {
    fn params(&self) -> Vec<ParamId> {
        [&self.theta, &self.phi, &self.g, &self.expand]
            .into_iter()
            .flat_map(Module::params)
            .chain(self.expand_bn.params())
            .collect()
    }
}
