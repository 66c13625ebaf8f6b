use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Graph, Module, ParamId, ParamStore};

/// One additive attention gate producing a per-pixel coefficient map.
#[derive(Clone, Debug)]
pub struct AttentionGate {
    pub w_l: Conv2d,
    pub w_h: Conv2d,
    pub psi: Conv2d,
}

impl AttentionGate {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        low_channels: usize,
        high_channels: usize,
        inner: usize,
        rng: &mut R,
    ) -> Self {
        AttentionGate {
            w_l: Conv2d::k1(store, &format!("{name}.w_l"), low_channels, inner, true, rng),
            w_h: Conv2d::k1(store, &format!("{name}.w_h"), high_channels, inner, true, rng),
            psi: Conv2d::k1(store, &format!("{name}.psi"), inner, 1, true, rng),
        }
    }

    /// `sigmoid(psi(relu(W_l·x_l + W_h·x_h)))`, shape N×1×H×W.
    pub fn coefficients(&self, g: &mut Graph, x_l: Var, x_h: Var) -> Result<Var> {
        let a = self.w_l.forward(g, x_l)?;
        let b = self.w_h.forward(g, x_h)?;
        let s = g.tape.add(a, b)?;
        let s = g.tape.relu(s);
        let p = self.psi.forward(g, s)?;
        Ok(g.tape.sigmoid(p))
    }
}

impl Module for AttentionGate {
    fn params(&self) -> Vec<ParamId> {
        [&self.w_l, &self.w_h, &self.psi].into_iter().flat_map(Module::params).collect()
    }
}

/// Parallel attention gates whose calibrated skips are fused by a 1×1
/// convolution with batch norm and ReLU.
///
/// With one pathway this is the standard single attention gate.
#[derive(Clone, Debug)]
pub struct DualPathGate {
    pub pathways: Vec<AttentionGate>,
    pub merge: Conv2d,
    pub merge_bn: BatchNorm2d,
    pub low_channels: usize,
    pub high_channels: usize,
    pub out_channels: usize,
}

pub struct GateOutput {
    pub y: Var,
    /// One N×1×H×W map per pathway.
    pub alphas: Vec<Var>,
}

impl DualPathGate {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        low_channels: usize,
        high_channels: usize,
        out_channels: usize,
        pathways: usize,
        rng: &mut R,
    ) -> Self {
        let gates = (0..pathways)
            .map(|i| AttentionGate::new(store, &format!("{name}.gate{i}"), low_channels, high_channels, out_channels, rng))
            .collect();
        DualPathGate {
            pathways: gates,
            merge: Conv2d::k1(store, &format!("{name}.merge"), pathways * low_channels, out_channels, false, rng),
            merge_bn: BatchNorm2d::new(store, &format!("{name}.merge_bn"), out_channels),
            low_channels,
            high_channels,
            out_channels,
        }
    }

    pub fn forward(&self, g: &mut Graph, x_l: Var, x_h: Var) -> Result<GateOutput> {
        let (sl, sh) = (g.tape.shape(x_l).to_vec(), g.tape.shape(x_h).to_vec());
        if sl.len() != 4 || sh.len() != 4 || sl[0] != sh[0] || sl[2..] != sh[2..] {
            return Err(Error::dim(format!("gate inputs must share N, H and W: {sl:?} vs {sh:?}")));
        }
        let mut alphas = Vec::with_capacity(self.pathways.len());
        let mut gated = Vec::with_capacity(self.pathways.len());
        for gate in &self.pathways {
            let a = gate.coefficients(g, x_l, x_h)?;
            gated.push(g.tape.mul(x_l, a)?);
            alphas.push(a);
        }
        let cat = if gated.len() == 1 { gated[0] } else { g.tape.concat_channels(&gated)? };
        let y = self.merge.forward(g, cat)?;
        let y = self.merge_bn.forward(g, y)?;
        Ok(GateOutput { y: g.tape.relu(y), alphas })
    }
}

impl Module for DualPathGate {
    fn params(&self) -> Vec<ParamId> {
        self.pathways
            .iter()
            .flat_map(Module::params)
            .chain(self.merge.params())
            .chain(self.merge_bn.params())
            .collect()
    }
}
