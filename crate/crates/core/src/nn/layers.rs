use rand::Rng;

use super::init::he_normal;
use super::{Graph, Mode, Module, ParamId, ParamKind, ParamStore};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// 2-D convolution with square kernels.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let shape = [out_channels, in_channels, kernel, kernel];
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&shape), ParamKind::Trainable);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]), ParamKind::Trainable));
        let conv = Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        };
        conv.reset_parameters(store, rng);
        conv
    }

    /// Same-size 3×3 convolution.
    pub fn k3<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, bias: bool, rng: &mut R) -> Self {
        Self::new(store, name, cin, cout, 3, 1, 1, bias, rng)
    }

    /// Pointwise 1×1 convolution.
    pub fn k1<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, bias: bool, rng: &mut R) -> Self {
        Self::new(store, name, cin, cout, 1, 1, 0, bias, rng)
    }

    /// He-normal weights (variance 2/fan_in), zero bias.
    pub fn reset_parameters<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let shape = store.get(self.weight).shape().to_vec();
        let fan_in = self.in_channels * self.kernel * self.kernel;
        let w = he_normal(rng, &shape, fan_in);
        store.get_mut(self.weight).data_mut().copy_from_slice(w.data());
        if let Some(b) = self.bias {
            store.get_mut(b).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.tape.conv2d(x, w, b, self.stride, self.padding)
    }
}

impl Module for Conv2d {
    fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// Per-channel batch normalisation with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let c = [channels];
        BatchNorm2d {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&c), ParamKind::Trainable),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&c), ParamKind::Trainable),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&c), ParamKind::Buffer),
            running_var: store.add(format!("{name}.running_var"), Tensor::ones(&c), ParamKind::Buffer),
            channels,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn reset_parameters(&self, store: &mut ParamStore) {
        store.get_mut(self.gamma).data_mut().iter_mut().for_each(|v| *v = 1.0);
        store.get_mut(self.beta).data_mut().iter_mut().for_each(|v| *v = 0.0);
        store.get_mut(self.running_mean).data_mut().iter_mut().for_each(|v| *v = 0.0);
        store.get_mut(self.running_var).data_mut().iter_mut().for_each(|v| *v = 1.0);
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        match g.mode() {
            Mode::Train => {
                let (y, stats) = g.tape.batch_norm_train(x, gamma, beta, self.eps)?;
                g.queue_stats(self.running_mean, self.running_var, self.momentum, stats);
                Ok(y)
            }
            Mode::Eval => {
                let store = g.store();
                let (rm, rv) = (store.get(self.running_mean).data(), store.get(self.running_var).data());
                g.tape.batch_norm_eval(x, gamma, beta, rm, rv, self.eps)
            }
        }
    }
}

impl Module for BatchNorm2d {
    fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

/// Fully connected layer on N×in inputs.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            he_normal(rng, &[out_features, in_features], in_features),
            ParamKind::Trainable,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_features]), ParamKind::Trainable);
        Linear {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    /// `x · Wᵀ + b` for `x` of shape N×in.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.tape.shape(x).to_vec();
        if s.len() != 2 || s[1] != self.in_features {
            return Err(Error::dim(format!(
                "linear layer expects N×{}, got {s:?}",
                self.in_features
            )));
        }
        let w = g.param(self.weight);
        let wt = g.tape.transpose(w)?;
        let y = g.tape.matmul(x, wt)?;
        let b = g.param(self.bias);
        let b = g.tape.reshape(b, &[1, self.out_features])?;
        g.tape.add(y, b)
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

/// Bias-free convolution → batch norm → ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, kernel: usize, rng: &mut R) -> Self {
        ConvBnRelu {
            conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, kernel, 1, kernel / 2, false, rng),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), cout),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        let y = self.bn.forward(g, y)?;
        Ok(g.tape.relu(y))
    }
}

impl Module for ConvBnRelu {
    fn params(&self) -> Vec<ParamId> {
        let mut p = self.conv.params();
        p.extend(self.bn.params());
        p
    }
}

/// A chain of 3×3 conv-BN-ReLU stages through the given channel widths.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub stages: Vec<ConvBnRelu>,
}

impl ConvBlock {
    /// `widths = [in, w1, w2, ...]` builds one stage per consecutive pair.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, widths: &[usize], rng: &mut R) -> Self {
        let stages = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| ConvBnRelu::new(store, &format!("{name}.{i}"), w[0], w[1], 3, rng))
            .collect();
        ConvBlock { stages }
    }

    pub fn forward(&self, g: &mut Graph, mut x: Var) -> Result<Var> {
        for s in &self.stages {
            x = s.forward(g, x)?;
        }
        Ok(x)
    }
}

impl Module for ConvBlock {
    fn params(&self) -> Vec<ParamId> {
        self.stages.iter().flat_map(Module::params).collect()
    }
}
