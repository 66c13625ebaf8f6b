use super::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-channel statistics of a training-mode batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance used for normalisation.
    pub var: Vec<f64>,
    /// Elements per channel (N·H·W).
    pub count: usize,
}

struct BatchNorm {
    /// Normalised pre-affine values.
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    /// Training mode: the batch statistics depend on the input.
    batch_stats: bool,
    n: usize,
    c: usize,
    spatial: usize,
}

impl Backward for BatchNorm {
    fn name(&self) -> &'static str {
        "batch_norm"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let gamma = inputs[1].data();
        let (n, c, sp) = (self.n, self.c, self.spatial);
        let m = (n * sp) as f64;
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * sp;
                for p in off..off + sp {
                    dgamma[ch] += grad[p] * self.xhat[p];
                    dbeta[ch] += grad[p];
                }
            }
        }
        let dx = needs[0].then(|| {
            let mut dx = vec![0.0; grad.len()];
            for s in 0..n {
                for ch in 0..c {
                    let off = (s * c + ch) * sp;
                    let k = gamma[ch] * self.inv_std[ch];
                    for p in off..off + sp {
                        dx[p] = if self.batch_stats {
                            k * (grad[p] - dbeta[ch] / m - self.xhat[p] * dgamma[ch] / m)
                        } else {
                            k * grad[p]
                        };
                    }
                }
            }
            dx
        });
        vec![dx, needs[1].then_some(dgamma), needs[2].then_some(dbeta)]
    }
}

fn check_inputs(x: &[usize], gamma: &[usize], beta: &[usize]) -> Result<(usize, usize, usize)> {
    let [n, c, h, w] = <[usize; 4]>::try_from(x)
        .map_err(|_| Error::dim(format!("batch norm input must be N×C×H×W, got {x:?}")))?;
    if gamma != [c] || beta != [c] {
        return Err(Error::dim(format!(
            "batch norm affine parameters {gamma:?}/{beta:?} do not match {c} channels"
        )));
    }
    Ok((n, c, h * w))
}

impl Tape {
    fn batch_norm_apply(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], inv_std: Vec<f64>, batch_stats: bool) -> Var {
        let (n, c, sp) = {
            let s = self.shape(x);
            (s[0], s[1], s[2] * s[3])
        };
        let xd = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * sp;
                for p in off..off + sp {
                    let v = (xd[p] - mean[ch]) * inv_std[ch];
                    xhat[p] = v;
                    out[p] = g[ch] * v + b[ch];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let rule = BatchNorm { xhat, inv_std, batch_stats, n, c, spatial: sp };
        self.push(Tensor::from_parts(shape, out), &[x, gamma, beta], rule)
    }

    /// Training-mode batch normalisation over the N, H and W axes.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (n, c, sp) = check_inputs(self.shape(x), self.shape(gamma), self.shape(beta))?;
        let count = n * sp;
        if count < 2 {
            return Err(Error::contract(format!(
                "training-mode batch norm needs at least 2 values per channel, got {count}"
            )));
        }
        let xd = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let vals = || (0..n).flat_map(move |s| xd[(s * c + ch) * sp..][..sp].iter());
            let mu = vals().sum::<f64>() / count as f64;
            mean[ch] = mu;
            var[ch] = vals().map(|v| (v - mu) * (v - mu)).sum::<f64>() / count as f64;
        }
        let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let y = self.batch_norm_apply(x, gamma, beta, &mean, inv_std, true);
        Ok((y, BatchStats { mean, var, count }))
    }

    /// Inference-mode batch normalisation with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (_, c, _) = check_inputs(self.shape(x), self.shape(gamma), self.shape(beta))?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::dim("running statistics do not match channel count"));
        }
        let inv_std = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        Ok(self.batch_norm_apply(x, gamma, beta, running_mean, inv_std, false))
    }
}
