//! Parameter storage, forward-pass context and the learnable layers.

pub mod checkpoint;
pub mod init;
mod layers;

pub use layers::{BatchNorm2d, ConvBlock, ConvBnRelu, Conv2d, Linear, BN_EPS, BN_MOMENTUM};

use crate::autodiff::{BatchStats, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Learnable; receives gradients and optimiser updates.
    Trainable,
    /// Non-learnable state such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub kind: ParamKind,
}

/// Flat, ordered, named collection of every tensor a model owns.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        tensor.set_requires_grad(kind == ParamKind::Trainable);
        self.entries.push(ParamEntry { name, tensor, kind });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.entries[id.0].kind == ParamKind::Trainable)
    }

    /// Number of learnable scalars (buffers excluded).
    pub fn parameter_count(&self) -> usize {
        self.trainable_ids().map(|id| self.get(id).len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.tensor.zero_grad();
        }
    }

    /// Overwrites every trainable tensor whose name starts with `prefix`.
    pub fn fill_prefix(&mut self, prefix: &str, value: f64) {
        for e in &mut self.entries {
            if e.kind == ParamKind::Trainable && e.name.starts_with(prefix) {
                e.tensor.data_mut().iter_mut().for_each(|v| *v = value);
            }
        }
    }

    /// Folds the results of a finished forward/backward pass into the store.
    pub fn apply(&mut self, updates: PassUpdates) {
        for (id, g) in updates.grads {
            self.entries[id.0].tensor.accumulate_grad(&g);
        }
        for s in updates.stats {
            let n = s.stats.count as f64;
            let unbiased = n / (n - 1.0);
            let m = s.momentum;
            let mean = self.get_mut(s.running_mean).data_mut();
            for (r, v) in mean.iter_mut().zip(&s.stats.mean) {
                *r = (1.0 - m) * *r + m * v;
            }
            let var = self.get_mut(s.running_var).data_mut();
            for (r, v) in var.iter_mut().zip(&s.stats.var) {
                *r = (1.0 - m) * *r + m * v * unbiased;
            }
        }
    }

    /// Copies tensors from `other` by name; every entry here must be present there.
    pub fn load_values(&mut self, other: &[(String, Tensor)]) -> Result<()> {
        for e in &mut self.entries {
            let (_, t) = other
                .iter()
                .find(|(n, _)| *n == e.name)
                .ok_or_else(|| Error::config(format!("checkpoint is missing tensor {}", e.name)))?;
            if t.shape() != e.tensor.shape() {
                return Err(Error::config(format!(
                    "checkpoint tensor {} has shape {:?}, model expects {:?}",
                    e.name,
                    t.shape(),
                    e.tensor.shape()
                )));
            }
            e.tensor.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }
}

/// Anything that owns learnable tensors in a [`ParamStore`].
pub trait Module {
    /// Trainable parameters, in registration order.
    fn params(&self) -> Vec<ParamId>;

    fn parameter_count(&self, store: &ParamStore) -> usize {
        self.params().iter().map(|&id| store.get(id).len()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
struct StatUpdate {
    running_mean: ParamId,
    running_var: ParamId,
    momentum: f64,
    stats: BatchStats,
}

/// Gradients and running-statistic updates produced by one pass.
#[derive(Debug, Default)]
pub struct PassUpdates {
    grads: Vec<(ParamId, Vec<f64>)>,
    stats: Vec<StatUpdate>,
}

/// A forward pass over a read-only [`ParamStore`].
///
/// Parameters are bound lazily onto the tape the first time a layer asks for
/// them. Batch-norm statistics gathered in training mode are queued and only
/// written back by [`ParamStore::apply`], so the store can be shared across
/// concurrent passes.
pub struct Graph<'p> {
    pub tape: Tape,
    params: &'p ParamStore,
    mode: Mode,
    track_grads: bool,
    bound: Vec<Option<Var>>,
    stats: Vec<StatUpdate>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore, mode: Mode) -> Self {
        Graph {
            tape: Tape::new(),
            params,
            mode,
            track_grads: mode == Mode::Train,
            bound: vec![None; params.len()],
            stats: Vec::new(),
        }
    }

    /// Overrides whether trainable parameters are recorded as gradient leaves.
    pub fn with_param_grads(mut self, on: bool) -> Self {
        self.track_grads = on;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'p ParamStore {
        self.params
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let e = self.params.entry(id);
        let mut t = e.tensor.detach();
        if self.track_grads && e.kind == ParamKind::Trainable {
            t.set_requires_grad(true);
        }
        let v = self.tape.leaf(t);
        self.bound[id.0] = Some(v);
        v
    }

    /// Records an input that does not need a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    pub(crate) fn queue_stats(&mut self, running_mean: ParamId, running_var: ParamId, momentum: f64, stats: BatchStats) {
        self.stats.push(StatUpdate {
            running_mean,
            running_var,
            momentum,
            stats,
        });
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.tape.backward(loss)
    }

    /// Gradient of a bound parameter after [`Graph::backward`].
    pub fn param_grad(&self, id: ParamId) -> Option<&[f64]> {
        self.bound[id.0].and_then(|v| self.tape.grad(v))
    }

    pub fn into_updates(self) -> PassUpdates {
        let grads = self
            .bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                self.tape.grad(v).map(|g| (ParamId(i), g.to_vec()))
            })
            .collect();
        PassUpdates {
            grads,
            stats: self.stats,
        }
    }
}
