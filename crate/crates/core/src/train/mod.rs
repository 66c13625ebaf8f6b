//! Soft Dice training with Adam, step learning-rate decay, augmentation and
//! best-on-validation model selection.

mod adam;
mod augment;
mod loss;

pub use adam::{adam_update, AdamConfig, AdamState};
pub use augment::{augment, flip, rotate, AugmentConfig};
pub use loss::{soft_dice_loss, DICE_EPS};

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LabelMap, Sample};
use crate::error::{Error, Result};
use crate::exec;
use crate::metrics::{dice, BinaryMask};
use crate::model::{predict_mask, CANetModel};
use crate::nn::{Graph, Mode, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// The learning rate is multiplied by `lr_decay` every `lr_decay_every` epochs.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-4,
            weight_decay: 1e-8,
            batch_size: 4,
            epochs: 50,
            lr_decay: 0.5,
            lr_decay_every: 256,
            seed: 0,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.lr0 > 0.0 && self.batch_size > 0 && self.epochs > 0 && self.lr_decay_every > 0;
        if !positive || self.weight_decay < 0.0 || !(self.lr_decay > 0.0) {
            return Err(Error::config(
                "lr0, batch_size, epochs, lr_decay and lr_decay_every must be positive; weight_decay non-negative",
            ));
        }
        self.augment.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// `lr0 · decay^⌊epoch / every⌋`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.lr_decay.powi((epoch / cfg.lr_decay_every) as i32)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_dice: f64,
    pub seconds: f64,
}

pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_dice: f64,
    /// Parameters and buffers from the best validation epoch.
    pub best: ParamStore,
}

/// Stacks C×H×W images into an N×C×H×W batch.
pub fn stack(images: &[&Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::contract("empty batch"))?.shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * images[0].len());
    for t in images {
        if t.shape() != first.as_slice() {
            return Err(Error::dim(format!("batch images differ in shape: {first:?} vs {:?}", t.shape())));
        }
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![images.len()];
    shape.extend(first);
    Tensor::new(shape, data)
}

/// Stacks label maps into N×K×H×W one-hot targets.
pub fn stack_one_hot(masks: &[&LabelMap], classes: usize) -> Result<Tensor> {
    let parts: Vec<Tensor> = masks.iter().map(|m| m.one_hot(classes)).collect();
    stack(&parts.iter().collect::<Vec<_>>())
}

/// One optimisation step on a batch; returns the loss.
pub fn train_step(model: &mut CANetModel, adam: &mut AdamState, batch: &[(Tensor, LabelMap)], lr: f64, cfg: &AdamConfig) -> Result<f64> {
    let classes = model.config.num_classes;
    if let Some(bad) = batch.iter().find(|(_, m)| m.max_label() as usize >= classes) {
        return Err(Error::config(format!("label {} exceeds the model's {classes} classes", bad.1.max_label())));
    }
    let x = stack(&batch.iter().map(|(t, _)| t).collect::<Vec<_>>())?;
    let y = stack_one_hot(&batch.iter().map(|(_, m)| m).collect::<Vec<_>>(), classes)?;
    let (loss, updates) = {
        let mut g = Graph::new(&model.store, Mode::Train);
        let xv = g.input(x);
        let yv = g.input(y);
        let out = model.forward(&mut g, xv)?;
        let probs = g.tape.softmax(out.logits, 1)?;
        let l = soft_dice_loss(&mut g.tape, probs, yv)?;
        g.backward(l)?;
        (g.value(l).data()[0], g.into_updates())
    };
    model.store.apply(updates);
    adam.step(&mut model.store, lr, cfg)?;
    Ok(loss)
}

/// Eval-mode label maps for every sample, `batch` images per forward pass.
pub fn predict(model: &CANetModel, samples: &[Sample], batch: usize) -> Result<Vec<LabelMap>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let x = stack(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>())?;
        out.extend(predict_mask(&model.infer(&x)?)?);
    }
    Ok(out)
}

/// Mean over images of the mean foreground-class Dice.
pub fn foreground_dice(preds: &[LabelMap], truth: &[LabelMap], classes: usize) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::contract("no predictions to score"));
    }
    let mut total = 0.0;
    for (p, t) in preds.iter().zip(truth) {
        let mut per = 0.0;
        for c in 1..classes as u8 {
            per += dice(&BinaryMask::from_labels(p, c), &BinaryMask::from_labels(t, c))?;
        }
        total += per / (classes - 1) as f64;
    }
    Ok(total / preds.len() as f64)
}

/// Trains `model` in place, calling `on_epoch` after each epoch. The model
/// ends with its final parameters; the best validation state is returned.
pub fn train(
    model: &mut CANetModel,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::config("training and validation splits must be nonempty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(&model.store);
    let adam_cfg = cfg.adam();
    let classes = model.config.num_classes;
    let val_truth: Vec<LabelMap> = val_set.samples.iter().map(|s| s.mask.clone()).collect();

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best = (0, f64::NEG_INFINITY, model.store.clone());
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = lr_at(epoch, cfg);
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for idx in order.chunks(cfg.batch_size) {
            // One seed per sample keeps augmentation reproducible under any
            // worker count.
            let seeds: Vec<u64> = idx.iter().map(|_| rng.gen()).collect();
            let batch = exec::map_indexed(idx.len(), |k| {
                let s = &train_set.samples[idx[k]];
                augment(&s.image, &s.mask, &cfg.augment, &mut ChaCha8Rng::seed_from_u64(seeds[k]))
            });
            let batch = batch.into_iter().collect::<Result<Vec<_>>>()?;
            losses.push(train_step(model, &mut adam, &batch, lr, &adam_cfg)?);
        }
        let train_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::contract(format!("training loss became {train_loss} at epoch {epoch}")));
        }
        let preds = predict(model, &val_set.samples, cfg.batch_size)?;
        let val_dice = foreground_dice(&preds, &val_truth, classes)?;
        let entry = EpochLog {
            epoch,
            lr,
            train_loss,
            val_dice,
            seconds: start.elapsed().as_secs_f64(),
        };
        if val_dice > best.1 {
            best = (epoch, val_dice, model.store.clone());
        }
        on_epoch(&entry)?;
        log.push(entry);
    }
    Ok(TrainOutcome {
        log,
        best_epoch: best.0,
        best_val_dice: best.1,
        best: best.2,
    })
}

#[cfg(test)]
mod tests;
