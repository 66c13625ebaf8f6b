//! The comprehensive-attention network: a five-level U-Net with optional
//! spatial, channel and scale attention.

mod config;

pub use config::{CaPlacement, ModelConfig, SaVariant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionRecord, ChannelAttention, DualPathGate, NonLocalBlock, ScaleAttention};
use crate::autodiff::Var;
use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvBlock, Graph, Mode, Module, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Encoder depth; extents must be divisible by 2^(LEVELS-1).
pub const LEVELS: usize = 5;
pub const DOWNSAMPLE: usize = 1 << (LEVELS - 1);

#[derive(Clone, Debug)]
struct EncoderStage {
    block: ConvBlock,
    ca: Option<ChannelAttention>,
}

#[derive(Clone, Debug)]
struct DecoderStage {
    level: usize,
    gate: Option<(String, DualPathGate)>,
    ca: Option<(String, ChannelAttention)>,
    block: ConvBlock,
}

#[derive(Clone, Debug)]
pub struct CANetModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    encoder: Vec<EncoderStage>,
    nonlocal: Option<NonLocalBlock>,
    decoder: Vec<DecoderStage>,
    scale: Option<ScaleAttention>,
    head: Conv2d,
}

pub struct ModelOutput {
    /// N×classes×H×W, before softmax.
    pub logits: Var,
    pub attention: AttentionRecord,
}

impl CANetModel {
    /// Builds the network with weights drawn from `seed`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let w = |l: usize| config.width(l);

        let mut encoder = Vec::with_capacity(LEVELS);
        let mut prev = config.in_channels;
        for l in 1..=LEVELS {
            let block = ConvBlock::new(&mut store, &format!("enc{l}"), &[prev, w(l), w(l)], &mut rng);
            let ca = if config.enable_ca && config.ca_placement.encoder() && l < LEVELS {
                Some(ChannelAttention::new(&mut store, &format!("ca_enc{l}"), w(l), &mut rng)?)
            } else {
                None
            };
            encoder.push(EncoderStage { block, ca });
            prev = w(l);
        }

        let nonlocal = config
            .nonlocal()
            .then(|| NonLocalBlock::new(&mut store, "sa1", w(LEVELS), w(LEVELS) / 4, &mut rng));

        let mut decoder = Vec::with_capacity(LEVELS - 1);
        for l in (1..LEVELS).rev() {
            let up = w(l + 1);
            let gate = if config.gated(l) {
                let name = match config.sa_variant {
                    SaVariant::Joint => format!("sa{}", LEVELS + 1 - l),
                    _ => format!("sa{}", LEVELS - l),
                };
                let gate = DualPathGate::new(&mut store, &name, w(l), up, w(l) / 2, config.gate_pathways(), &mut rng);
                Some((name, gate))
            } else {
                None
            };
            let skip = gate.as_ref().map_or(w(l), |(_, g)| g.out_channels);
            let cat = skip + up;
            let ca = if config.enable_ca && config.ca_placement.decoder() {
                let name = format!("ca{}", LEVELS - l);
                Some((name.clone(), ChannelAttention::new(&mut store, &name, cat, &mut rng)?))
            } else {
                None
            };
            // Stages that recalibrate channels get a widened middle layer.
            let widths: Vec<usize> = if ca.is_some() {
                vec![cat, w(l), 2 * w(l), w(l)]
            } else {
                vec![cat, w(l), w(l)]
            };
            let block = ConvBlock::new(&mut store, &format!("dec{l}"), &widths, &mut rng);
            decoder.push(DecoderStage { level: l, gate, ca, block });
        }

        let scale = config.enable_la.then(|| {
            let chans: Vec<usize> = (1..=config.la_scales).map(w).collect();
            ScaleAttention::new(&mut store, "la", &chans, config.single_gamma_star, &mut rng)
        });
        let head_in = scale.as_ref().map_or(w(1), ScaleAttention::width);
        let head = Conv2d::k1(&mut store, "head", head_in, config.num_classes, true, &mut rng);

        Ok(CANetModel {
            config,
            store,
            encoder,
            nonlocal,
            decoder,
            scale,
            head,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.store.parameter_count()
    }

    /// Learnable scalars per named block, in network order. Sums to the total.
    pub fn module_counts(&self) -> Vec<(String, usize)> {
        let s = &self.store;
        let mut out = Vec::new();
        for (i, e) in self.encoder.iter().enumerate() {
            out.push((format!("enc{}", i + 1), e.block.parameter_count(s)));
            if let Some(ca) = &e.ca {
                out.push((format!("ca_enc{}", i + 1), ca.parameter_count(s)));
            }
        }
        if let Some(nl) = &self.nonlocal {
            out.push(("sa1".into(), nl.parameter_count(s)));
        }
        for d in &self.decoder {
            if let Some((name, g)) = &d.gate {
                out.push((name.clone(), g.parameter_count(s)));
            }
            if let Some((name, ca)) = &d.ca {
                out.push((name.clone(), ca.parameter_count(s)));
            }
            out.push((format!("dec{}", d.level), d.block.parameter_count(s)));
        }
        if let Some(la) = &self.scale {
            out.push(("la".into(), la.parameter_count(s)));
        }
        out.push(("head".into(), self.head.parameter_count(s)));
        out
    }

    /// Checks an input shape without running the network.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let ok = shape.len() == 4
            && shape[1] == self.config.in_channels
            && shape[0] > 0
            && shape[2] > 0
            && shape[3] > 0
            && shape[2] % DOWNSAMPLE == 0
            && shape[3] % DOWNSAMPLE == 0;
        if ok {
            Ok(())
        } else {
            Err(Error::dim(format!(
                "model expects N×{}×H×W with H and W divisible by {DOWNSAMPLE}, got {shape:?}",
                self.config.in_channels
            )))
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<ModelOutput> {
        self.check_input(g.tape.shape(x))?;
        let mut record = AttentionRecord::default();

        let mut skips = Vec::with_capacity(LEVELS - 1);
        let mut h = x;
        for (i, stage) in self.encoder.iter().enumerate() {
            if i > 0 {
                h = g.tape.max_pool2x2(h)?;
            }
            h = stage.block.forward(g, h)?;
            if let Some(ca) = &stage.ca {
                let o = ca.forward(g, h)?;
                record.push_channel(&format!("ca_enc{}", i + 1), &o);
                h = o.y;
            }
            if i + 1 < LEVELS {
                skips.push(h);
            }
        }
        if let Some(nl) = &self.nonlocal {
            let s = g.tape.shape(h).to_vec();
            let o = nl.forward(g, h)?;
            record.push_nonlocal("sa1", &o, s[2], s[3]);
            h = o.y;
        }

        let mut features = vec![h];
        for d in &self.decoder {
            let skip = skips[d.level - 1];
            let s = g.tape.shape(skip).to_vec();
            let up = g.tape.bilinear_resize(h, s[2], s[3])?;
            let skip = match &d.gate {
                Some((name, gate)) => {
                    let o = gate.forward(g, skip, up)?;
                    record.push_gate(name, &o);
                    o.y
                }
                None => skip,
            };
            let mut cat = g.tape.concat_channels(&[skip, up])?;
            if let Some((name, ca)) = &d.ca {
                let o = ca.forward(g, cat)?;
                record.push_channel(name, &o);
                cat = o.y;
            }
            h = d.block.forward(g, cat)?;
            features.push(h);
        }

        let fused = match &self.scale {
            Some(la) => {
                // `features` runs bottleneck, d4, ..., d1; scale attention wants finest first.
                let fine_first: Vec<Var> = features.iter().rev().take(la.scales).copied().collect();
                let s = g.tape.shape(x).to_vec();
                let o = la.forward(g, &fine_first, s[2], s[3])?;
                record.push_scale("la", &o);
                o.y
            }
            None => h,
        };
        let logits = self.head.forward(g, fused)?;
        Ok(ModelOutput { logits, attention: record })
    }

    /// Eval-mode logits for a batch, without gradient tracking.
    pub fn infer(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(&self.store, Mode::Eval);
        let x = g.input(images.clone());
        let out = self.forward(&mut g, x)?;
        Ok(g.value(out.logits).clone())
    }
}

impl Module for CANetModel {
    fn params(&self) -> Vec<ParamId> {
        self.store.trainable_ids().collect()
    }
}

/// Per-pixel argmax over the class axis; ties go to the lower class.
pub fn predict_mask(logits: &Tensor) -> Result<Vec<LabelMap>> {
    let s = logits.shape();
    if s.len() != 4 {
        return Err(Error::dim(format!("logits must be N×K×H×W, got {s:?}")));
    }
    let (n, k, h, w) = (s[0], s[1], s[2], s[3]);
    let hw = h * w;
    let d = logits.data();
    Ok((0..n)
        .map(|b| {
            let labels = (0..hw)
                .map(|p| {
                    let mut best = 0;
                    for c in 1..k {
                        if d[(b * k + c) * hw + p] > d[(b * k + best) * hw + p] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect();
            LabelMap::new(h, w, labels)
        })
        .collect())
}
