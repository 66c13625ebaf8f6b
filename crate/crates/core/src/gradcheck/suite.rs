//! Fixed-shape finite-difference suite over every op, layer and block.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check, random_projection, GradCheckConfig, GradCheckReport};
use crate::attention::{ChannelAttention, DualPathGate, NonLocalBlock, ScaleAttention};
use crate::autodiff::Var;
use crate::error::Result;
use crate::model::{CANetModel, ModelConfig};
use crate::nn::{BatchNorm2d, Conv2d, Linear, Mode, ParamKind, ParamStore};
use crate::tensor::Tensor;

/// Pass threshold for layers and blocks.
pub const SUITE_TOLERANCE: f64 = 1e-4;
/// Pass threshold for smooth elementwise and linear-algebra ops.
pub const SMOOTH_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub tolerance: f64,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.passes(self.tolerance)
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Moves every trainable tensor off its initial value so zero biases and unit
/// BN scales do not hide errors.
fn scramble(store: &mut ParamStore, seed: u64) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.trainable_ids().collect();
    for id in ids {
        let gamma = store.entry(id).name.ends_with(".gamma");
        for v in store.get_mut(id).data_mut() {
            *v = if gamma { r.gen_range(0.5..1.5) } else { *v + r.gen_range(-0.3..0.3) };
        }
    }
}

fn smooth() -> GradCheckConfig {
    GradCheckConfig {
        step: 1e-4,
        ..GradCheckConfig::default()
    }
}

fn sampled(k: usize) -> GradCheckConfig {
    GradCheckConfig {
        coords_per_tensor: Some(k),
        ..GradCheckConfig::default()
    }
}

type Case = fn() -> Result<(GradCheckReport, f64)>;

fn ops_binary() -> Result<(GradCheckReport, f64)> {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let mut s = ParamStore::new();
    let a = s.add("a", random(&mut r, &[2, 3, 4, 4], -1.0, 1.0), ParamKind::Trainable);
    let b = s.add("b", random(&mut r, &[1, 3, 1, 1], 0.5, 1.5), ParamKind::Trainable);
    let c = s.add("c", random(&mut r, &[2, 1, 4, 4], 0.5, 1.5), ParamKind::Trainable);
    let rep = check(&mut s, &smooth(), |g| {
        let (a, b, c) = (g.param(a), g.param(b), g.param(c));
        let t = &mut g.tape;
        let x = t.add(a, b)?;
        let x = t.mul(x, c)?;
        let x = t.sub(x, b)?;
        let x = t.div(x, c)?;
        let x = t.affine(x, 1.5, -0.25);
        random_projection(g, x, 1)
    })?;
    Ok((rep, SMOOTH_TOLERANCE))
}

fn ops_sigmoid() -> Result<(GradCheckReport, f64)> {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let mut s = ParamStore::new();
    let a = s.add("a", random(&mut r, &[2, 3, 4, 4], -3.0, 3.0), ParamKind::Trainable);
    let rep = check(&mut s, &smooth(), |g| {
        let x = g.param(a);
        let y = g.tape.sigmoid(x);
        random_projection(g, y, 2)
    })?;
    Ok((rep, SMOOTH_TOLERANCE))
}

fn ops_softmax() -> Result<(GradCheckReport, f64)> {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let mut s = ParamStore::new();
    let a = s.add("a", random(&mut r, &[2, 3, 4, 4], -2.0, 2.0), ParamKind::Trainable);
    let m = s.add("m", random(&mut r, &[5, 7], -2.0, 2.0), ParamKind::Trainable);
    let rep = check(&mut s, &smooth(), |g| {
        let (x, m) = (g.param(a), g.param(m));
        let y = g.tape.softmax(x, 1)?;
        let z = g.tape.softmax_rows(m)?;
        let p = random_projection(g, y, 3)?;
        let q = random_projection(g, z, 4)?;
        g.tape.add(p, q)
    })?;
    Ok((rep, SMOOTH_TOLERANCE))
}

fn ops_matmul() -> Result<(GradCheckReport, f64)> {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let mut s = ParamStore::new();
    let a = s.add("a", random(&mut r, &[2, 4, 5], -1.0, 1.0), ParamKind::Trainable);
    let b = s.add("b", random(&mut r, &[2, 3, 5], -1.0, 1.0), ParamKind::Trainable);
    let rep = check(&mut s, &smooth(), |g| {
        let (a, b) = (g.param(a), g.param(b));
        let bt = g.tape.transpose(b)?;
        let y = g.tape.matmul(a, bt)?;
        let y = g.tape.reshape(y, &[2, 12])?;
        random_projection(g, y, 5)
    })?;
    Ok((rep, SMOOTH_TOLERANCE))
}

fn ops_reductions() -> Result<(GradCheckReport, f64)> {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let mut s = ParamStore::new();
    let a = s.add("a", random(&mut r, &[2, 3, 4, 4], -1.0, 1.0), ParamKind::Trainable);
    let rep = check(&mut s, &smooth(), |g| {
        let x = g.param(a);
        let y = g.tape.sum_to(x, &[1, 3, 1, 4])?;
        let p = random_projection(g, y, 6)?;
        let m = g.tape.mean_all(x);
        let avg = g.tape.global_avg_pool(x)?;
        let q = random_projection(g, avg, 7)?;
        let t = g.tape.add(p, q)?;
        g.tape.add(t, m)
    })?;
    Ok((rep, SMOOTH_TOLERANCE))
}

fn ops_resize_concat() -> Result<(GradCheckReport, f64)> {
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let mut s = ParamStore::new();
    let a = s.add("a", random(&mut r, &[2, 2, 3, 3], -1.0, 1.0), ParamKind::Trainable);
    let b = s.add("b", random(&mut r, &[2, 3, 6, 6], -1.0, 1.0), ParamKind::Trainable);
    let rep = check(&mut s, &smooth(), |g| {
        let (a, b) = (g.param(a), g.param(b));
        let up = g.tape.bilinear_resize(a, 6, 6)?;
        let down = g.tape.bilinear_resize(b, 4, 5)?;
        let cat = g.tape.concat_channels(&[up, b])?;
        let p = random_projection(g, cat, 8)?;
        let q = random_projection(g, down, 9)?;
        g.tape.add(p, q)
    })?;
    Ok((rep, SMOOTH_TOLERANCE))
}

fn ops_relu_pool() -> Result<(GradCheckReport, f64)> {
    let mut r = ChaCha8Rng::seed_from_u64(7);
    let mut s = ParamStore::new();
    let a = s.add("a", random(&mut r, &[2, 3, 6, 6], -1.0, 1.0), ParamKind::Trainable);
    let rep = check(&mut s, &GradCheckConfig::default(), |g| {
        let x = g.param(a);
        let y = g.tape.relu(x);
        let p = g.tape.max_pool2x2(x)?;
        let m = g.tape.global_max_pool(x)?;
        let a = random_projection(g, y, 10)?;
        let b = random_projection(g, p, 11)?;
        let c = random_projection(g, m, 12)?;
        let t = g.tape.add(a, b)?;
        g.tape.add(t, c)
    })?;
    Ok((rep, SUITE_TOLERANCE))
}

fn layer_conv() -> Result<(GradCheckReport, f64)> {
    let mut r = ChaCha8Rng::seed_from_u64(8);
    let mut s = ParamStore::new();
    let c3 = Conv2d::k3(&mut s, "c3", 3, 4, true, &mut r);
    let c1 = Conv2d::k1(&mut s, "c1", 4, 2, true, &mut r);
    scramble(&mut s, 9);
    let x = s.add("input", random(&mut r, &[2, 3, 6, 6], -1.0, 1.0), ParamKind::Trainable);
    let rep = check(&mut s, &GradCheckConfig::default(), |g| {
        let xv = g.param(x);
        let y = c3.forward(g, xv)?;
        let y = c1.forward(g, y)?;
        random_projection(g, y, 13)
    })?;
    Ok((rep, SUITE_TOLERANCE))
}

fn layer_batchnorm(mode: Mode, seed: u64) -> Result<(GradCheckReport, f64)> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let bn = BatchNorm2d::new(&mut s, "bn", 3);
    scramble(&mut s, seed + 1);
    s.get_mut(bn.running_mean).data_mut().copy_from_slice(&[0.2, -0.1, 0.4]);
    s.get_mut(bn.running_var).data_mut().copy_from_slice(&[0.5, 1.5, 2.0]);
    let x = s.add("input", random(&mut r, &[2, 3, 4, 4], -1.0, 1.0), ParamKind::Trainable);
    let cfg = GradCheckConfig { mode, ..GradCheckConfig::default() };
    let rep = check(&mut s, &cfg, |g| {
        let xv = g.param(x);
        let y = bn.forward(g, xv)?;
        random_projection(g, y, 14)
    })?;
    Ok((rep, SUITE_TOLERANCE))
}

fn layer_linear() -> Result<(GradCheckReport, f64)> {
    let mut r = ChaCha8Rng::seed_from_u64(12);
    let mut s = ParamStore::new();
    let lin = Linear::new(&mut s, "fc", 5, 3, &mut r);
    scramble(&mut s, 13);
    let x = s.add("input", random(&mut r, &[4, 5], -1.0, 1.0), ParamKind::Trainable);
    let rep = check(&mut s, &GradCheckConfig::default(), |g| {
        let xv = g.param(x);
        let y = lin.forward(g, xv)?;
        random_projection(g, y, 15)
    })?;
    Ok((rep, SUITE_TOLERANCE))
}

fn block_nonlocal() -> Result<(GradCheckReport, f64)> {
    let mut r = ChaCha8Rng::seed_from_u64(14);
    let mut s = ParamStore::new();
    let block = NonLocalBlock::new(&mut s, "nl", 8, 4, &mut r);
    scramble(&mut s, 15);
    let x = s.add("input", random(&mut r, &[2, 8, 3, 3], -1.0, 1.0), ParamKind::Trainable);
    let rep = check(&mut s, &sampled(24), |g| {
        let xv = g.param(x);
        let out = block.forward(g, xv)?;
        let a = random_projection(g, out.y, 16)?;
        let b = random_projection(g, out.alpha, 17)?;
        g.tape.add(a, b)
    })?;
    Ok((rep, SUITE_TOLERANCE))
}

fn block_gate() -> Result<(GradCheckReport, f64)> {
    let mut r = ChaCha8Rng::seed_from_u64(16);
    let mut s = ParamStore::new();
    let gate = DualPathGate::new(&mut s, "ag", 8, 8, 4, 2, &mut r);
    scramble(&mut s, 17);
    let xl = s.add("x_l", random(&mut r, &[1, 8, 6, 6], -1.0, 1.0), ParamKind::Trainable);
    let xh = s.add("x_h", random(&mut r, &[1, 8, 6, 6], -1.0, 1.0), ParamKind::Trainable);
    let rep = check(&mut s, &sampled(24), |g| {
        let (a, b) = (g.param(xl), g.param(xh));
        let out = gate.forward(g, a, b)?;
        random_projection(g, out.y, 18)
    })?;
    Ok((rep, SUITE_TOLERANCE))
}

fn block_channel() -> Result<(GradCheckReport, f64)> {
    let mut r = ChaCha8Rng::seed_from_u64(18);
    let mut s = ParamStore::new();
    let ca = ChannelAttention::new(&mut s, "ca", 6, &mut r)?;
    scramble(&mut s, 19);
    let x = s.add("input", random(&mut r, &[2, 6, 4, 4], -1.0, 1.0), ParamKind::Trainable);
    let rep = check(&mut s, &sampled(24), |g| {
        let xv = g.param(x);
        let out = ca.forward(g, xv)?;
        let a = random_projection(g, out.y, 19)?;
        let b = random_projection(g, out.beta, 20)?;
        g.tape.add(a, b)
    })?;
    Ok((rep, SUITE_TOLERANCE))
}

fn block_scale() -> Result<(GradCheckReport, f64)> {
    let mut r = ChaCha8Rng::seed_from_u64(20);
    let mut s = ParamStore::new();
    let la = ScaleAttention::new(&mut s, "la", &[2, 3, 4, 5], false, &mut r);
    scramble(&mut s, 21);
    let inputs: Vec<_> = [(2, 8), (3, 4), (4, 2), (5, 1)]
        .into_iter()
        .enumerate()
        .map(|(i, (c, e))| s.add(format!("f{i}"), random(&mut r, &[1, c, e, e], -1.0, 1.0), ParamKind::Trainable))
        .collect();
    let rep = check(&mut s, &sampled(24), |g| {
        let fs: Vec<Var> = inputs.iter().map(|&id| g.param(id)).collect();
        let out = la.forward(g, &fs, 8, 8)?;
        let a = random_projection(g, out.y, 21)?;
        let b = random_projection(g, out.gamma, 22)?;
        let c = random_projection(g, out.pixelwise, 23)?;
        let t = g.tape.add(a, b)?;
        g.tape.add(t, c)
    })?;
    Ok((rep, SUITE_TOLERANCE))
}

/// The whole network in inference mode. With a single 32×32 image the
/// train-mode statistics at the 2×2 bottleneck make the loss so sharply curved
/// that no step size separates truncation from rounding error; batch-statistic
/// gradients are covered by the layer and block entries instead.
fn full_model() -> Result<(GradCheckReport, f64)> {
    let cfg = ModelConfig {
        in_channels: 1,
        ..ModelConfig::default()
    };
    let mut model = CANetModel::build(cfg, 22)?;
    let mut s = std::mem::take(&mut model.store);
    let mut r = ChaCha8Rng::seed_from_u64(24);
    let x = s.add("input", random(&mut r, &[1, 1, 32, 32], -1.0, 1.0), ParamKind::Trainable);
    let cfg = GradCheckConfig {
        step: 1e-5,
        mode: Mode::Eval,
        kink_tolerance: Some(1e-3),
        ..sampled(2)
    };
    let rep = check(&mut s, &cfg, |g| {
        let xv = g.param(x);
        let out = model.forward(g, xv)?;
        random_projection(g, out.logits, 25)
    })?;
    Ok((rep, SUITE_TOLERANCE))
}

const CASES: &[(&str, Case)] = &[
    ("add_sub_mul_div_affine", ops_binary),
    ("sigmoid", ops_sigmoid),
    ("softmax", ops_softmax),
    ("matmul_transpose_reshape", ops_matmul),
    ("sum_mean_avg_pool", ops_reductions),
    ("bilinear_resize_concat", ops_resize_concat),
    ("relu_max_pool", ops_relu_pool),
    ("conv2d", layer_conv),
    ("batch_norm_train", || layer_batchnorm(Mode::Train, 10)),
    ("batch_norm_eval", || layer_batchnorm(Mode::Eval, 11)),
    ("linear", layer_linear),
    ("non_local_block", block_nonlocal),
    ("dual_path_gate", block_gate),
    ("channel_attention", block_channel),
    ("scale_attention", block_scale),
    ("canet_1x1x32x32", full_model),
];

/// Names of all suite entries in execution order.
pub fn suite_names() -> Vec<&'static str> {
    CASES.iter().map(|(n, _)| *n).collect()
}

/// Runs every entry whose name contains `filter`, reporting each as it ends.
pub fn run_suite(filter: Option<&str>, mut on_entry: impl FnMut(&SuiteEntry)) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    for (name, case) in CASES {
        if filter.is_some_and(|f| !name.contains(f)) {
            continue;
        }
        let (report, tolerance) = case()?;
        let entry = SuiteEntry { name, tolerance, report };
        on_entry(&entry);
        out.push(entry);
    }
    Ok(out)
}
