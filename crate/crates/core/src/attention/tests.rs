use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{self, random_projection, GradCheckConfig};
use crate::nn::{Graph, Mode, Module, ParamKind, ParamStore};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Gives every trainable tensor generic nonzero values, so biases and
/// batch-norm affine terms are exercised by gradient checks.
fn scramble(store: &mut ParamStore, seed: u64) {
    let mut r = rng(seed);
    let ids: Vec<_> = store.trainable_ids().collect();
    for id in ids {
        let gamma = store.entry(id).name.ends_with(".gamma");
        for v in store.get_mut(id).data_mut() {
            *v = if gamma { r.gen_range(0.5..1.5) } else { *v + r.gen_range(-0.3..0.3) };
        }
    }
}

fn check_cfg() -> GradCheckConfig {
    GradCheckConfig {
        coords_per_tensor: Some(24),
        ..GradCheckConfig::default()
    }
}

#[test]
fn nonlocal_preserves_shape_and_rows_are_stochastic() {
    let mut store = ParamStore::new();
    let block = NonLocalBlock::new(&mut store, "nl", 256, 64, &mut rng(1));
    let mut g = Graph::new(&store, Mode::Train);
    let x = g.input(random(&mut rng(2), &[1, 256, 4, 4]));
    let out = block.forward(&mut g, x).unwrap();
    assert_eq!(g.value(out.y).shape(), &[1, 256, 4, 4]);
    let alpha = g.value(out.alpha);
    assert_eq!(alpha.shape(), &[1, 16, 16]);
    for row in alpha.data().chunks(16) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn nonlocal_zero_input_and_zero_parameters() {
    let mut store = ParamStore::new();
    let block = NonLocalBlock::new(&mut store, "nl", 16, 4, &mut rng(3));
    store.fill_prefix("nl.", 0.0);
    let mut g = Graph::new(&store, Mode::Train);
    let x = g.input(Tensor::zeros(&[1, 16, 3, 3]));
    let out = block.forward(&mut g, x).unwrap();
    assert!(g.value(out.y).data().iter().all(|&v| v == 0.0));
    assert!(g.value(out.alpha).data().iter().all(|&v| (v - 1.0 / 9.0).abs() < 1e-15));

    // With zeroed parameters the block is the identity on any input.
    let xt = random(&mut rng(4), &[2, 16, 3, 3]);
    let mut g = Graph::new(&store, Mode::Train);
    let x = g.input(xt.clone());
    let out = block.forward(&mut g, x).unwrap();
    assert_eq!(g.value(out.y).data(), xt.data());
}

#[test]
fn nonlocal_rejects_bad_inputs() {
    let mut store = ParamStore::new();
    let block = NonLocalBlock::new(&mut store, "nl", 8, 4, &mut rng(5));
    let mut g = Graph::new(&store, Mode::Eval);
    let x = g.input(Tensor::zeros(&[1, 6, 2, 2]));
    assert!(matches!(block.forward(&mut g, x), Err(Error::Contract(_))));
    let x = g.input(Tensor::zeros(&[1, 8, 65, 64]));
    assert!(matches!(block.forward(&mut g, x), Err(Error::Contract(_))));
}

#[test]
fn nonlocal_gradient_check() {
    let mut store = ParamStore::new();
    let block = NonLocalBlock::new(&mut store, "nl", 8, 4, &mut rng(6));
    scramble(&mut store, 7);
    let x = store.add("input", random(&mut rng(8), &[2, 8, 3, 3]), ParamKind::Trainable);
    let report = gradcheck::check(&mut store, &check_cfg(), |g| {
        let xv = g.param(x);
        let out = block.forward(g, xv)?;
        let a = random_projection(g, out.y, 1)?;
        let b = random_projection(g, out.alpha, 2)?;
        g.tape.add(a, b)
    })
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn gate_zero_psi_gives_half_and_zero_skip_gives_zero() {
    let mut store = ParamStore::new();
    let gate = DualPathGate::new(&mut store, "ag", 8, 12, 4, 2, &mut rng(9));
    store.fill_prefix("ag.gate0.psi", 0.0);
    store.fill_prefix("ag.gate1.psi", 0.0);
    let mut g = Graph::new(&store, Mode::Train);
    let xl = g.input(random(&mut rng(10), &[1, 8, 6, 6]));
    let xh = g.input(random(&mut rng(11), &[1, 12, 6, 6]));
    let out = gate.forward(&mut g, xl, xh).unwrap();
    assert_eq!(out.alphas.len(), 2);
    for &a in &out.alphas {
        assert!(g.value(a).data().iter().all(|&v| v == 0.5));
    }
    assert_eq!(g.value(out.y).shape(), &[1, 4, 6, 6]);

    let mut g = Graph::new(&store, Mode::Train);
    let xl = g.input(Tensor::zeros(&[1, 8, 6, 6]));
    let xh = g.input(random(&mut rng(13), &[1, 12, 6, 6]));
    let out = gate.forward(&mut g, xl, xh).unwrap();
    assert!(g.value(out.y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn gate_coefficients_lie_in_open_unit_interval() {
    let mut store = ParamStore::new();
    let gate = DualPathGate::new(&mut store, "ag", 8, 8, 4, 2, &mut rng(14));
    scramble(&mut store, 15);
    let mut g = Graph::new(&store, Mode::Eval);
    let xl = g.input(random(&mut rng(16), &[2, 8, 5, 5]));
    let xh = g.input(random(&mut rng(17), &[2, 8, 5, 5]));
    let out = gate.forward(&mut g, xl, xh).unwrap();
    for &a in &out.alphas {
        assert_eq!(g.value(a).shape(), &[2, 1, 5, 5]);
        assert!(g.value(a).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn gate_pathway_symmetry() {
    let mut store = ParamStore::new();
    let gate = DualPathGate::new(&mut store, "ag", 8, 8, 4, 2, &mut rng(18));
    let run = |store: &ParamStore| {
        let mut g = Graph::new(store, Mode::Train);
        let xl = g.input(random(&mut rng(19), &[1, 8, 4, 4]));
        let xh = g.input(random(&mut rng(20), &[1, 8, 4, 4]));
        let out = gate.forward(&mut g, xl, xh).unwrap();
        let a: Vec<Vec<f64>> = out.alphas.iter().map(|&a| g.value(a).data().to_vec()).collect();
        a
    };
    let independent = run(&store);
    assert_ne!(independent[0], independent[1]);

    for (src, dst) in gate.pathways[0].params().into_iter().zip(gate.pathways[1].params()) {
        let v = store.get(src).clone();
        store.get_mut(dst).data_mut().copy_from_slice(v.data());
    }
    let tied = run(&store);
    assert!(tied[0].iter().zip(&tied[1]).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn single_pathway_gate_has_one_psi() {
    let mut store = ParamStore::new();
    let single = DualPathGate::new(&mut store, "s", 8, 8, 4, 1, &mut rng(21));
    assert_eq!(single.pathways.len(), 1);
    assert_eq!(store.entries().iter().filter(|e| e.name.contains(".psi.weight")).count(), 1);
    let dual = DualPathGate::new(&mut store, "d", 8, 8, 4, 2, &mut rng(21));
    assert!(dual.parameter_count(&store) > single.parameter_count(&store));
}

#[test]
fn gate_rejects_spatial_mismatch() {
    let mut store = ParamStore::new();
    let gate = DualPathGate::new(&mut store, "ag", 4, 4, 2, 2, &mut rng(22));
    let mut g = Graph::new(&store, Mode::Eval);
    let xl = g.input(Tensor::zeros(&[1, 4, 4, 4]));
    let xh = g.input(Tensor::zeros(&[1, 4, 2, 2]));
    assert!(matches!(gate.forward(&mut g, xl, xh), Err(Error::Dimension(_))));
}

#[test]
fn dual_gate_gradient_check() {
    let mut store = ParamStore::new();
    let gate = DualPathGate::new(&mut store, "ag", 8, 8, 4, 2, &mut rng(23));
    scramble(&mut store, 24);
    let xl = store.add("x_l", random(&mut rng(25), &[1, 8, 6, 6]), ParamKind::Trainable);
    let xh = store.add("x_h", random(&mut rng(26), &[1, 8, 6, 6]), ParamKind::Trainable);
    let report = gradcheck::check(&mut store, &check_cfg(), |g| {
        let (a, b) = (g.param(xl), g.param(xh));
        let out = gate.forward(g, a, b)?;
        random_projection(g, out.y, 3)
    })
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn channel_attention_anchors() {
    let mut store = ParamStore::new();
    let ca = ChannelAttention::new(&mut store, "ca", 6, &mut rng(27)).unwrap();
    let mut g = Graph::new(&store, Mode::Eval);
    let x = g.input(Tensor::zeros(&[2, 6, 3, 3]));
    let out = ca.forward(&mut g, x).unwrap();
    assert!(g.value(out.beta).data().iter().all(|&v| v == 0.5));
    assert!(g.value(out.y).data().iter().all(|&v| v == 0.0));
    assert_eq!(g.value(out.beta).shape(), &[2, 6, 1, 1]);

    let xt = Tensor::from_fn(&[2, 6, 3, 3], |i| (i as f64 * 0.37).sin().abs() * 3.0);
    let mut g = Graph::new(&store, Mode::Eval);
    let x = g.input(xt.clone());
    let out = ca.forward(&mut g, x).unwrap();
    assert!(g.value(out.beta).data().iter().all(|&v| v > 0.0 && v < 1.0));
    assert!(g.value(out.y).data().iter().zip(xt.data()).all(|(y, x)| y >= x));

    assert!(matches!(ChannelAttention::new(&mut store, "odd", 5, &mut rng(0)), Err(Error::Contract(_))));
}

#[test]
fn channel_residual_with_forced_beta() {
    let xt = random(&mut rng(28), &[1, 3, 2, 2]);
    for b in [0.0, 0.25, 1.0] {
        let mut tape = Tape::new();
        let x = tape.constant(xt.clone());
        let beta = tape.constant(Tensor::full(&[1, 3, 1, 1], b));
        let y = channel_residual(&mut tape, x, beta).unwrap();
        for (y, x) in tape.value(y).data().iter().zip(xt.data()) {
            assert!((y - x * (1.0 + b)).abs() <= 1e-15 * x.abs());
        }
    }
}

#[test]
fn channel_attention_gradient_check() {
    let mut store = ParamStore::new();
    let ca = ChannelAttention::new(&mut store, "ca", 6, &mut rng(29)).unwrap();
    scramble(&mut store, 30);
    let x = store.add("input", random(&mut rng(31), &[2, 6, 4, 4]), ParamKind::Trainable);
    let report = gradcheck::check(&mut store, &check_cfg(), |g| {
        let xv = g.param(x);
        let out = ca.forward(g, xv)?;
        random_projection(g, out.y, 4)
    })
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

fn scale_inputs(g: &mut Graph, seed: u64, zero: bool) -> Vec<Var> {
    let mut r = rng(seed);
    [(4, 8), (6, 4), (8, 2), (10, 1)]
        .into_iter()
        .map(|(c, e)| {
            let shape = [1, c, e, e];
            g.input(if zero { Tensor::zeros(&shape) } else { random(&mut r, &shape) })
        })
        .collect()
}

#[test]
fn scale_attention_zero_features() {
    let mut store = ParamStore::new();
    let la = ScaleAttention::new(&mut store, "la", &[4, 6, 8, 10], false, &mut rng(32));
    store.fill_prefix("la.", 0.0);
    let mut g = Graph::new(&store, Mode::Eval);
    let fs = scale_inputs(&mut g, 0, true);
    let out = la.forward(&mut g, &fs, 8, 8).unwrap();
    assert!(g.value(out.y).data().iter().all(|&v| v == 0.0));
    assert!(g.value(out.gamma).data().iter().all(|&v| v == 0.5));
    assert_eq!(g.value(out.gamma).shape(), &[1, 4, 1, 1]);
}

#[test]
fn scale_attention_shapes_and_ranges() {
    let mut store = ParamStore::new();
    let la = ScaleAttention::new(&mut store, "la", &[4, 6, 8, 10], false, &mut rng(33));
    let mut g = Graph::new(&store, Mode::Eval);
    let fs = scale_inputs(&mut g, 34, false);
    let out = la.forward(&mut g, &fs, 8, 8).unwrap();
    assert_eq!(g.value(out.y).shape(), &[1, 16, 8, 8]);
    assert_eq!(g.value(out.gamma_star).shape(), &[1, 4, 8, 8]);
    assert_eq!(g.value(out.pixelwise).shape(), &[1, 4, 8, 8]);
    for v in [out.gamma, out.gamma_star, out.pixelwise] {
        assert!(g.value(v).data().iter().all(|&c| c > 0.0 && c < 1.0));
    }
    assert!(matches!(la.forward(&mut g, &fs[..3], 8, 8), Err(Error::Contract(_))));

    let mut store = ParamStore::new();
    let single = ScaleAttention::new(&mut store, "la", &[4, 6, 8, 10], true, &mut rng(33));
    let mut g = Graph::new(&store, Mode::Eval);
    let fs = scale_inputs(&mut g, 34, false);
    let out = single.forward(&mut g, &fs, 8, 8).unwrap();
    assert_eq!(g.value(out.gamma_star).shape(), &[1, 1, 8, 8]);
    assert_eq!(g.value(out.pixelwise).shape(), &[1, 4, 8, 8]);
}

#[test]
fn scale_residual_reduces_to_identity() {
    let f = random(&mut rng(35), &[1, 8, 3, 3]);
    let mut tape = Tape::new();
    let fv = tape.constant(f.clone());
    let gamma = tape.constant(Tensor::zeros(&[1, 2, 1, 1]));
    let star = tape.constant(Tensor::zeros(&[1, 2, 3, 3]));
    let y = scale_residual(&mut tape, fv, gamma, star, 2).unwrap();
    assert_eq!(tape.value(y).data(), f.data());

    // γ = 1 on the first scale only: that group becomes 2·F̂ + F̂·γ*.
    let gamma = tape.constant(Tensor::new(vec![1, 2, 1, 1], vec![1.0, 0.0]).unwrap());
    let star = tape.constant(Tensor::full(&[1, 2, 3, 3], 0.5));
    let y = scale_residual(&mut tape, fv, gamma, star, 2).unwrap();
    let (head, tail) = tape.value(y).data().split_at(36);
    assert!(head.iter().zip(&f.data()[..36]).all(|(y, x)| (y - 2.5 * x).abs() < 1e-15));
    assert_eq!(tail, &f.data()[36..]);
}

#[test]
fn scale_attention_gradient_check() {
    let mut store = ParamStore::new();
    let la = ScaleAttention::new(&mut store, "la", &[2, 3, 4, 5], false, &mut rng(36));
    scramble(&mut store, 37);
    let mut r = rng(38);
    let inputs: Vec<_> = [(2, 8), (3, 4), (4, 2), (5, 1)]
        .into_iter()
        .enumerate()
        .map(|(i, (c, e))| store.add(format!("f{i}"), random(&mut r, &[1, c, e, e]), ParamKind::Trainable))
        .collect();
    let report = gradcheck::check(&mut store, &check_cfg(), |g| {
        let fs: Vec<Var> = inputs.iter().map(|&id| g.param(id)).collect();
        let out = la.forward(g, &fs, 8, 8)?;
        let a = random_projection(g, out.y, 5)?;
        let b = random_projection(g, out.pixelwise, 6)?;
        g.tape.add(a, b)
    })
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn export_requires_forward_and_detaches() {
    let record = AttentionRecord::default();
    assert!(matches!(record.export(&Tape::new()), Err(Error::Contract(_))));

    let mut store = ParamStore::new();
    let gate = DualPathGate::new(&mut store, "ag", 4, 4, 2, 2, &mut rng(39));
    let ca = ChannelAttention::new(&mut store, "ca", 2, &mut rng(40)).unwrap();
    let mut g = Graph::new(&store, Mode::Train);
    let xl = g.input(random(&mut rng(41), &[1, 4, 4, 4]));
    let out = gate.forward(&mut g, xl, xl).unwrap();
    let c = ca.forward(&mut g, out.y).unwrap();
    let mut record = AttentionRecord::default();
    record.push_gate("sa2", &out);
    record.push_channel("ca1", &c);
    let maps = record.export(&g.tape).unwrap();
    assert_eq!(maps.len(), 2);
    for (_, m) in &maps {
        for t in m.tensors() {
            assert!(!t.requires_grad());
            assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
    let AttentionMap::Gate { alphas, mean } = &maps[0].1 else { panic!("gate expected") };
    for i in 0..mean.len() {
        assert_eq!(mean.data()[i], (alphas[0].data()[i] + alphas[1].data()[i]) / 2.0);
    }
    assert_eq!(maps[0].1.spatial().unwrap().shape(), &[1, 1, 4, 4]);
}

#[test]
fn nonlocal_spatial_summary_is_column_mean() {
    let alpha = Tensor::new(vec![1, 4, 4], (0..16).map(|i| if i % 4 == 1 { 1.0 } else { 0.0 }).collect()).unwrap();
    let m = AttentionMap::NonLocal {
        alpha,
        height: 2,
        width: 2,
    };
    assert_eq!(m.spatial().unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
}
