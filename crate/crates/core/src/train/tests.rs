use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::Tape;
use crate::gradcheck::{self, GradCheckConfig};
use crate::model::ModelConfig;
use crate::nn::ParamKind;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_labels(r: &mut ChaCha8Rng, h: usize, w: usize, k: u8) -> LabelMap {
    LabelMap::new(h, w, (0..h * w).map(|_| r.gen_range(0..k)).collect())
}

fn dice_value(p: &Tensor, g: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let (pv, gv) = (tape.constant(p.clone()), tape.constant(g.clone()));
    let l = soft_dice_loss(&mut tape, pv, gv).unwrap();
    tape.value(l).data()[0]
}

/// Direct summation of the loss definition.
fn brute_dice_loss(p: &Tensor, g: &Tensor) -> f64 {
    let s = p.shape();
    let (n, k, hw) = (s[0], s[1], s[2] * s[3]);
    let mut total = 0.0;
    for b in 0..n {
        for c in 0..k {
            let (mut inter, mut ps, mut gs) = (0.0, 0.0, 0.0);
            for i in 0..hw {
                let j = (b * k + c) * hw + i;
                inter += p.data()[j] * g.data()[j];
                ps += p.data()[j];
                gs += g.data()[j];
            }
            total += (2.0 * inter + DICE_EPS) / (ps + gs + DICE_EPS);
        }
    }
    1.0 - total / (n * k) as f64
}

fn one_hot_batch(maps: &[LabelMap], k: usize) -> Tensor {
    stack_one_hot(&maps.iter().collect::<Vec<_>>(), k).unwrap()
}

#[test]
fn soft_dice_perfect_and_uniform() {
    let mut r = rng(1);
    let maps: Vec<_> = (0..2).map(|_| random_labels(&mut r, 4, 5, 2)).collect();
    let g = one_hot_batch(&maps, 2);
    assert!(dice_value(&g, &g) < 1e-4);
    let uniform = Tensor::full(g.shape(), 0.5);
    assert!((dice_value(&uniform, &g) - brute_dice_loss(&uniform, &g)).abs() < 1e-9);
    let l = dice_value(&uniform, &g);
    assert!((0.0..=1.0).contains(&l));

    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
    let b = tape.constant(Tensor::zeros(&[1, 3, 2, 2]));
    assert!(matches!(soft_dice_loss(&mut tape, a, b), Err(Error::Dimension(_))));
}

#[test]
fn soft_dice_gradient_check() {
    let mut r = rng(2);
    let maps: Vec<_> = (0..2).map(|_| random_labels(&mut r, 3, 3, 3)).collect();
    let target = one_hot_batch(&maps, 3);
    let mut store = ParamStore::new();
    let p = store.add("probs", Tensor::from_fn(target.shape(), |_| r.gen_range(0.05..0.95)), ParamKind::Trainable);
    let report = gradcheck::check(&mut store, &GradCheckConfig::default(), |g| {
        let pv = g.param(p);
        let tv = g.input(target.clone());
        soft_dice_loss(&mut g.tape, pv, tv)
    })
    .unwrap();
    assert!(report.passes(1e-5), "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn soft_dice_matches_summation_and_ignores_class_order(seed in any::<u64>()) {
        let mut r = rng(seed);
        let maps: Vec<_> = (0..2).map(|_| random_labels(&mut r, 3, 4, 3)).collect();
        let g = one_hot_batch(&maps, 3);
        let p = Tensor::from_fn(g.shape(), |_| r.gen_range(0.0..1.0));
        let l = dice_value(&p, &g);
        prop_assert!((l - brute_dice_loss(&p, &g)).abs() < 1e-9);
        // Rotate the class axis of both tensors.
        let perm = |t: &Tensor| Tensor::from_fn(t.shape(), |i| {
            let (b, c, px) = (i / 36, (i / 12) % 3, i % 12);
            t.data()[b * 36 + ((c + 1) % 3) * 12 + px]
        });
        prop_assert!((dice_value(&perm(&p), &perm(&g)) - l).abs() < 1e-12);
    }
}

#[test]
fn adam_first_step_moves_by_lr() {
    let cfg = AdamConfig::default();
    let (mut w, mut m, mut v) = ([1.0], [0.0], [0.0]);
    adam_update(&mut w, &[1.0], &mut m, &mut v, 1, 1e-4, &cfg).unwrap();
    assert!((w[0] - (1.0 - 1e-4)).abs() < 1e-9, "{}", w[0]);

    let still = AdamConfig { weight_decay: 0.0, ..cfg };
    let (mut w, mut m, mut v) = ([0.3, -2.0], [0.0; 2], [0.0; 2]);
    adam_update(&mut w, &[0.0, 0.0], &mut m, &mut v, 1, 1e-2, &still).unwrap();
    assert_eq!(w, [0.3, -2.0]);
    adam_update(&mut w, &[5.0, -1.0], &mut m, &mut v, 2, 0.0, &cfg).unwrap();
    assert_eq!(w, [0.3, -2.0]);
    assert!(matches!(adam_update(&mut w, &[1.0], &mut m, &mut v, 3, 0.1, &cfg), Err(Error::Contract(_))));
}

#[test]
fn adam_trajectories_are_reproducible() {
    let run = || {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_fn(&[4], |i| i as f64 - 1.5), ParamKind::Trainable);
        let mut state = AdamState::new(&store);
        let mut traj = Vec::new();
        for k in 0..5 {
            let g: Vec<f64> = store.get(id).data().iter().map(|w| (w * (k + 1) as f64).sin()).collect();
            store.get_mut(id).accumulate_grad(&g);
            state.step(&mut store, 1e-2, &AdamConfig::default()).unwrap();
            traj.push(store.get(id).data().to_vec());
        }
        assert_eq!(state.step_count(), 5);
        traj
    };
    assert_eq!(run(), run());
}

#[test]
fn learning_rate_schedule() {
    let cfg = TrainConfig::default();
    assert_eq!(lr_at(0, &cfg), 1e-4);
    assert_eq!(lr_at(255, &cfg), 1e-4);
    assert_eq!(lr_at(256, &cfg), 5e-5);
    assert_eq!(lr_at(512, &cfg), 2.5e-5);
}

#[test]
fn augmentation_identities() {
    let mut r = rng(3);
    let img = Tensor::from_fn(&[2, 6, 8], |_| r.gen_range(-1.0..1.0));
    let mask = random_labels(&mut r, 6, 8, 3);
    let (a, m) = augment(&img, &mask, &AugmentConfig::none(), &mut r).unwrap();
    assert_eq!(a.data(), img.data());
    assert_eq!(m, mask);

    let (f, fm) = flip(&img, &mask, false);
    assert_ne!(f.data(), img.data());
    let (ff, ffm) = flip(&f, &fm, false);
    assert_eq!(ff.data(), img.data());
    assert_eq!(ffm, mask);
    let (v, vm) = flip(&img, &mask, true);
    let (vv, vvm) = flip(&v, &vm, true);
    assert_eq!((vv.data(), &vvm), (img.data(), &mask));

    let (z, zm) = rotate(&img, &mask, 0.0);
    assert!(z.max_abs_diff(&img) < 1e-12);
    assert_eq!(zm, mask);

    let crop = AugmentConfig {
        crop: Some([4, 8]),
        ..AugmentConfig::none()
    };
    let (c, cm) = augment(&img, &mask, &crop, &mut r).unwrap();
    assert_eq!(c.shape(), &[2, 4, 8]);
    assert_eq!((cm.height, cm.width), (4, 8));
    let too_big = AugmentConfig {
        crop: Some([7, 8]),
        ..AugmentConfig::none()
    };
    assert!(matches!(augment(&img, &mask, &too_big, &mut r), Err(Error::Config(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn rotated_masks_keep_the_label_set(seed in any::<u64>(), angle in -3.0f64..3.0) {
        let mut r = rng(seed);
        let img = Tensor::from_fn(&[1, 9, 7], |_| r.gen_range(0.0..1.0));
        let mask = LabelMap::new(9, 7, (0..63).map(|_| [0u8, 2, 5][r.gen_range(0..3)]).collect());
        let (rot, rm) = rotate(&img, &mask, angle);
        prop_assert!(rm.labels.iter().all(|l| [0, 2, 5].contains(l)));
        // Zero padding plus convex interpolation keeps values in range.
        prop_assert!(rot.data().iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
    }
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        in_channels: 1,
        base_channels: 4,
        ..ModelConfig::default()
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let model = CANetModel::build(ModelConfig { in_channels: 1, ..ModelConfig::default() }, 4).unwrap();
    let mut r = rng(5);
    let x = Tensor::from_fn(&[1, 1, 32, 32], |_| r.gen_range(-1.0..1.0));
    let y = one_hot_batch(&[random_labels(&mut r, 32, 32, 2)], 2);
    let mut g = Graph::new(&model.store, Mode::Train);
    let (xv, yv) = (g.input(x), g.input(y));
    let out = model.forward(&mut g, xv).unwrap();
    let p = g.tape.softmax(out.logits, 1).unwrap();
    let l = soft_dice_loss(&mut g.tape, p, yv).unwrap();
    g.backward(l).unwrap();
    for id in model.store.trainable_ids() {
        let grad = g.param_grad(id).unwrap_or(&[]);
        assert!(grad.iter().any(|&v| v != 0.0), "{} has no gradient", model.store.entry(id).name);
    }
}

/// Every image shows its label map (bright square on dark) under noise.
fn square_set(n: usize, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let samples = (0..n)
        .map(|i| {
            let labels: Vec<u8> = (0..256).map(|p| u8::from((4..12).contains(&(p / 16)) && (4..12).contains(&(p % 16)))).collect();
            let image = Tensor::from_fn(&[1, 16, 16], |p| 2.0 * f64::from(labels[p]) - 1.0 + r.gen_range(-0.2..0.2));
            Sample {
                id: format!("s{i}"),
                image,
                mask: LabelMap::new(16, 16, labels),
            }
        })
        .collect();
    Dataset {
        samples,
        classes: 2,
        channels: 1,
    }
}

fn quick_train_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        lr0: 1e-2,
        epochs,
        batch_size: 2,
        augment: AugmentConfig::none(),
        ..TrainConfig::default()
    }
}

#[test]
fn constant_label_data_is_fitted() {
    let data = square_set(4, 6);
    let mut model = CANetModel::build(tiny_config(), 7).unwrap();
    let out = train(&mut model, &data, &data, &quick_train_config(50), |_| Ok(())).unwrap();
    let last = out.log.last().unwrap();
    assert!(out.log.iter().all(|e| e.train_loss.is_finite()));
    assert!(last.train_loss < 0.05, "final loss {}", last.train_loss);
    assert!(out.best_val_dice > 0.9);
}

#[test]
fn training_is_reproducible_and_validates_inputs() {
    let data = square_set(4, 8);
    let run = || {
        let mut model = CANetModel::build(tiny_config(), 9).unwrap();
        let cfg = TrainConfig {
            augment: AugmentConfig::default(),
            ..quick_train_config(2)
        };
        train(&mut model, &data, &data, &cfg, |_| Ok(())).unwrap().log
    };
    let (a, b) = (run(), run());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
        assert_eq!(x.val_dice, y.val_dice);
    }

    let empty = Dataset {
        samples: vec![],
        classes: 2,
        channels: 1,
    };
    let mut model = CANetModel::build(tiny_config(), 9).unwrap();
    assert!(matches!(train(&mut model, &empty, &data, &quick_train_config(1), |_| Ok(())), Err(Error::Config(_))));
}
