//! Acceptance criteria 1-8, one PASS/FAIL line each.
//!
//! Runs as a plain binary: `cargo test --release --test acceptance [-- 3 5]`
//! selects criteria by number.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use attnseg::commands::{execute, Command, GammaReport, RunSpec};
use attnseg_core::attention::{channel_residual, scale_residual, AttentionMap, NonLocalBlock};
use attnseg_core::autodiff::fault;
use attnseg_core::data::{blob_image, intensity_stats, synth_blobs, tensor_to_pnm, to_dataset, Blob, LabelMap, Pnm, SynthConfig};
use attnseg_core::metrics::{assd, dice, BinaryMask};
use attnseg_core::model::{CANetModel, ModelConfig};
use attnseg_core::nn::{Graph, Mode, ParamStore};
use attnseg_core::train::{train, AugmentConfig, TrainConfig};
use attnseg_core::{exec, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

type Verdict = (bool, String);

fn scratch() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| tempfile::tempdir().expect("temp dir")).path()
}

fn spec(command: Command, config: Option<&Path>, out: &Path, seed: u64, overrides: &[&str]) -> RunSpec {
    RunSpec {
        command,
        config: config.map(Path::to_path_buf),
        out: out.to_path_buf(),
        seed,
        overrides: overrides.iter().map(|s| s.to_string()).collect(),
    }
}

fn write_config(name: &str, value: serde_json::Value) -> PathBuf {
    let p = scratch().join(name);
    fs::write(&p, serde_json::to_string_pretty(&value).unwrap()).unwrap();
    p
}

fn random(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
}

fn gradient_integrity() -> Verdict {
    let out = scratch().join("gradcheck");
    let start = Instant::now();
    let code = execute(&spec(Command::Gradcheck, None, &out, 0, &[]));
    let secs = start.elapsed().as_secs_f64();
    fault::corrupt_rule(Some("conv2d"));
    let corrupted = execute(&spec(Command::Gradcheck, None, &out, 0, &[]));
    fault::corrupt_rule(None);
    let pass = code == 0 && secs < 60.0 && corrupted == 1;
    (pass, format!("exit {code} in {secs:.1}s; corrupted conv2d rule exits {corrupted}"))
}

fn parameter_counts() -> Verdict {
    let count = |sa: bool, ca: bool, la: bool| {
        let cfg = ModelConfig {
            enable_sa: sa,
            enable_ca: ca,
            enable_la: la,
            ..ModelConfig::default()
        };
        let m = CANetModel::build(cfg, 0).unwrap();
        let parts: usize = m.module_counts().iter().map(|(_, n)| n).sum();
        assert_eq!(parts, m.parameter_count());
        m.parameter_count() as f64
    };
    let (full, base, sa, ca) = (count(true, true, true), count(false, false, false), count(true, false, false), count(false, true, false));
    let near = |v: f64, target: f64| (v - target).abs() <= 0.1 * target;
    let cli = execute(&spec(Command::Params, None, &scratch().join("params"), 0, &[]));
    let pass = near(full, 2.8e6) && near(base, 1.9e6) && near(sa, 2.0e6) && near(ca, 2.7e6) && base < sa && sa < full && cli == 0;
    let m = |v: f64| v / 1e6;
    (
        pass,
        format!("CA-Net {:.3}M, baseline {:.3}M, SA-only {:.3}M, CA-only {:.3}M", m(full), m(base), m(sa), m(ca)),
    )
}

fn attention_invariants() -> Verdict {
    let mut notes = Vec::new();
    let mut ok = true;
    let mut r = ChaCha8Rng::seed_from_u64(3);

    // Coefficient ranges on a full forward pass in both modes. Eval mode
    // runs after the running statistics have settled on the input.
    let mut model = CANetModel::build(ModelConfig::default(), 3).unwrap();
    let x = random(&mut r, &[2, 3, 64, 64]);
    for _ in 0..40 {
        let mut g = Graph::new(&model.store, Mode::Train);
        let xv = g.input(x.clone());
        model.forward(&mut g, xv).unwrap();
        let updates = g.into_updates();
        model.store.apply(updates);
    }
    let (mut worst_row, mut in_range, mut maps_seen) = (0.0f64, true, 0);
    for mode in [Mode::Train, Mode::Eval] {
        let mut g = Graph::new(&model.store, mode);
        let xv = g.input(x.clone());
        let out = model.forward(&mut g, xv).unwrap();
        for (_, map) in out.attention.export(&g.tape).unwrap() {
            maps_seen += 1;
            match &map {
                AttentionMap::NonLocal { alpha, height, width } => {
                    let hw = height * width;
                    for row in alpha.data().chunks(hw) {
                        worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
                        in_range &= row.iter().all(|&v| v >= 0.0);
                    }
                }
                _ => {
                    for t in map.tensors() {
                        in_range &= t.data().iter().all(|&v| v > 0.0 && v < 1.0);
                    }
                }
            }
        }
    }
    ok &= worst_row < 1e-9 && in_range && maps_seen == 18;
    notes.push(format!("alpha row-sum error {worst_row:.1e}, coefficients in (0,1): {in_range}"));

    // Zeroed non-local parameters leave the input untouched.
    let mut store = ParamStore::new();
    let nl = NonLocalBlock::new(&mut store, "nl", 16, 4, &mut r);
    store.fill_prefix("nl", 0.0);
    let xt = random(&mut r, &[1, 16, 4, 4]);
    let mut g = Graph::new(&store, Mode::Train);
    let xv = g.input(xt.clone());
    let y = nl.forward(&mut g, xv).unwrap().y;
    let nl_identity = g.value(y).data() == xt.data();

    // Channel residual with a forced coefficient, and zero input.
    let mut tape = attnseg_core::Tape::new();
    let xv = tape.constant(xt.clone());
    let half = tape.constant(Tensor::full(&[1, 16, 1, 1], 0.5));
    let zero = tape.constant(Tensor::zeros(&[1, 16, 1, 1]));
    let y_half = channel_residual(&mut tape, xv, half).unwrap();
    let y_zero = channel_residual(&mut tape, xv, zero).unwrap();
    let ca_identity = tape.value(y_half).data().iter().zip(xt.data()).all(|(y, x)| *y == 1.5 * x) && tape.value(y_zero).data() == xt.data();

    // Scale residual with vanishing coefficients returns the features.
    let fhat = random(&mut r, &[1, 16, 8, 8]);
    let mut tape = attnseg_core::Tape::new();
    let fv = tape.constant(fhat.clone());
    let gz = tape.constant(Tensor::zeros(&[1, 4, 1, 1]));
    let gsz = tape.constant(Tensor::zeros(&[1, 4, 8, 8]));
    let y = scale_residual(&mut tape, fv, gz, gsz, 4).unwrap();
    let la_identity = tape.value(y).data() == fhat.data();

    ok &= nl_identity && ca_identity && la_identity;
    notes.push(format!(
        "identities: non-local {nl_identity}, channel {ca_identity}, scale {la_identity}"
    ));
    (ok, notes.join("; "))
}

fn boundary_oracle(m: &BinaryMask) -> Vec<(i64, i64)> {
    let (h, w) = (m.height as i64, m.width as i64);
    let on = |y: i64, x: i64| y >= 0 && x >= 0 && y < h && x < w && m.get(y as usize, x as usize);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if on(y, x) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dy, dx)| !on(y + dy, x + dx)) {
                out.push((y, x));
            }
        }
    }
    out
}

fn assd_oracle(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (ba, bb) = (boundary_oracle(a), boundary_oracle(b));
    let nearest = |p: &(i64, i64), set: &[(i64, i64)]| {
        set.iter()
            .map(|q| (((p.0 - q.0).pow(2) + (p.1 - q.1).pow(2)) as f64).sqrt())
            .fold(f64::INFINITY, f64::min)
    };
    let total: f64 = ba.iter().map(|p| nearest(p, &bb)).sum::<f64>() + bb.iter().map(|p| nearest(p, &ba)).sum::<f64>();
    total / (ba.len() + bb.len()) as f64
}

fn dice_oracle(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (mut inter, mut sa, mut sb) = (0.0, 0.0, 0.0);
    for y in 0..a.height {
        for x in 0..a.width {
            let (p, q) = (a.get(y, x) as u8 as f64, b.get(y, x) as u8 as f64);
            inter += p * q;
            sa += p;
            sb += q;
        }
    }
    if sa + sb == 0.0 {
        1.0
    } else {
        2.0 * inter / (sa + sb)
    }
}

fn metric_oracles() -> Verdict {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let (mut dice_err, mut assd_err, mut pairs) = (0.0f64, 0.0f64, 0);
    while pairs < 200 {
        let mut mask = || {
            let p = r.gen_range(0.05..0.7);
            BinaryMask::new(16, 16, (0..256).map(|_| r.gen_bool(p)).collect())
        };
        let (a, b) = (mask(), mask());
        if a.is_empty() || b.is_empty() {
            continue;
        }
        dice_err = dice_err.max((dice(&a, &b).unwrap() - dice_oracle(&a, &b)).abs());
        assd_err = assd_err.max((assd(&a, &b).unwrap() - assd_oracle(&a, &b)).abs());
        pairs += 1;
    }
    let pts = |v: &[(usize, usize)], h, w| {
        let mut bits = vec![false; h * w];
        v.iter().for_each(|&(y, x)| bits[y * w + x] = true);
        BinaryMask::new(h, w, bits)
    };
    let half = dice(&pts(&[(0, 0), (0, 1)], 4, 4), &pts(&[(0, 1), (0, 2)], 4, 4)).unwrap();
    let five = assd(&pts(&[(0, 0)], 5, 5), &pts(&[(3, 4)], 5, 5)).unwrap();
    let pass = dice_err < 1e-9 && assd_err < 1e-9 && half == 0.5 && five == 5.0;
    (
        pass,
        format!("{pairs} pairs: max Dice error {dice_err:.1e}, max ASSD error {assd_err:.1e}; hand cases {half} and {five}"),
    )
}

/// Default architecture with one input channel, on one worker. The training
/// set doubles as the validation set, so the tracked Dice is the train Dice.
fn optimization_sanity() -> Verdict {
    let cfg = SynthConfig {
        n: 20,
        size: 64,
        seed: 5,
        val_fraction: 0.0,
        test_fraction: 0.0,
        ..SynthConfig::default()
    };
    let samples = synth_blobs(&cfg).unwrap();
    let (mean, std) = intensity_stats(&samples);
    let set = to_dataset(&samples, mean, std);
    let mut model = CANetModel::build(ModelConfig { in_channels: 1, ..ModelConfig::default() }, 5).unwrap();
    let tc = TrainConfig {
        epochs: 200,
        ..TrainConfig::default()
    };
    exec::set_parallel(false);
    let start = Instant::now();
    let outcome = train(&mut model, &set, &set, &tc, |_| Ok(()));
    let secs = start.elapsed().as_secs_f64();
    exec::set_parallel(true);
    match outcome {
        Ok(o) => {
            let finite = o.log.iter().all(|e| e.train_loss.is_finite());
            let last = o.log.last().unwrap();
            let pass = finite && o.best_val_dice > 0.95 && secs < 1800.0;
            (
                pass,
                format!(
                    "train Dice {:.4} (epoch {}), final loss {:.4}, finite losses {finite}, {:.0}s",
                    o.best_val_dice, o.best_epoch, last.train_loss, secs
                ),
            )
        }
        Err(e) => (false, format!("training failed: {e}")),
    }
}

const COMPARE_EPOCHS: usize = 12;
const COMPARE_SIZE: usize = 32;

struct ComparisonRun {
    seed: u64,
    canet_dir: PathBuf,
    canet_dice: f64,
    baseline_dice: f64,
}

fn test_dice(dir: &Path) -> f64 {
    let text = fs::read_to_string(dir.join("metrics.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["classes"][0]["dice"]["mean"].as_f64().unwrap()
}

/// Trains CA-Net and the plain U-Net through the CLI for three seeds and
/// scores both on the held-out test split.
fn comparison_runs() -> &'static Vec<ComparisonRun> {
    static RUNS: OnceLock<Vec<ComparisonRun>> = OnceLock::new();
    RUNS.get_or_init(|| {
        (0..3)
            .map(|seed| {
                let cfg = write_config(
                    &format!("compare{seed}.json"),
                    json!({
                        "model": {"in_channels": 1},
                        "train": {"epochs": COMPARE_EPOCHS, "lr0": 1e-3},
                        "data": {"synth": {"n": 200, "size": COMPARE_SIZE, "seed": 100 + seed}}
                    }),
                );
                let mut dice = Vec::new();
                let mut dirs = Vec::new();
                for (name, extra) in [("canet", vec![]), ("baseline", vec!["model.enable_sa=false", "model.enable_ca=false", "model.enable_la=false"])] {
                    let dir = scratch().join(format!("{name}{seed}"));
                    let code = execute(&spec(Command::Train, Some(&cfg), &dir, seed, &extra));
                    assert_eq!(code, 0, "{name} seed {seed} training failed");
                    let eval_dir = dir.join("test");
                    let mut o = extra.clone();
                    let ckpt = format!("data.checkpoint={}", dir.join("best.ckpt").display());
                    o.extend(["data.split=test", ckpt.as_str()]);
                    assert_eq!(execute(&spec(Command::Eval, Some(&cfg), &eval_dir, seed, &o)), 0);
                    dice.push(test_dice(&eval_dir));
                    dirs.push(dir);
                }
                eprintln!("seed {seed}: CA-Net {:.4}, baseline {:.4}", dice[0], dice[1]);
                ComparisonRun {
                    seed,
                    canet_dir: dirs.swap_remove(0),
                    canet_dice: dice[0],
                    baseline_dice: dice[1],
                }
            })
            .collect()
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn attention_benefit() -> Verdict {
    let areas: Vec<f64> = synth_blobs(&SynthConfig { n: 200, size: COMPARE_SIZE, seed: 100, ..SynthConfig::default() })
        .unwrap()
        .iter()
        .map(|s| s.mask.labels.iter().filter(|&&l| l == 1).count() as f64)
        .collect();
    let spread = areas.iter().cloned().fold(0.0, f64::max) / areas.iter().cloned().fold(f64::INFINITY, f64::min);
    let runs = comparison_runs();
    let ca = median(runs.iter().map(|r| r.canet_dice).collect());
    let base = median(runs.iter().map(|r| r.baseline_dice).collect());
    let per: Vec<String> = runs.iter().map(|r| format!("{:.3}/{:.3}", r.canet_dice, r.baseline_dice)).collect();
    (
        ca >= base - 0.01 && spread >= 10.0,
        format!("median test Dice CA-Net {ca:.4} vs baseline {base:.4} (per seed {}); target area spread {spread:.0}x", per.join(", ")),
    )
}

fn write_blob_image(path: &Path, radius: f64, seed: u64) {
    let c = COMPARE_SIZE as f64 / 2.0;
    let blob = Blob {
        cy: c,
        cx: c,
        ry: radius,
        rx: radius,
        angle: 0.0,
    };
    let (img, _): (Tensor, LabelMap) = blob_image(COMPARE_SIZE, &[blob], &mut ChaCha8Rng::seed_from_u64(seed));
    tensor_to_pnm(&img).unwrap().write(path).unwrap();
}

fn explainability() -> Verdict {
    let mut expected: BTreeSet<String> = ["prediction.pgm", "gamma.json"].iter().map(|s| s.to_string()).collect();
    for k in 1..=4 {
        expected.insert(format!("sa{k}.pgm"));
        expected.insert(format!("ca{k}_beta.pgm"));
        expected.insert(format!("la_scale{k}.pgm"));
    }
    let small = scratch().join("small_blob.pgm");
    let large = scratch().join("large_blob.pgm");
    write_blob_image(&small, 0.06 * COMPARE_SIZE as f64, 7);
    write_blob_image(&large, 0.35 * COMPARE_SIZE as f64, 7);

    let mut census_ok = true;
    let mut differ = 0;
    let mut notes = Vec::new();
    for run in comparison_runs() {
        let mut argmax = Vec::new();
        for (tag, img) in [("small", &small), ("large", &large)] {
            let out = scratch().join(format!("explain{}_{tag}", run.seed));
            let ckpt = format!("data.checkpoint={}", run.canet_dir.join("best.ckpt").display());
            let image = format!("data.images=[\"{}\"]", img.display());
            let code = execute(&spec(Command::Explain, None, &out, run.seed, &[&ckpt, &image]));
            if code != 0 {
                census_ok = false;
                notes.push(format!("explain exited {code}"));
                continue;
            }
            let files: BTreeSet<String> = fs::read_dir(out.join("maps"))
                .unwrap()
                .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
                .collect();
            census_ok &= files == expected;
            for f in files.iter().filter(|f| f.ends_with(".pgm")) {
                census_ok &= Pnm::read(&out.join("maps").join(f)).is_ok();
            }
            let g: GammaReport = serde_json::from_str(&fs::read_to_string(out.join("maps/gamma.json")).unwrap()).unwrap();
            census_ok &= g.gamma.len() == 4 && g.gamma.iter().all(|&v| v > 0.0 && v < 1.0);
            argmax.push(g.argmax);
        }
        if argmax.len() == 2 {
            differ += usize::from(argmax[0] != argmax[1]);
            notes.push(format!("seed {}: largest gamma at scale {} (small) vs {} (large)", run.seed, argmax[0] + 1, argmax[1] + 1));
        }
    }
    (census_ok && differ >= 2, format!("census complete: {census_ok}; {}", notes.join(", ")))
}

fn determinism() -> Verdict {
    let cfg = write_config(
        "determinism.json",
        json!({
            "model": {"in_channels": 1},
            "train": {"epochs": 2, "lr0": 1e-3, "augment": AugmentConfig::default()},
            "data": {"synth": {"n": 20, "size": 32, "seed": 8}}
        }),
    );
    let losses = |tag: &str| -> Vec<u64> {
        let dir = scratch().join(format!("determinism_{tag}"));
        assert_eq!(execute(&spec(Command::Train, Some(&cfg), &dir, 11, &[])), 0);
        fs::read_to_string(dir.join("epochs.jsonl"))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["train_loss"].as_f64().unwrap().to_bits())
            .collect()
    };
    let (a, b) = (losses("a"), losses("b"));
    let fmt = |v: &[u64]| v.iter().map(|&b| format!("{:.6}", f64::from_bits(b))).collect::<Vec<_>>().join(", ");
    (a.len() == 2 && a == b, format!("epoch losses [{}] vs [{}]", fmt(&a), fmt(&b)))
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(&str, fn() -> Verdict); 8] = [
        ("gradient integrity", gradient_integrity),
        ("parameter counts", parameter_counts),
        ("attention invariants", attention_invariants),
        ("metric oracles", metric_oracles),
        ("optimization sanity", optimization_sanity),
        ("attention benefit direction", attention_benefit),
        ("explainability artifacts", explainability),
        ("determinism", determinism),
    ];
    let mut lines = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !selected.is_empty() && !selected.contains(&(i + 1)) {
            continue;
        }
        let (pass, detail) = run();
        let line = format!("criterion {} {name}: {} ({detail})", i + 1, if pass { "PASS" } else { "FAIL" });
        println!("{line}");
        lines.push((pass, line));
    }
    println!();
    for (_, l) in &lines {
        println!("{l}");
    }
    if lines.iter().any(|(p, _)| !p) {
        std::process::exit(1);
    }
}
