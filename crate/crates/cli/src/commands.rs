//! The subcommands as library functions.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use attnseg_core::attention::AttentionMap;
use attnseg_core::data::{self, synth_blobs, write_dataset, Dataset, LabelMap, Manifest, Pnm, Sample};
use attnseg_core::gradcheck::run_suite;
use attnseg_core::metrics::{report, MetricsReport};
use attnseg_core::model::{predict_mask, CANetModel, ModelConfig};
use attnseg_core::nn::{checkpoint, Graph, Mode};
use attnseg_core::train::{predict, train};
use attnseg_core::{Error, Result, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::{self, RunConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    Train,
    Eval,
    Infer,
    Explain,
    Gradcheck,
    Params,
}

#[derive(Clone, Debug)]
pub struct RunSpec {
    pub command: Command,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub overrides: Vec<String>,
}

/// Everything besides weights needed to rebuild and feed a trained model.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub value_to_label: BTreeMap<u8, u8>,
}

/// Exit code for configuration and data problems.
pub const EXIT_CONFIG: i32 = 2;
/// Exit code for runtime failures, including a failed gradient check.
pub const EXIT_FAILURE: i32 = 1;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Format(_) | Error::Io { .. } | Error::Json(_) => EXIT_CONFIG,
        _ => EXIT_FAILURE,
    }
}

/// Runs one subcommand, printing a single `ERROR:` line on failure.
pub fn execute(spec: &RunSpec) -> i32 {
    let result = match spec.command {
        Command::Train => cmd_train(spec),
        Command::Eval => cmd_eval(spec),
        Command::Infer => cmd_infer(spec),
        Command::Explain => cmd_explain(spec),
        Command::Gradcheck => cmd_gradcheck(spec),
        Command::Params => cmd_params(spec),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("ERROR: {}", e.to_string().replace('\n', " "));
            exit_code(&e)
        }
    }
}

fn resolve(spec: &RunSpec) -> Result<RunConfig> {
    let mut cfg = config::load(spec.config.as_deref(), &spec.overrides)?;
    cfg.train.seed = spec.seed;
    fs::create_dir_all(&spec.out).map_err(|e| Error::io(&spec.out, e))?;
    Ok(cfg)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// The configured manifest, or the synthetic set regenerated under `<out>/data`.
fn manifest(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    if let Some(p) = &cfg.data.manifest {
        return Manifest::load(p);
    }
    let synth = cfg
        .data
        .synth
        .as_ref()
        .ok_or_else(|| Error::config("data.manifest or data.synth is required"))?;
    let dir = out.join("data");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let m = write_dataset(&synth_blobs(synth)?, synth, &dir)?;
    m.validate()?;
    Ok(m)
}

fn check_compatible(model: &ModelConfig, m: &Manifest) -> Result<()> {
    if model.num_classes != m.classes || model.in_channels != m.channels {
        return Err(Error::config(format!(
            "model expects {} channels and {} classes, dataset has {} and {}",
            model.in_channels, model.num_classes, m.channels, m.classes
        )));
    }
    Ok(())
}

fn load_model(cfg: &RunConfig, out: &Path) -> Result<(CANetModel, CheckpointMeta)> {
    let path = cfg.data.checkpoint.clone().unwrap_or_else(|| out.join("best.ckpt"));
    let ck = checkpoint::load(&path)?;
    let meta: CheckpointMeta = serde_json::from_value(ck.config)
        .map_err(|e| Error::config(format!("{}: bad checkpoint metadata: {e}", path.display())))?;
    let mut model = CANetModel::build(meta.model.clone(), 0)?;
    model.store.load_values(&ck.tensors)?;
    Ok((model, meta))
}

fn evaluate(model: &CANetModel, set: &Dataset) -> Result<MetricsReport> {
    let preds = predict(model, &set.samples, 4)?;
    let ids: Vec<String> = set.samples.iter().map(|s| s.id.clone()).collect();
    let truth: Vec<LabelMap> = set.samples.iter().map(|s| s.mask.clone()).collect();
    let classes: Vec<u8> = (1..set.classes as u8).collect();
    report(&ids, &preds, &truth, &classes)
}

fn write_report(out: &Path, r: &MetricsReport) -> Result<()> {
    write(&out.join("metrics.json"), serde_json::to_string_pretty(r)?)?;
    write(&out.join("metrics.csv"), r.to_csv())?;
    println!("class  dice(%)          assd(pix)");
    for c in &r.classes {
        let fmt = |m: Option<f64>, s: Option<f64>, k: f64| match (m, s) {
            (Some(m), Some(s)) => format!("{:.2}±{:.2}", m * k, s * k),
            _ => "n/a".to_string(),
        };
        println!("{:<6} {:<16} {}", c.class, fmt(c.dice.mean, c.dice.std, 100.0), fmt(c.assd.mean, c.assd.std, 1.0));
    }
    Ok(())
}

pub fn cmd_train(spec: &RunSpec) -> Result<i32> {
    let cfg = resolve(spec)?;
    let m = manifest(&cfg, &spec.out)?;
    check_compatible(&cfg.model, &m)?;
    write(&spec.out.join("config.snapshot.json"), serde_json::to_string_pretty(&cfg)?)?;
    let train_set = Dataset::load(&m, data::Split::Train)?;
    let val_set = Dataset::load(&m, data::Split::Val)?;

    let mut model = CANetModel::build(cfg.model.clone(), spec.seed)?;
    let log_path = spec.out.join("epochs.jsonl");
    let mut log = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let outcome = train(&mut model, &train_set, &val_set, &cfg.train, |e| {
        let line = serde_json::to_string(e)?;
        writeln!(log, "{line}").map_err(|err| Error::io(&log_path, err))?;
        println!("{line}");
        Ok(())
    })?;
    model.store = outcome.best;
    let meta = CheckpointMeta {
        model: cfg.model.clone(),
        mean: m.mean.clone(),
        std: m.std.clone(),
        value_to_label: m.value_to_label.clone(),
    };
    checkpoint::save(&spec.out.join("best.ckpt"), &model.store, serde_json::to_value(&meta)?)?;
    println!("best epoch {} with validation Dice {:.4}", outcome.best_epoch, outcome.best_val_dice);
    write_report(&spec.out, &evaluate(&model, &val_set)?)?;
    Ok(0)
}

pub fn cmd_eval(spec: &RunSpec) -> Result<i32> {
    let cfg = resolve(spec)?;
    let (model, _) = load_model(&cfg, &spec.out)?;
    let m = manifest(&cfg, &spec.out)?;
    check_compatible(&model.config, &m)?;
    let set = Dataset::load(&m, cfg.data.split)?;
    if set.is_empty() {
        return Err(Error::config(format!("the {} split is empty", cfg.data.split.name())));
    }
    write_report(&spec.out, &evaluate(&model, &set)?)?;
    Ok(0)
}

/// Images named in the config, or the configured split of the dataset.
fn inputs(cfg: &RunConfig, meta: &CheckpointMeta, out: &Path) -> Result<Vec<Sample>> {
    if !cfg.data.images.is_empty() {
        return cfg
            .data
            .images
            .iter()
            .map(|p| {
                let image = data::load_image(p, &meta.mean, &meta.std)?;
                let (h, w) = (image.shape()[1], image.shape()[2]);
                let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                Ok(Sample {
                    id,
                    image,
                    mask: LabelMap::new(h, w, vec![0; h * w]),
                })
            })
            .collect();
    }
    let m = manifest(cfg, out)?;
    check_compatible(&meta.model, &m)?;
    let set = Dataset::load(&m, cfg.data.split)?;
    if set.is_empty() {
        return Err(Error::config(format!("the {} split is empty", cfg.data.split.name())));
    }
    Ok(set.samples)
}

/// Labels written with the dataset's own gray values where it defines them.
fn mask_to_pnm(mask: &LabelMap, meta: &CheckpointMeta) -> Pnm {
    let classes = meta.model.num_classes;
    let mut gray: Vec<u8> = (0..classes).map(|l| (l * 255 / (classes - 1)) as u8).collect();
    for (&v, &l) in &meta.value_to_label {
        if (l as usize) < classes {
            gray[l as usize] = v;
        }
    }
    Pnm::gray(mask.width, mask.height, mask.labels.iter().map(|&l| gray[l as usize]).collect())
}

fn single(image: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    image.reshape(&shape)
}

#[derive(Serialize)]
struct Timing {
    id: String,
    millis: f64,
}

pub fn cmd_infer(spec: &RunSpec) -> Result<i32> {
    let cfg = resolve(spec)?;
    let (model, meta) = load_model(&cfg, &spec.out)?;
    let samples = inputs(&cfg, &meta, &spec.out)?;
    let maps = spec.out.join("maps");
    fs::create_dir_all(&maps).map_err(|e| Error::io(&maps, e))?;
    let mut timings = Vec::with_capacity(samples.len());
    for s in &samples {
        let start = Instant::now();
        let logits = model.infer(&single(&s.image)?)?;
        let mask = predict_mask(&logits)?.remove(0);
        let millis = start.elapsed().as_secs_f64() * 1e3;
        mask_to_pnm(&mask, &meta).write(&maps.join(format!("{}_pred.pgm", s.id)))?;
        println!("{}: {millis:.1} ms", s.id);
        timings.push(Timing { id: s.id.clone(), millis });
    }
    let mean = timings.iter().map(|t| t.millis).sum::<f64>() / timings.len() as f64;
    println!("mean inference time {mean:.1} ms per image");
    write(&spec.out.join("infer.json"), serde_json::to_string_pretty(&timings)?)?;
    Ok(0)
}

/// Scale-attention coefficients of one explained image.
#[derive(Debug, Serialize, Deserialize)]
pub struct GammaReport {
    pub image: String,
    /// One value per scale, finest first.
    pub gamma: Vec<f64>,
    /// Reported as is; the coefficients are independent sigmoids.
    pub sum: f64,
    pub argmax: usize,
}

/// First image of an N×C×H×W tensor as a 1×H×W plane of channel `c`.
fn plane(t: &Tensor, c: usize) -> Result<Tensor> {
    let s = t.shape();
    let hw = s[2] * s[3];
    Tensor::new(vec![1, s[2], s[3]], t.data()[c * hw..(c + 1) * hw].to_vec())
}

fn check_unit_range(name: &str, t: &Tensor) -> Result<()> {
    if t.data().iter().all(|v| (0.0..=1.0).contains(v)) {
        Ok(())
    } else {
        Err(Error::contract(format!("{name} has coefficients outside [0, 1]")))
    }
}

pub fn cmd_explain(spec: &RunSpec) -> Result<i32> {
    let cfg = resolve(spec)?;
    let (model, meta) = load_model(&cfg, &spec.out)?;
    let sample = inputs(&cfg, &meta, &spec.out)?.remove(0);
    let dir = spec.out.join("maps");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let mut g = Graph::new(&model.store, Mode::Eval);
    let x = g.input(single(&sample.image)?);
    let out = model.forward(&mut g, x)?;
    let mask = predict_mask(g.value(out.logits))?.remove(0);
    mask_to_pnm(&mask, &meta).write(&dir.join("prediction.pgm"))?;
    let maps = if out.attention.is_empty() { Vec::new() } else { out.attention.export(&g.tape)? };

    let mut written = vec!["prediction.pgm".to_string()];
    let mut save = |file: String, t: &Tensor| -> Result<()> {
        data::tensor_to_pnm(t)?.write(&dir.join(&file))?;
        written.push(file);
        Ok(())
    };
    let mut gamma_report = None;
    for (name, map) in &maps {
        for t in map.tensors() {
            check_unit_range(name, t)?;
        }
        match map {
            AttentionMap::NonLocal { .. } | AttentionMap::Gate { .. } => {
                let s = map.spatial().expect("spatial map");
                save(format!("{name}.pgm"), &plane(&s, 0)?)?;
            }
            AttentionMap::Channel { beta } => {
                let c = beta.shape()[1];
                save(format!("{name}_beta.pgm"), &Tensor::new(vec![1, 1, c], beta.data()[..c].to_vec())?)?;
            }
            AttentionMap::Scale { gamma, pixelwise, .. } => {
                let scales = gamma.shape()[1];
                for k in 0..scales {
                    save(format!("{name}_scale{}.pgm", k + 1), &plane(pixelwise, k)?)?;
                }
                let gamma: Vec<f64> = gamma.data()[..scales].to_vec();
                let argmax = (0..scales).fold(0, |b, k| if gamma[k] > gamma[b] { k } else { b });
                gamma_report = Some(GammaReport {
                    image: sample.id.clone(),
                    sum: gamma.iter().sum(),
                    gamma,
                    argmax,
                });
            }
        }
    }
    if let Some(r) = &gamma_report {
        write(&dir.join("gamma.json"), serde_json::to_string_pretty(r)?)?;
        written.push("gamma.json".into());
        println!("scale attention gamma {:?} (sum {:.4}, largest at scale {})", r.gamma, r.sum, r.argmax + 1);
    }
    for f in &written {
        println!("wrote maps/{f}");
    }
    Ok(0)
}

pub fn cmd_gradcheck(_spec: &RunSpec) -> Result<i32> {
    let start = Instant::now();
    let entries = run_suite(None, |e| {
        let status = if e.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<26} max rel err {:.3e} (tol {:.0e}, {} coords) {status}",
            e.name, e.report.max_rel_error, e.tolerance, e.report.coords_checked
        );
    })?;
    println!("gradient check finished in {:.1}s", start.elapsed().as_secs_f64());
    let failed: Vec<&str> = entries.iter().filter(|e| !e.passed()).map(|e| e.name).collect();
    if failed.is_empty() {
        Ok(0)
    } else {
        eprintln!("ERROR: gradient check failed for {}", failed.join(", "));
        Ok(EXIT_FAILURE)
    }
}

pub fn cmd_params(spec: &RunSpec) -> Result<i32> {
    let cfg = resolve(spec)?;
    let model = CANetModel::build(cfg.model, spec.seed)?;
    for (name, n) in model.module_counts() {
        println!("{name:<10} {n:>10}");
    }
    println!("{:<10} {:>10}", "total", model.parameter_count());
    Ok(0)
}
