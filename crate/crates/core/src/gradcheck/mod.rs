//! Central finite-difference verification of tape gradients.

mod suite;

pub use suite::{run_suite, suite_names, SuiteEntry, SMOOTH_TOLERANCE, SUITE_TOLERANCE};

use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::error::Result;
use crate::nn::{Graph, Mode, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Lower bound on the denominator of the relative error, so gradients that
    /// are zero up to rounding are compared absolutely.
    pub floor: f64,
    /// Checks at most this many randomly chosen coordinates per tensor.
    pub coords_per_tensor: Option<usize>,
    pub seed: u64,
    pub mode: Mode,
    /// Skips coordinates whose forward and backward one-sided differences
    /// disagree by more than this relative amount: the loss has a kink
    /// (ReLU or max switch) within one step, so no derivative exists there.
    pub kink_tolerance: Option<f64>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-6,
            floor: 1e-3,
            coords_per_tensor: None,
            seed: 0,
            mode: Mode::Train,
            kink_tolerance: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<Mismatch>,
    pub coords_checked: usize,
    pub kinks_skipped: usize,
    /// Every analytic gradient entry (checked or not) is finite.
    pub all_finite: bool,
    pub seconds: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.all_finite && self.max_rel_error < tolerance
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Scalarises a tensor-valued output as `Σ out ⊙ R` with fixed random `R`.
pub fn random_projection(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Tensor::from_fn(g.tape.shape(out), |_| rng.gen_range(-1.0..1.0));
    let r = g.input(r);
    let p = g.tape.mul(out, r)?;
    Ok(g.tape.sum_all(p))
}

/// Compares tape gradients of `loss` against central differences for every
/// trainable tensor in `store`.
///
/// `loss` must be a deterministic function of the store contents. Inputs that
/// should be checked are registered in the store as trainable tensors.
pub fn check<F>(store: &mut ParamStore, cfg: &GradCheckConfig, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let start = Instant::now();
    let ids: Vec<ParamId> = store.trainable_ids().collect();
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new(store, cfg.mode).with_param_grads(true);
        let l = loss(&mut g)?;
        g.backward(l)?;
        ids.iter()
            .map(|&id| {
                g.param_grad(id)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; store.get(id).len()])
            })
            .collect()
    };
    let all_finite = analytic.iter().flatten().all(|v| v.is_finite());

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(store, cfg.mode).with_param_grads(false);
        let l = loss(&mut g)?;
        Ok(g.value(l).data()[0])
    };

    let center = match cfg.kink_tolerance {
        Some(_) => eval(store)?,
        None => 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
        kinks_skipped: 0,
        all_finite,
        seconds: 0.0,
    };
    for (&id, grad) in ids.iter().zip(&analytic) {
        let len = grad.len();
        let coords: Vec<usize> = match cfg.coords_per_tensor {
            Some(k) if k < len => sample(&mut rng, len, k).into_vec(),
            _ => (0..len).collect(),
        };
        for k in coords {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + cfg.step;
            let plus = eval(store)?;
            store.get_mut(id).data_mut()[k] = orig - cfg.step;
            let minus = eval(store)?;
            store.get_mut(id).data_mut()[k] = orig;
            if let Some(tol) = cfg.kink_tolerance {
                let (fwd, bwd) = ((plus - center) / cfg.step, (center - minus) / cfg.step);
                if relative_error(fwd, bwd, cfg.floor) > tol {
                    report.kinks_skipped += 1;
                    continue;
                }
            }
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let rel = relative_error(grad[k], numeric, cfg.floor);
            report.coords_checked += 1;
            if !(rel <= report.max_rel_error) {
                report.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
                report.worst = Some(Mismatch {
                    tensor: store.entry(id).name.clone(),
                    index: k,
                    analytic: grad[k],
                    numeric,
                });
            }
        }
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}
