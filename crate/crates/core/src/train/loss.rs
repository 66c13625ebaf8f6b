use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Smoothing term in the soft Dice ratio.
pub const DICE_EPS: f64 = 1e-5;

/// `1 − mean_{n,k} (2Σpg + ε) / (Σp + Σg + ε)` over N×K×H×W probabilities
/// and one-hot targets. Every class, background included, is averaged.
pub fn soft_dice_loss(tape: &mut Tape, probs: Var, target: Var) -> Result<Var> {
    let (sp, st) = (tape.shape(probs).to_vec(), tape.shape(target).to_vec());
    if sp != st || sp.len() != 4 {
        return Err(Error::dim(format!("soft Dice needs matching N×K×H×W tensors, got {sp:?} and {st:?}")));
    }
    let reduced = [sp[0], sp[1], 1, 1];
    let pg = tape.mul(probs, target)?;
    let inter = tape.sum_to(pg, &reduced)?;
    let num = tape.affine(inter, 2.0, DICE_EPS);
    let p_sum = tape.sum_to(probs, &reduced)?;
    let g_sum = tape.sum_to(target, &reduced)?;
    let den = tape.add(p_sum, g_sum)?;
    let den = tape.affine(den, 1.0, DICE_EPS);
    let ratio = tape.div(num, den)?;
    let mean = tape.mean_all(ratio);
    Ok(tape.affine(mean, -1.0, 1.0))
}
