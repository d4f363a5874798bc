//! Reconstruction loss: `mean|pred - target| + 0.2 * (1 - SSIM)`.

use crate::error::{FusionError, Result};
use crate::metrics::{SSIM_K1, SSIM_K2, SSIM_WINDOW};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Weight of the structural term.
pub const SSIM_WEIGHT: f64 = 0.2;

/// Mean SSIM over valid window positions, recorded on the tape.
pub fn ssim_var(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mu_a = tape.gaussian_valid(a)?;
    let mu_b = tape.gaussian_valid(b)?;
    let aa = tape.mul(a, a)?;
    let bb = tape.mul(b, b)?;
    let ab = tape.mul(a, b)?;
    let e_aa = tape.gaussian_valid(aa)?;
    let e_bb = tape.gaussian_valid(bb)?;
    let e_ab = tape.gaussian_valid(ab)?;
    let mu_aa = tape.mul(mu_a, mu_a)?;
    let mu_bb = tape.mul(mu_b, mu_b)?;
    let mu_ab = tape.mul(mu_a, mu_b)?;
    let var_a = tape.sub(e_aa, mu_aa)?;
    let var_b = tape.sub(e_bb, mu_bb)?;
    let cov = tape.sub(e_ab, mu_ab)?;

    let l_num = tape.mul_scalar(mu_ab, 2.0)?;
    let l_num = tape.add_scalar(l_num, c1)?;
    let c_num = tape.mul_scalar(cov, 2.0)?;
    let c_num = tape.add_scalar(c_num, c2)?;
    let num = tape.mul(l_num, c_num)?;
    let l_den = tape.add(mu_aa, mu_bb)?;
    let l_den = tape.add_scalar(l_den, c1)?;
    let c_den = tape.add(var_a, var_b)?;
    let c_den = tape.add_scalar(c_den, c2)?;
    let den = tape.mul(l_den, c_den)?;
    let map = tape.div(num, den)?;
    tape.mean(map)
}

/// Training objective. Images must be at least 11x11 for the SSIM term.
pub fn loss_var(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let (ps, ts) = (tape.value(pred).shape(), tape.value(target).shape());
    if ps != ts {
        return Err(FusionError::shape(format!("loss: prediction {ps:?} vs target {ts:?}")));
    }
    let (_, h, w) = tape.value(pred).chw()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(FusionError::shape(format!(
            "loss needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let diff = tape.sub(pred, target)?;
    let abs = tape.abs(diff)?;
    let l1 = tape.mean(abs)?;
    let s = ssim_var(tape, pred, target)?;
    let dissim = tape.mul_scalar(s, -SSIM_WEIGHT)?;
    let dissim = tape.add_scalar(dissim, SSIM_WEIGHT)?;
    tape.add(l1, dissim)
}

/// Evaluates [`loss_var`] on plain tensors.
pub fn loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let t = tape.constant(target.clone());
    let l = loss_var(&mut tape, p, t)?;
    Ok(tape.value(l).data()[0])
}

/// `mean|a - b|`.
pub fn l1(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(FusionError::shape(format!("l1: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}
