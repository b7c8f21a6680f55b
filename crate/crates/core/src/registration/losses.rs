//! Differentiable registration losses.

use crate::error::{config_err, shape_err, Result};
use crate::tensor::{Tape, Tensor, Var};

const NCC_EPS: f64 = 1e-5;
const DICE_EPS: f64 = 1e-5;

/// Negative mean squared local normalized cross-correlation over cubic
/// windows of side `window`, for `[1,H,W,D]` volumes. Lies in `[-1, 0]`.
pub fn ncc_loss(tape: &mut Tape, warped: Var, fixed: Var, window: usize) -> Result<Var> {
    if window.is_multiple_of(2) {
        return Err(config_err!("NCC window must be odd, got {window}"));
    }
    let s = tape.shape(warped).to_vec();
    if s != tape.shape(fixed) || s.len() != 4 || s[0] != 1 {
        return Err(shape_err!(
            "NCC needs matching [1,H,W,D] volumes, got {s:?} and {:?}",
            tape.shape(fixed)
        ));
    }
    let ones = tape.constant(Tensor::full(&[1, 1, window, window, window], 1.0));
    let pad = window / 2;
    let n = (window * window * window) as f64;
    let ii = tape.mul(warped, warped)?;
    let jj = tape.mul(fixed, fixed)?;
    let ij = tape.mul(warped, fixed)?;
    let mut sums = [warped, fixed, ii, jj, ij]
        .into_iter()
        .map(|v| tape.conv3d(v, ones, 1, pad, 1));
    let (si, sj, sii, sjj, sij) = (
        sums.next().unwrap()?,
        sums.next().unwrap()?,
        sums.next().unwrap()?,
        sums.next().unwrap()?,
        sums.next().unwrap()?,
    );
    // Window-centred second moments: Σab − Σa·Σb/n.
    let mut centred = |sab: Var, sa: Var, sb: Var| -> Result<Var> {
        let p = tape.mul(sa, sb)?;
        let p = tape.scale(p, 1.0 / n)?;
        tape.sub(sab, p)
    };
    let cross = centred(sij, si, sj)?;
    let var_i = centred(sii, si, si)?;
    let var_j = centred(sjj, sj, sj)?;
    let num = tape.mul(cross, cross)?;
    let den = tape.mul(var_i, var_j)?;
    let den = tape.add_scalar(den, NCC_EPS)?;
    let cc = tape.div(num, den)?;
    let m = tape.mean(cc)?;
    tape.scale(m, -1.0)
}

/// `1 − mean_l (2Σpq + ε)/(Σp + Σq + ε)` over `[L,H,W,D]` soft masks.
pub fn soft_dice_loss(tape: &mut Tape, warped: Var, fixed: Var) -> Result<Var> {
    let s = tape.shape(warped).to_vec();
    if s != tape.shape(fixed) || s.len() != 4 {
        return Err(shape_err!(
            "soft Dice needs matching [L,H,W,D] masks, got {s:?} and {:?}",
            tape.shape(fixed)
        ));
    }
    let l = s[0];
    let n = s[1] * s[2] * s[3];
    let p = tape.reshape(warped, &[l, n])?;
    let q = tape.reshape(fixed, &[l, n])?;
    let pq = tape.mul(p, q)?;
    let inter = tape.sum_last(pq)?;
    let sp = tape.sum_last(p)?;
    let sq = tape.sum_last(q)?;
    let num = tape.scale(inter, 2.0)?;
    let num = tape.add_scalar(num, DICE_EPS)?;
    let den = tape.add(sp, sq)?;
    let den = tape.add_scalar(den, DICE_EPS)?;
    let dice = tape.div(num, den)?;
    let m = tape.mean(dice)?;
    let neg = tape.scale(m, -1.0)?;
    tape.add_scalar(neg, 1.0)
}

/// Mean squared forward difference of a `[3,H,W,D]` field, averaged over the
/// three axes.
pub fn diffusion_regularizer(tape: &mut Tape, field: Var) -> Result<Var> {
    let s = tape.shape(field).to_vec();
    if s.len() != 4 || s[0] != 3 {
        return Err(shape_err!("displacement field must be [3,H,W,D], got {s:?}"));
    }
    let mut terms = Vec::new();
    for (axis, &len) in s.iter().enumerate().skip(1) {
        if len < 2 {
            continue;
        }
        let hi = tape.slice_axis(field, axis, 1, len - 1)?;
        let lo = tape.slice_axis(field, axis, 0, len - 1)?;
        let d = tape.sub(hi, lo)?;
        let d2 = tape.mul(d, d)?;
        terms.push(tape.mean(d2)?);
    }
    let mut total = tape.constant(Tensor::scalar(0.0));
    for t in terms {
        total = tape.add(total, t)?;
    }
    tape.scale(total, 1.0 / 3.0)
}
