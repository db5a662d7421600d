//! Training objective: windowed NCC similarity plus displacement smoothness.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of the smoothness term.
    pub lambda: f64,
    /// Cubic NCC window extent (odd).
    pub ncc_window: usize,
    /// Variance floor.
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            ncc_window: 5,
            eps: 1e-5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, errors: &mut Vec<String>) {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            errors.push(format!("loss.lambda must be finite and >= 0, got {}", self.lambda));
        }
        if self.ncc_window == 0 || self.ncc_window.is_multiple_of(2) {
            errors.push(format!("loss.ncc_window must be odd and >= 1, got {}", self.ncc_window));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            errors.push(format!("loss.eps must be positive, got {}", self.eps));
        }
    }
}

/// `1 - mean_windows cc` where, per fully contained cubic window,
/// `cc = ((Σ f̂ŵ)² + eps) / (Σ f̂² · Σ ŵ² + eps)` with window-centred
/// `f̂`, `ŵ`. Identical inputs give exactly 0.
pub fn ncc_loss<T: Scalar>(tape: &mut Tape<T>, f: Var, w: Var, window: usize, eps: f64) -> Result<Var> {
    if tape.shape(f) != tape.shape(w) {
        return Err(Error::shape("ncc_loss", tape.shape(f), tape.shape(w)));
    }
    let inv_n = 1.0 / (window * window * window) as f64;
    let ff = tape.mul(f, f)?;
    let ww = tape.mul(w, w)?;
    let fw = tape.mul(f, w)?;
    let sf = tape.box_sum(f, window)?;
    let sw = tape.box_sum(w, window)?;
    let sff = tape.box_sum(ff, window)?;
    let sww = tape.box_sum(ww, window)?;
    let sfw = tape.box_sum(fw, window)?;

    let centred = |tape: &mut Tape<T>, sab: Var, sa: Var, sb: Var| -> Result<Var> {
        let prod = tape.mul(sa, sb)?;
        let prod = tape.scale(prod, inv_n);
        tape.sub(sab, prod)
    };
    let cross = centred(tape, sfw, sf, sw)?;
    let var_f = centred(tape, sff, sf, sf)?;
    let var_w = centred(tape, sww, sw, sw)?;

    let num = tape.mul(cross, cross)?;
    let num = tape.add_scalar(num, eps);
    let den = tape.mul(var_f, var_w)?;
    let den = tape.add_scalar(den, eps);
    let cc = tape.div(num, den)?;
    let m = tape.mean(cc);
    let neg = tape.scale(m, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

/// Sum over spatial axes of the mean squared forward difference of the
/// displacement `[3, D, H, W]`; axes of extent 1 contribute nothing.
pub fn smoothness_loss<T: Scalar>(tape: &mut Tape<T>, field: Var) -> Result<Var> {
    let shape = tape.shape(field).to_vec();
    if shape.len() != 4 || shape[0] != 3 {
        return Err(Error::arg("smoothness_loss", format!("field shape {shape:?}")));
    }
    let mut total: Option<Var> = None;
    for axis in 1..4 {
        if shape[axis] < 2 {
            continue;
        }
        let d = tape.diff(field, axis)?;
        let sq = tape.square(d);
        let m = tape.mean(sq);
        total = Some(match total {
            None => m,
            Some(t) => tape.add(t, m)?,
        });
    }
    Ok(match total {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(T::zero())),
    })
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub sim: Var,
    pub smooth: Var,
    pub warped: Var,
}

/// `ncc_loss(fixed, warp(moving, field)) + λ · smoothness_loss(field)`.
pub fn composite_loss<T: Scalar>(
    tape: &mut Tape<T>,
    fixed: Var,
    moving: Var,
    field: Var,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let warped = tape.warp(moving, field)?;
    let sim = ncc_loss(tape, fixed, warped, cfg.ncc_window, cfg.eps)?;
    let smooth = smoothness_loss(tape, field)?;
    let weighted = tape.scale(smooth, cfg.lambda);
    let total = tape.add(sim, weighted)?;
    Ok(LossTerms {
        total,
        sim,
        smooth,
        warped,
    })
}

/// Loss values without gradients: `(total, sim, smooth)`.
pub fn composite_loss_value<T: Scalar>(
    fixed: &Tensor<T>,
    moving: &Tensor<T>,
    field: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<(f64, f64, f64)> {
    let mut tape = Tape::new();
    let f = tape.constant(fixed.clone());
    let m = tape.constant(moving.clone());
    let u = tape.constant(field.clone());
    let t = composite_loss(&mut tape, f, m, u, cfg)?;
    let val = |v: Var| tape.value(v).item().as_f64();
    Ok((val(t.total), val(t.sim), val(t.smooth)))
}
