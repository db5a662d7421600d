//! Central finite-difference verification of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

mod suite;

pub use suite::{run_suite, standard_suite, CaseFn, CaseResult, GradcheckCase, SuiteReport, SUITE_TOLERANCE};

/// Default finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

impl GradcheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Denominator floor of [`relative_error`], per unit of `max(1, |f(x)|)`.
/// Smaller gradient components sit below the round-off of a difference
/// quotient and are compared in absolute terms.
pub const ERROR_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<F>(f: &F, x: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = f(&mut tape, v)?;
    let val = tape.value(out);
    if val.numel() != 1 {
        return Err(Error::Contract(format!(
            "gradcheck needs a scalar function, got shape {:?}",
            val.shape()
        )));
    }
    Ok(val.item())
}

/// Checks every coordinate of `x`.
pub fn gradcheck<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    gradcheck_coords(f, x, h, &coords)
}

/// Step divisors tried per coordinate; the smallest error counts.
const STEP_LADDER: [f64; 3] = [1.0, 4.0, 16.0];
/// Errors at or below this end the ladder early.
const GOOD_ENOUGH: f64 = 1e-7;

/// Checks only the listed flat coordinates of `x`, comparing the backward
/// pass against the fourth-order central difference
/// `(-f(x+2s) + 8f(x+s) - 8f(x-s) + f(x-2s)) / 12s` for `s` in `h`, `h/4`,
/// `h/16`. The best step is kept: truncation error shrinks with `s` while
/// round-off grows, and a wrong backward rule is wrong at every step.
pub fn gradcheck_coords<F>(f: F, x: &Tensor<f64>, h: f64, coords: &[usize]) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let first = evaluate(&f, x)?;
    let floor = ERROR_FLOOR * first.abs().max(1.0);
    let second = evaluate(&f, x)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Contract(format!(
            "function under gradcheck is not deterministic ({first} vs {second})"
        )));
    }

    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = f(&mut tape, v)?;
    let grads = tape.backward(out)?;
    let analytic = grads.get(v).expect("leaf gradient").clone();

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: coords.len(),
    };
    let mut probe = x.clone();
    for &i in coords {
        let orig = probe.data()[i];
        let a = analytic.data()[i];
        let (mut err, mut numeric) = (f64::INFINITY, f64::NAN);
        for div in STEP_LADDER {
            let s = h / div;
            let mut at = |k: f64| -> Result<f64> {
                probe.data_mut()[i] = orig + k * s;
                evaluate(&f, &probe)
            };
            let (p2, p1, m1, m2) = (at(2.0)?, at(1.0)?, at(-1.0)?, at(-2.0)?);
            let n = (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * s);
            let e = relative_error(a, n, floor);
            if e < err || err.is_nan() {
                (err, numeric) = (e, n);
            }
            if err <= GOOD_ENOUGH {
                break;
            }
        }
        probe.data_mut()[i] = orig;
        if !err.is_finite() {
            return Err(Error::NonFinite(format!("gradcheck coordinate {i}")));
        }
        if err > report.max_rel_error || i == coords[0] {
            report.max_rel_error = err;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn sum_of_squares_is_exact() {
        let x = Tensor::from_fn(vec![6], |i| i as f64 * 0.37 - 1.1);
        let r = gradcheck(
            |t, x| {
                let s = t.square(x);
                Ok(t.sum(s))
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn broken_backward_is_detected() {
        let x = Tensor::from_fn(vec![4], |i| 0.5 + i as f64);
        let r = gradcheck(
            |t, x| {
                // value x², but claims derivative 3x
                let y = t.value(x).map(|v| v * v);
                let y = t.record(y, &[x], |g, inp, _| {
                    vec![Some(g.zip_map(inp[0], |g, x| g * 3.0 * x).unwrap())]
                });
                Ok(t.sum(y))
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(r.max_rel_error > 1e-2, "{r:?}");
    }

    #[test]
    fn nondeterminism_is_a_contract_error() {
        let calls = Cell::new(0u32);
        let x = Tensor::from_fn(vec![2], |i| i as f64);
        let err = gradcheck(
            |t, x| {
                calls.set(calls.get() + 1);
                let y = t.scale(x, calls.get() as f64);
                Ok(t.sum(y))
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }
}
