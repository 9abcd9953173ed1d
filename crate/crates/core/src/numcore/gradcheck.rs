//! Central finite-difference verification of reverse-mode gradients.

use serde::{Deserialize, Serialize};

use crate::error::NumError;

use super::{Tape, Tensor, Var};

/// Default finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Default pass threshold on the relative error.
pub const DEFAULT_TOL: f64 = 1e-4;
/// Relative errors are measured against `max(|analytic|, |numeric|, RELATIVE_FLOOR)`,
/// so components whose true derivative is ~0 are compared on an absolute scale.
pub const RELATIVE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat index of the component with the largest relative error.
    pub worst_index: usize,
    pub n_checked: usize,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    /// Combines reports of several checks; passes only if all passed.
    pub fn merge(reports: &[GradCheckReport]) -> Option<GradCheckReport> {
        let first = reports.first()?.clone();
        Some(reports.iter().skip(1).fold(first, |mut acc, r| {
            if r.max_rel_error > acc.max_rel_error {
                acc.max_rel_error = r.max_rel_error;
                acc.worst_index = r.worst_index;
            }
            acc.max_abs_error = acc.max_abs_error.max(r.max_abs_error);
            acc.n_checked += r.n_checked;
            acc.passed &= r.passed;
            acc
        }))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares the tape gradient of the scalar function `f` at `point` with
/// central differences of step `h`.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport, NumError>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, NumError>,
{
    let tape = Tape::new();
    let x = tape.var(point.clone());
    let y = f(&tape, x)?;
    let analytic = tape.backward(y)?.wrt(x);

    let eval = |p: Tensor, idx: usize, sign: &str| -> Result<f64, NumError> {
        let tape = Tape::new();
        let x = tape.constant(p);
        let v = f(&tape, x)?.item();
        if !v.is_finite() {
            return Err(NumError::NonFinite {
                op: format!("f(x {sign} h*e_{idx})"),
            });
        }
        Ok(v)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: 0,
        n_checked: point.len(),
        tol,
        passed: true,
    };
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus, i, "+")? - eval(minus, i, "-")?) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = relative_error(a, numeric);
        report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
    }
    report.passed = report.max_rel_error < tol;
    Ok(report)
}
