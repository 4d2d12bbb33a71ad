//! Central-difference gradient checking.

use crate::error::{Error, Result};
use crate::numerics::{ParamId, Params, Tape, Var};

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are judged by absolute error instead of amplified
/// round-off.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub coordinates: usize,
    pub max_rel_error: f64,
    /// Parameter name and flat coordinate of the worst disagreement.
    pub worst: Option<(String, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub tol: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn eval<F>(params: &Params, f: &mut F) -> Result<f64>
where
    F: FnMut(&mut Tape, &Params) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    let v = tape.value(loss);
    if v.len() != 1 {
        return Err(Error::shape("grad_check", v.shape(), &[1]));
    }
    let v = v.data()[0];
    if !v.is_finite() {
        return Err(Error::NonFinite("grad_check objective"));
    }
    Ok(v)
}

/// Compares the tape gradient of the scalar built by `f` against
/// `(f(θ+h) − f(θ−h)) / 2h` for every coordinate of the parameters in
/// `ids`. Parameter values are restored afterwards; gradients in `params`
/// are left untouched.
pub fn grad_check<F>(
    params: &mut Params,
    ids: &[ParamId],
    h: f64,
    tol: f64,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &Params) -> Result<Var>,
{
    let mut scratch = params.clone();
    scratch.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, &scratch)?;
    if !tape.value(loss).data().iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("grad_check objective"));
    }
    tape.backward_into(loss, &mut scratch)?;
    drop(tape);

    let mut report = GradCheckReport {
        coordinates: 0,
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        tol,
        passed: true,
    };
    for &id in ids {
        let analytic = scratch.grad(id).clone();
        for k in 0..analytic.len() {
            let original = params.value(id).data()[k];
            params.value_mut(id).data_mut()[k] = original + h;
            let plus = eval(params, &mut f);
            params.value_mut(id).data_mut()[k] = original - h;
            let minus = eval(params, &mut f);
            params.value_mut(id).data_mut()[k] = original;
            let numeric = (plus? - minus?) / (2.0 * h);
            let a = analytic.data()[k];
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((params.get(id).name.clone(), k));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn sum_has_unit_gradient() {
        let mut params = Params::new();
        let id = params.add("theta", Tensor::vector(vec![0.3, -1.2, 2.0]));
        let report = grad_check(&mut params, &[id], DEFAULT_STEP, DEFAULT_TOL, |tape, p| {
            let t = tape.param(p, id);
            Ok(tape.sum(t))
        })
        .unwrap();
        assert!(report.passed);
        assert!(report.max_rel_error < 1e-9, "{report:?}");
        assert_eq!(report.coordinates, 3);
    }

    #[test]
    fn quadratic_is_exact_for_central_differences() {
        let mut params = Params::new();
        let id = params.add("theta", Tensor::vector(vec![0.5, -1.5, 3.0, 0.0]));
        let report = grad_check(&mut params, &[id], DEFAULT_STEP, DEFAULT_TOL, |tape, p| {
            let t = tape.param(p, id);
            let sq = tape.mul(t, t)?;
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert!(report.passed);
        let worst_abs = (report.analytic_at_worst - report.numeric_at_worst).abs();
        assert!(worst_abs < 1e-9, "{report:?}");
        assert_eq!(params.value(id).data(), &[0.5, -1.5, 3.0, 0.0]);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        // |θ| has a kink at 0 that the analytic ReLU subgradient cannot match.
        let mut params = Params::new();
        let id = params.add("theta", Tensor::vector(vec![0.0]));
        let report = grad_check(&mut params, &[id], DEFAULT_STEP, DEFAULT_TOL, |tape, p| {
            let t = tape.param(p, id);
            let r = tape.relu(t);
            Ok(tape.sum(r))
        })
        .unwrap();
        assert!(!report.passed);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let mut params = Params::new();
        let id = params.add("theta", Tensor::vector(vec![1.0]));
        let err = grad_check(&mut params, &[id], DEFAULT_STEP, DEFAULT_TOL, |tape, p| {
            let t = tape.param(p, id);
            let w = Tensor::vector(vec![f64::INFINITY]);
            tape.weighted_sum(t, w)
        });
        assert!(err.is_err());
    }
}
