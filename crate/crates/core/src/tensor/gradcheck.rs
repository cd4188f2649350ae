use crate::error::{Error, Result};

/// Gradient magnitudes below this are compared in absolute terms.
pub const GRAD_SCALE_FLOOR: f64 = 1e-4;

/// An operation with a scalar loss and an analytic gradient over a flat
/// parameter vector.
pub trait GradCheck {
    fn params(&self) -> Vec<f64>;
    fn loss_at(&self, params: &[f64]) -> f64;
    /// Analytic gradient evaluated at [`GradCheck::params`].
    fn analytic(&self) -> Vec<f64>;
}

/// Closure-backed [`GradCheck`].
pub struct FnCheck<F> {
    params: Vec<f64>,
    loss: F,
    analytic: Vec<f64>,
}

impl<F: Fn(&[f64]) -> f64> FnCheck<F> {
    pub fn new(params: Vec<f64>, loss: F, analytic: Vec<f64>) -> Self {
        FnCheck {
            params,
            loss,
            analytic,
        }
    }
}

impl<F: Fn(&[f64]) -> f64> GradCheck for FnCheck<F> {
    fn params(&self) -> Vec<f64> {
        self.params.clone()
    }

    fn loss_at(&self, params: &[f64]) -> f64 {
        (self.loss)(params)
    }

    fn analytic(&self) -> Vec<f64> {
        self.analytic.clone()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub num_params: usize,
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub tolerance: f64,
    /// Set when a non-finite value showed up; the check then fails.
    pub failure: Option<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failure.is_none() && self.max_rel_error <= self.tolerance
    }
}

/// `|a - n| / max(|a|, |n|, GRAD_SCALE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(GRAD_SCALE_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Compares the analytic gradient against central finite differences over
/// every parameter.
pub fn gradient_check<G: GradCheck + ?Sized>(op: &G, step: f64, tolerance: f64) -> Result<GradCheckReport> {
    if !(1e-8..=1e-4).contains(&step) {
        return Err(Error::invalid(format!("finite-difference step {step} outside [1e-8, 1e-4]")));
    }
    let params = op.params();
    let analytic = op.analytic();
    if analytic.len() != params.len() {
        return Err(Error::invalid(format!(
            "analytic gradient has {} entries for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let mut report = GradCheckReport {
        num_params: params.len(),
        max_rel_error: 0.0,
        worst_index: None,
        tolerance,
        failure: None,
    };
    let base = op.loss_at(&params);
    if !base.is_finite() {
        report.failure = Some(format!("loss is non-finite ({base}) at the base point"));
        return Ok(report);
    }

    let mut probe = params.clone();
    for (idx, &a) in analytic.iter().enumerate() {
        let orig = probe[idx];
        probe[idx] = orig + step;
        let plus = op.loss_at(&probe);
        probe[idx] = orig - step;
        let minus = op.loss_at(&probe);
        probe[idx] = orig;
        if !plus.is_finite() || !minus.is_finite() || !a.is_finite() {
            report.failure = Some(format!(
                "non-finite value at parameter {idx}: loss+ {plus}, loss- {minus}, analytic {a}"
            ));
            report.worst_index = Some(idx);
            return Ok(report);
        }
        let numeric = (plus - minus) / (2.0 * step);
        let err = relative_error(a, numeric);
        if err > report.max_rel_error || report.worst_index.is_none() {
            report.max_rel_error = err;
            report.worst_index = Some(idx);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_parameter_set_passes() {
        let check = FnCheck::new(vec![], |_: &[f64]| 1.0, vec![]);
        let report = gradient_check(&check, 1e-6, 1e-6).unwrap();
        assert!(report.passed());
        assert_eq!(report.num_params, 0);
    }

    #[test]
    fn wrong_gradient_fails() {
        let check = FnCheck::new(vec![1.0, 2.0], |p: &[f64]| p[0] * p[0] + p[1], vec![2.0, 2.0]);
        let report = gradient_check(&check, 1e-6, 1e-6).unwrap();
        assert!(!report.passed());
        assert_eq!(report.worst_index, Some(1));
    }

    #[test]
    fn non_finite_reports_failure() {
        let check = FnCheck::new(vec![0.0], |p: &[f64]| (p[0]).ln(), vec![1.0]);
        let report = gradient_check(&check, 1e-6, 1e-6).unwrap();
        assert!(!report.passed());
        assert!(report.failure.is_some());
    }

    #[test]
    fn step_out_of_range_rejected() {
        let check = FnCheck::new(vec![0.0], |p: &[f64]| p[0], vec![1.0]);
        assert!(gradient_check(&check, 1e-2, 1e-6).is_err());
        assert!(gradient_check(&check, 1e-9, 1e-6).is_err());
    }
}
