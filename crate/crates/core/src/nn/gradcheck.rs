//! Central finite-difference validation of analytic gradients.

use serde::Serialize;

/// Magnitudes below this are compared absolutely rather than relatively.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradMismatch {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub tolerance: f64,
    pub step: f64,
    pub failures: Vec<GradMismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.max_rel_error.is_finite()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the gradient returned by `f` against central differences
/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate of `inputs`.
///
/// `f` returns the scalar value and its analytic gradient.
pub fn check_gradients<F>(f: F, inputs: &[f64], step: f64, tolerance: f64) -> GradCheckReport
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = f(inputs);
    assert_eq!(analytic.len(), inputs.len(), "gradient length");
    let mut x = inputs.to_vec();
    let mut report = GradCheckReport {
        checked: inputs.len(),
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        tolerance,
        step,
        failures: Vec::new(),
    };
    for i in 0..inputs.len() {
        x[i] = inputs[i] + step;
        let (fp, _) = f(&x);
        x[i] = inputs[i] - step;
        let (fm, _) = f(&x);
        x[i] = inputs[i];
        let numeric = (fp - fm) / (2.0 * step);
        let rel = relative_error(analytic[i], numeric);
        let rel = if rel.is_nan() { f64::INFINITY } else { rel };
        report.max_rel_error = report.max_rel_error.max(rel);
        report.max_abs_error = report.max_abs_error.max((analytic[i] - numeric).abs());
        if rel >= tolerance {
            report.failures.push(GradMismatch {
                index: i,
                analytic: analytic[i],
                numeric,
                rel_error: rel,
            });
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_passes() {
        let x: Vec<f64> = (0..10).map(|i| i as f64 * 0.3 - 1.2).collect();
        let r = check_gradients(
            |x| (x.iter().map(|v| v * v).sum(), x.iter().map(|v| 2.0 * v).collect()),
            &x,
            1e-4,
            1e-6,
        );
        assert!(r.passed(), "{r:?}");
        assert!(r.max_rel_error < 1e-6);
    }

    #[test]
    fn relu_sum_away_from_kink_passes() {
        let x = vec![-1.0, -0.5, 0.3, 0.9, 2.0];
        let r = check_gradients(
            |x| {
                (
                    x.iter().map(|v| v.max(0.0)).sum(),
                    x.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect(),
                )
            },
            &x,
            1e-3,
            1e-3,
        );
        assert!(r.passed());
    }

    #[test]
    fn wrong_gradient_is_reported() {
        let r = check_gradients(|x| (x[0] * x[0], vec![x[0]]), &[1.0], 1e-3, 1e-3);
        assert!(!r.passed());
        assert_eq!(r.failures[0].index, 0);
    }
}
