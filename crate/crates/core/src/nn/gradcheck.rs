//! Central finite-difference gradient checking.

use super::params::ParamSet;

/// Denominator floor for the relative error, so components whose true
/// gradient is ~0 are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Default step for central differences.
pub const FD_STEP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub n_checked: usize,
    pub max_rel_error: f64,
    /// Flat index (segment order) of the worst component.
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares `analytic` against `(f(p + h) - f(p - h)) / 2h` for every
/// component of `params`.
pub fn grad_check<P, G, F>(mut loss: F, params: &P, analytic: &G, h: f64) -> GradCheckReport
where
    P: ParamSet + Clone,
    G: ParamSet + ?Sized,
    F: FnMut(&P) -> f64,
{
    let analytic = analytic.flatten();
    assert_eq!(analytic.len(), params.n_params(), "gradient layout mismatch");
    let mut report = GradCheckReport {
        n_checked: 0,
        max_rel_error: 0.0,
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    let lens = params.segment_lens();
    let mut probe = params.clone();
    let mut flat = 0;
    for (s, &len) in lens.iter().enumerate() {
        for i in 0..len {
            let orig = probe.segments()[s][i];
            probe.segments_mut()[s][i] = orig + h;
            let up = loss(&probe);
            probe.segments_mut()[s][i] = orig - h;
            let down = loss(&probe);
            probe.segments_mut()[s][i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(analytic[flat], numeric);
            if err > report.max_rel_error || report.n_checked == 0 {
                report.max_rel_error = err;
                report.worst_index = flat;
                report.worst_analytic = analytic[flat];
                report.worst_numeric = numeric;
            }
            report.n_checked += 1;
            flat += 1;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_loss() {
        let p = vec![0.5, -1.5, 3.0, 0.0];
        let grad: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
        let report = grad_check(|q: &Vec<f64>| q.iter().map(|v| v * v).sum(), &p, &grad, FD_STEP);
        assert_eq!(report.n_checked, 4);
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn wrong_gradient_is_reported() {
        let p = vec![1.0, 2.0];
        let grad = vec![2.0, 3.0];
        let report = grad_check(|q: &Vec<f64>| q.iter().map(|v| v * v).sum(), &p, &grad, FD_STEP);
        assert_eq!(report.worst_index, 1);
        assert!(report.max_rel_error > 0.2);
    }
}
