//! Central finite-difference checks for hand-derived gradients.
//!
//! Coordinates where the objective is not differentiable within the step
//! (a rectifier or absolute value switching sides) are detected through the
//! second difference and skipped; the report counts them.

use crate::model::FactorModel;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub h: f64,
    pub rel_tol: f64,
    /// Lower bound of the relative-error denominator, so gradients that are
    /// zero up to rounding compare in absolute terms.
    pub denom_floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { h: 1e-5, rel_tol: 1e-4, denom_floor: 1e-5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_err: f64,
    pub worst_param: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

impl GradCheckReport {
    pub fn passed(&self, rel_tol: f64) -> bool {
        self.max_rel_err < rel_tol
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.checked += other.checked;
        self.skipped_kinks += other.skipped_kinks;
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst_param = other.worst_param;
            self.analytic_at_worst = other.analytic_at_worst;
            self.numeric_at_worst = other.numeric_at_worst;
        }
    }
}

pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares `analytic` against central differences of `objective` at every
/// parameter of `model`.
pub fn check_model_gradient(
    model: &FactorModel,
    analytic: &[f64],
    mut objective: impl FnMut(&FactorModel) -> f64,
    opts: GradCheck,
) -> GradCheckReport {
    assert_eq!(analytic.len(), model.num_params());
    let mut probe = model.clone();
    let f0 = objective(&probe);
    let mut report = GradCheckReport::default();
    for p in 0..model.num_params() {
        let base = model.params()[p];
        probe.params_mut()[p] = base + opts.h;
        let fp = objective(&probe);
        probe.params_mut()[p] = base - opts.h;
        let fm = objective(&probe);
        probe.params_mut()[p] = base;

        // Smooth objectives have a second difference of order h^2; a kink
        // inside the stencil leaves one of order h.
        let second = (fp - 2.0 * f0 + fm).abs();
        if second > 10.0 * opts.h * opts.h * f0.abs().max(1.0) {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * opts.h);
        let err = relative_error(analytic[p], numeric, opts.denom_floor);
        report.checked += 1;
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst_param = p;
            report.analytic_at_worst = analytic[p];
            report.numeric_at_worst = numeric;
        }
    }
    report
}
