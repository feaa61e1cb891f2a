//! Central finite differences, used to validate analytic gradients.

use crate::error::Result;
use crate::tensor::Tensor;

/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Gradient of `f` at `x` by central differences with the given step.
pub fn finite_difference_grad(mut f: impl FnMut(&Tensor) -> Result<f64>, x: &Tensor, step: f64) -> Result<Tensor> {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (plus - minus) / (2.0 * step);
    }
    Ok(out)
}

/// Worst entry of one analytic-vs-numeric comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckReport {
    pub fn compare(name: impl Into<String>, analytic: &Tensor, numeric: &Tensor) -> Self {
        let mut report = Self {
            name: name.into(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
            let e = relative_error(a, n);
            if e > report.max_rel_error {
                report.max_rel_error = e;
                report.worst_index = i;
                report.analytic = a;
                report.numeric = n;
            }
        }
        report
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}
