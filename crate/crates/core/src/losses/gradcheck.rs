use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// `max_k |analytic_k − numeric_k| / (|numeric_k| + 1e-8)`.
    pub max_rel_error: f64,
    pub worst_index: usize,
}

/// Compare `analytic` with central differences of `f` around `x`.
pub fn finite_diff_check(
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    analytic: &Tensor,
    eps: f64,
) -> Result<GradCheck> {
    if !(eps > 0.0) {
        return Err(Error::Parameter(format!("finite-difference step must be > 0, got {eps}")));
    }
    if x.shape() != analytic.shape() {
        return dim_err(format!(
            "gradient shape {:?} does not match parameter shape {:?}",
            analytic.shape(),
            x.shape()
        ));
    }
    let mut probe = x.clone();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst_index: 0,
    };
    for k in 0..x.len() {
        let orig = x.data()[k];
        probe.data_mut()[k] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[k] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[k] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "objective is not finite near coordinate {k}"
            )));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let rel = (analytic.data()[k] - numeric).abs() / (numeric.abs() + 1e-8);
        if rel > report.max_rel_error {
            report = GradCheck {
                max_rel_error: rel,
                worst_index: k,
            };
        }
    }
    Ok(report)
}
