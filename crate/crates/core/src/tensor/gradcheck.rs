//! Central finite-difference oracle for analytic gradients.

use super::{Result, Tensor, TensorError};

/// One evaluation of the function under test.
#[derive(Debug, Clone, Default)]
pub struct FdProbe {
    pub value: f64,
    /// Relu pre-activations seen during the evaluation, used to skip
    /// coordinates whose perturbation moves a unit across its kink.
    pub relu_preacts: Vec<f64>,
}

impl From<f64> for FdProbe {
    fn from(value: f64) -> Self {
        Self {
            value,
            relu_preacts: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
    /// `(tensor index, coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
}

/// Compares `analytic` against central differences of `f` at `params`.
///
/// The error for a coordinate is `|analytic - fd| / max(1, |analytic|)`. A
/// coordinate is skipped when some relu pre-activation that moves under its
/// perturbation lies within `10 * eps` of zero at either probe point.
pub fn finite_diff_check<F>(mut f: F, params: &[Tensor], analytic: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor]) -> Result<FdProbe>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(TensorError::Contract(format!("finite-difference step {eps:e} outside [1e-7, 1e-3]")));
    }
    if params.len() != analytic.len() {
        return Err(TensorError::Contract(format!(
            "{} parameter tensors but {} gradients",
            params.len(),
            analytic.len()
        )));
    }
    for (p, a) in params.iter().zip(analytic) {
        if p.shape() != a.shape() {
            return Err(TensorError::Shape {
                op: "finite_diff_check",
                left: p.shape().to_vec(),
                right: a.shape().to_vec(),
            });
        }
    }

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
        worst: None,
    };
    let kink_band = 10.0 * eps;

    for t in 0..work.len() {
        for c in 0..work[t].len() {
            let original = work[t].data()[c];
            work[t].data_mut()[c] = original + eps;
            let plus = f(&work)?;
            work[t].data_mut()[c] = original - eps;
            let minus = f(&work)?;
            work[t].data_mut()[c] = original;

            if !plus.value.is_finite() || !minus.value.is_finite() {
                return Err(TensorError::NonFinite { op: "finite_diff_check" });
            }
            let near_kink = plus
                .relu_preacts
                .iter()
                .zip(&minus.relu_preacts)
                .any(|(&a, &b)| a != b && a.abs().min(b.abs()) <= kink_band || (a > 0.0) != (b > 0.0));
            if near_kink || plus.relu_preacts.len() != minus.relu_preacts.len() {
                report.skipped += 1;
                continue;
            }

            let numeric = (plus.value - minus.value) / (2.0 * eps);
            let exact = analytic[t].data()[c];
            let err = (exact - numeric).abs() / exact.abs().max(1.0);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((t, c));
            }
        }
    }
    Ok(report)
}
