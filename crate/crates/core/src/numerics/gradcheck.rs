//! Central finite-difference checks of analytic gradients.

use super::{NumericsError, Tensor};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Perturbation half-width for central differences.
    pub epsilon: f64,
    /// Maximum accepted relative error per parameter tensor.
    pub tolerance: f64,
    /// Lower bound on the denominator of the relative error, so that an
    /// all-zero gradient is judged on absolute error at this scale.
    pub scale_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { epsilon: 1e-4, tolerance: 1e-4, scale_floor: 1e-6 }
    }
}

impl GradCheckConfig {
    pub fn new(epsilon: f64, tolerance: f64) -> Self {
        Self { epsilon, tolerance, ..Self::default() }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub index: usize,
    /// Entry with the largest absolute discrepancy.
    pub worst_entry: usize,
    pub max_abs_error: f64,
    /// `max_abs_error / max(|analytic|_inf, |numeric|_inf, scale_floor)`
    pub relative_error: f64,
    pub checked_entries: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.relative_error.total_cmp(&b.relative_error))
    }
}

/// Compares `analytic` gradients against central finite differences of
/// `value` around `params`. Relative error is measured per parameter tensor
/// against that tensor's gradient magnitude.
pub fn grad_check<F>(
    value: F,
    params: &[Tensor],
    analytic: &[Tensor],
    config: &GradCheckConfig,
) -> Result<GradCheckReport, NumericsError>
where
    F: FnMut(&[Tensor]) -> Result<f64, NumericsError>,
{
    grad_check_masked(value, params, analytic, config, |_, _| false)
}

/// As [`grad_check`], skipping entries for which `skip(param, entry)` holds
/// (e.g. inputs inside a non-smooth band).
pub fn grad_check_masked<F, S>(
    mut value: F,
    params: &[Tensor],
    analytic: &[Tensor],
    config: &GradCheckConfig,
    skip: S,
) -> Result<GradCheckReport, NumericsError>
where
    F: FnMut(&[Tensor]) -> Result<f64, NumericsError>,
    S: Fn(usize, usize) -> bool,
{
    if params.len() != analytic.len() {
        return Err(NumericsError::shape(
            "grad_check",
            format!("{} params, {} gradients", params.len(), analytic.len()),
        ));
    }
    let eps = config.epsilon;
    let mut work: Vec<Tensor> = params.to_vec();
    let mut checks = Vec::with_capacity(params.len());

    for (p, grad) in analytic.iter().enumerate() {
        if grad.len() != params[p].len() {
            return Err(NumericsError::shape(
                "grad_check",
                format!("gradient {p} has {} entries, param has {}", grad.len(), params[p].len()),
            ));
        }
        let mut numeric = vec![0.0; grad.len()];
        let mut checked = vec![false; grad.len()];
        for e in 0..grad.len() {
            if skip(p, e) {
                continue;
            }
            let original = work[p].data()[e];
            work[p].data_mut()[e] = original + eps;
            let plus = finite(value(&work)?, "f(x + eps)")?;
            work[p].data_mut()[e] = original - eps;
            let minus = finite(value(&work)?, "f(x - eps)")?;
            work[p].data_mut()[e] = original;
            numeric[e] = (plus - minus) / (2.0 * eps);
            checked[e] = true;
        }

        let mut scale = config.scale_floor;
        let mut max_abs_error = 0.0;
        let mut worst_entry = 0;
        for e in (0..grad.len()).filter(|&e| checked[e]) {
            let a = grad.data()[e];
            if !a.is_finite() {
                return Err(NumericsError::NonFinite { context: "analytic gradient".into() });
            }
            scale = scale.max(a.abs()).max(numeric[e].abs());
            let err = (a - numeric[e]).abs();
            if err > max_abs_error {
                max_abs_error = err;
                worst_entry = e;
            }
        }
        checks.push(ParamCheck {
            index: p,
            worst_entry,
            max_abs_error,
            relative_error: max_abs_error / scale,
            checked_entries: checked.iter().filter(|&&c| c).count(),
        });
    }

    let max_relative_error = checks.iter().map(|c| c.relative_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        params: checks,
        max_relative_error,
        tolerance: config.tolerance,
        passed: max_relative_error <= config.tolerance,
    })
}

fn finite(v: f64, context: &str) -> Result<f64, NumericsError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(NumericsError::NonFinite { context: context.to_string() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let x = Tensor::scalar(3.0);
        let analytic = Tensor::scalar(6.0);
        let report = grad_check(
            |p| Ok(p[0].data()[0].powi(2)),
            &[x],
            &[analytic],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed);
        assert!(report.max_relative_error < 1e-9);
    }

    #[test]
    fn wrong_gradient_fails() {
        let report = grad_check(
            |p| Ok(p[0].data()[0].powi(2)),
            &[Tensor::scalar(3.0)],
            &[Tensor::scalar(5.0)],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(!report.passed);
        assert_eq!(report.worst().unwrap().index, 0);
    }

    #[test]
    fn non_finite_evaluation_is_an_error() {
        let err = grad_check(
            |p| Ok(p[0].data()[0].ln()),
            &[Tensor::scalar(0.0)],
            &[Tensor::scalar(1.0)],
            &GradCheckConfig::default(),
        );
        assert!(matches!(err, Err(NumericsError::NonFinite { .. })));
    }
}
