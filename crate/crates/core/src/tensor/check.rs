use super::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
}

/// Compares analytic gradients against central differences.
///
/// `f` evaluates the loss at the current parameter values and accumulates
/// its analytic gradient into the store (grads are zeroed before each call).
/// Any dropout inside `f` must draw the same mask on every call. Each
/// trainable entry is scored with `|a − n| / max(1e-8, |a| + |n|)`.
pub fn grad_check<F>(mut f: F, params: &mut ParamStore, eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore) -> Result<f64>,
{
    let mut eval = |params: &mut ParamStore| -> Result<f64> {
        params.zero_grads();
        let loss = f(params)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: None });
        }
        Ok(loss)
    };

    eval(params)?;
    let analytic: Vec<(String, Vec<f64>)> = params
        .iter()
        .filter(|(_, s)| s.trainable)
        .map(|(name, s)| (name.to_string(), s.grad.data().to_vec()))
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        entries_checked: 0,
    };
    for (name, grads) in &analytic {
        for (i, &a) in grads.iter().enumerate() {
            let orig = params.value(name)?.data()[i];
            params.value_mut(name)?.data_mut()[i] = orig + eps;
            let up = eval(params)?;
            params.value_mut(name)?.data_mut()[i] = orig - eps;
            let down = eval(params)?;
            params.value_mut(name)?.data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * eps);
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            report.entries_checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((name.clone(), i));
            }
        }
    }
    // leave the store holding the analytic gradient at the unperturbed point
    eval(params)?;
    Ok(report)
}
