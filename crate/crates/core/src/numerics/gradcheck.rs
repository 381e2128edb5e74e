//! Central-difference verification of analytic gradients.

use super::nn::Parameterized;
use crate::error::{Error, Result};

/// Compares the gradients already stored in `model` with central differences
/// of `f`. Returns the largest `|analytic − numeric| / max(1, |analytic|, |numeric|)`
/// over every parameter element.
///
/// `f` must be deterministic and must not touch the stored gradients.
pub fn finite_diff_check<M, F>(model: &mut M, epsilon: f64, mut f: F) -> Result<f64>
where
    M: Parameterized + ?Sized,
    F: FnMut(&M) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::Config(format!("epsilon {epsilon} outside [1e-7, 1e-3]")));
    }
    let analytic: Vec<Vec<f64>> = model
        .params()
        .iter()
        .map(|p| p.grad.data().to_vec())
        .collect();
    let mut worst = 0.0f64;
    for (pi, grads) in analytic.iter().enumerate() {
        for (ei, &a) in grads.iter().enumerate() {
            let original = model.params()[pi].value.data()[ei];
            model.params_mut()[pi].value.data_mut()[ei] = original + epsilon;
            let plus = f(model)?;
            model.params_mut()[pi].value.data_mut()[ei] = original - epsilon;
            let minus = f(model)?;
            model.params_mut()[pi].value.data_mut()[ei] = original;
            if !plus.is_finite() || !minus.is_finite() {
                let name = model.params()[pi].name.clone();
                return Err(Error::Numeric(format!(
                    "objective not finite while perturbing {name}[{ei}]"
                )));
            }
            let numeric = (plus - minus) / (2.0 * epsilon);
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
