//! Central finite differences, used as an oracle for the tape.
//!
//! Nothing here touches [`crate::autodiff::Graph::backward`]; the function
//! under test is only ever evaluated forward.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor for the denominator of [`relative_error`].
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// `(f(x+h) − f(x−h)) / 2h` for every coordinate of every leaf.
///
/// `f` must return a single-element tensor.
pub fn fd_gradient<F>(f: F, leaves: &[Tensor], h: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Contract(format!("step must be positive, got {h}")));
    }
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let out = f(xs)?;
        if !out.is_scalar() {
            return Err(Error::Contract(format!(
                "finite differences need a scalar function, got shape {:?}",
                out.shape()
            )));
        }
        Ok(out.item())
    };
    // Surface a non-scalar output even when there are no coordinates to perturb.
    eval(leaves)?;

    let mut work = leaves.to_vec();
    let mut grads = Vec::with_capacity(leaves.len());
    for li in 0..leaves.len() {
        let mut g = Tensor::zeros(leaves[li].shape());
        for k in 0..leaves[li].numel() {
            let orig = leaves[li].data()[k];
            work[li].data_mut()[k] = orig + h;
            let plus = eval(&work)?;
            work[li].data_mut()[k] = orig - h;
            let minus = eval(&work)?;
            work[li].data_mut()[k] = orig;
            g.data_mut()[k] = (plus - minus) / (2.0 * h);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Largest [`relative_error`] over matching entries.
pub fn max_relative_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| relative_error(x, y))
        .fold(0.0, f64::max)
}
