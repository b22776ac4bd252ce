//! Central-difference gradient oracle for checking the trainer's backward pass.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Central differences (f(x+e) - f(x-e)) / 2e per coordinate of `params`.
pub fn finite_diff_grad<S: Scalar>(
    mut loss_fn: impl FnMut(&Matrix<S>) -> S,
    params: &Matrix<S>,
    epsilon: f64,
) -> Result<Matrix<S>> {
    assert!(epsilon > 0.0, "finite_diff_grad needs epsilon > 0");
    let eps = S::lit(epsilon);
    let mut grad = Matrix::zeros(params.rows(), params.cols());
    let mut work = params.clone();
    for idx in 0..params.data().len() {
        let orig = work.data()[idx];
        work.data_mut()[idx] = orig + eps;
        let plus = loss_fn(&work);
        work.data_mut()[idx] = orig - eps;
        let minus = loss_fn(&work);
        work.data_mut()[idx] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFiniteLoss {
                context: format!("finite differences at parameter index {idx}"),
            });
        }
        grad.data_mut()[idx] = (plus - minus) / (eps + eps);
    }
    Ok(grad)
}
