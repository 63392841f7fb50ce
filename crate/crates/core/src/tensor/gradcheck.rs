use super::Tensor;
use crate::error::Result;
use crate::scalar::Scalar;

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error<T: Scalar>(analytic: T, numeric: T, floor: T) -> T {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Compares analytic gradients with central differences over every element of `params`.
///
/// `f` returns the objective and its analytic gradient (one buffer per parameter
/// tensor). It must be deterministic: any noise has to be frozen by the caller.
/// Returns the largest [`relative_error`] seen. `floor` bounds the denominator
/// so that gradients at round-off level do not dominate the result.
pub fn finite_difference_check<T, F>(mut f: F, params: &[Tensor<T>], step: T, floor: T) -> Result<T>
where
    T: Scalar,
    F: FnMut(&[Tensor<T>]) -> Result<(T, Vec<Vec<T>>)>,
{
    let (_, analytic) = f(params)?;
    let mut work: Vec<Tensor<T>> = params.to_vec();
    let two_h = step + step;
    let mut worst = T::zero();
    for (pi, grad) in analytic.iter().enumerate() {
        for ei in 0..work[pi].len() {
            let orig = work[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + step;
            let (plus, _) = f(&work)?;
            work[pi].data_mut()[ei] = orig - step;
            let (minus, _) = f(&work)?;
            work[pi].data_mut()[ei] = orig;
            let numeric = (plus - minus) / two_h;
            worst = worst.max(relative_error(grad[ei], numeric, floor));
        }
    }
    Ok(worst)
}
