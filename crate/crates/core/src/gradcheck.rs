//! Central finite-difference gradients, used as an oracle for the tape.
//!
//! Nothing here touches the backward pass: the function under test is only
//! ever evaluated forward.

use crate::tensor::Tensor;

/// Numerical gradient of `f` with respect to each tensor in `inputs`.
pub fn central_difference<F>(mut f: F, inputs: &[Tensor], step: f64) -> Vec<Tensor>
where
    F: FnMut(&[Tensor]) -> f64,
{
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[k].shape());
        for j in 0..inputs[k].len() {
            let orig = work[k].data()[j];
            work[k].data_mut()[j] = orig + step;
            let plus = f(&work);
            work[k].data_mut()[j] = orig - step;
            let minus = f(&work);
            work[k].data_mut()[j] = orig;
            grad.data_mut()[j] = (plus - minus) / (2.0 * step);
        }
        out.push(grad);
    }
    out
}

/// Relative error `|a − b| / max(|a|, |b|, floor)`; the floor keeps
/// near-zero gradients from producing huge ratios out of rounding noise.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest elementwise relative error between two gradient sets.
pub fn max_relative_error(analytic: &[Tensor], numeric: &[Tensor], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| {
            a.data()
                .iter()
                .zip(n.data())
                .map(move |(x, y)| relative_error(*x, *y, floor))
        })
        .fold(0.0, f64::max)
}
