//! Central finite-difference gradient oracle.
//!
//! Re-evaluates a scalar function under elementwise perturbations of its
//! inputs; it never touches the tape's backward pass, so it stays an
//! independent check of it.

use ndarray::ArrayD;

use super::Scalar;

/// Central-difference gradient of `f` w.r.t. every element of every input.
pub fn central_difference<F, Func>(f: Func, inputs: &[ArrayD<F>], eps: F) -> Vec<ArrayD<F>>
where
    F: Scalar,
    Func: Fn(&[ArrayD<F>]) -> F,
{
    let mut grads = Vec::with_capacity(inputs.len());
    for (i, input) in inputs.iter().enumerate() {
        let mut grad = ArrayD::<F>::zeros(input.raw_dim());
        for (idx, g) in grad.indexed_iter_mut() {
            let mut plus = inputs.to_vec();
            plus[i][&idx] = plus[i][&idx] + eps;
            let mut minus = inputs.to_vec();
            minus[i][&idx] = minus[i][&idx] - eps;
            let two = F::from_f64(2.0);
            *g = (f(&plus) - f(&minus)) / (two * eps);
        }
        grads.push(grad);
    }
    grads
}

/// Largest relative elementwise deviation between `analytic` and `numeric`,
/// with an absolute floor so near-zero entries do not blow up the ratio.
pub fn max_relative_error<F: Scalar>(analytic: &ArrayD<F>, numeric: &ArrayD<F>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    let floor = 1e-6;
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| {
            let (a, n) = (a.to_f64(), n.to_f64());
            (a - n).abs() / a.abs().max(n.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}
