//! Finite-difference gradient verification.
//!
//! The oracle only ever evaluates the forward pass, so it is independent
//! of every VJP it certifies.

use super::tape::{NodeId, Tape};
use super::{Scalar, Tensor};
use crate::error::Result;

/// Relative error between analytic and numeric gradients:
/// `max_i |a_i - n_i| / max(1, |a_i|)`.
pub fn rel_error<T: Scalar>(analytic: &[T], numeric: &[T]) -> f64 {
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| {
            let a = a.as_f64();
            let n = n.as_f64();
            (a - n).abs() / f64::max(1.0, a.abs())
        })
        .fold(0.0, f64::max)
}

/// Check the gradients of a scalar-valued tensor function against central
/// differences.
///
/// `f` receives a fresh tape and the node ids of `inputs` (registered in
/// order, all differentiation targets) and must return the scalar loss
/// node. Returns the max relative error over all input components.
pub fn grad_check<T, F>(f: F, inputs: &[Tensor<T>], epsilon: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[NodeId]) -> Result<NodeId>,
{
    // Analytic gradients.
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.input(t, true)).collect();
    let loss = f(&mut tape, &ids)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<T>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| tape.grad(id).map_or_else(|| vec![T::zero(); t.numel()], |g| g.to_vec()))
        .collect();

    let eval = |perturbed: &[Tensor<T>]| -> Result<T> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = perturbed.iter().map(|t| tape.input(t, false)).collect();
        let loss = f(&mut tape, &ids)?;
        Ok(tape.scalar_value(loss))
    };

    let eps = T::from_f64(epsilon);
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    let mut max_err = 0.0f64;
    for (k, grad) in analytic.iter().enumerate() {
        for (i, &a) in grad.iter().enumerate() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus).as_f64() / (2.0 * epsilon);
            let a = a.as_f64();
            let err = (a - numeric).abs() / f64::max(1.0, a.abs());
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}
