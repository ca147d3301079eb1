//! Central-difference gradient checking.
//!
//! The checker is the independent oracle for every backward rule: it never
//! goes through [`Tape::backward`] for the numeric side, only for the
//! analytic one.

use super::{Tape, Tensor, TensorId};
use crate::error::{Error, Result};

/// Relative disagreement between two gradient estimates, floored so that
/// near-zero gradients compare absolutely.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compares the backward-mode gradient of `f` at `point` against central
/// finite differences `(f(x+eps e_i) - f(x-eps e_i)) / (2 eps)` per element.
/// Returns the maximum relative error over all elements.
pub fn finite_diff_check<F>(f: F, point: &Tensor, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape, TensorId) -> Result<TensorId>,
{
    if epsilon <= 0.0 {
        return Err(Error::arg(format!("epsilon must be positive, got {epsilon}")));
    }
    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf_tensor(t, false);
        let y = f(&mut tape, x)?;
        if tape.value(y).len() != 1 {
            return Err(Error::shape("finite_diff_check needs a scalar function"));
        }
        Ok(tape.value(y)[0])
    };

    // Analytic gradient.
    let mut tape = Tape::new();
    let x = tape.leaf_tensor(point, true);
    let y = f(&mut tape, x)?;
    let grads = tape.backward(y)?;
    let analytic = grads.dense(x, point.shape());

    let mut max_err: f64 = 0.0;
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + epsilon;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - epsilon;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * epsilon);
        max_err = max_err.max(rel_err(analytic.data()[i], numeric));
    }
    Ok(max_err)
}

/// Multi-parameter variant: checks the gradient of a scalar function of
/// several leaves, returning the worst relative error over every element of
/// every parameter.
pub fn finite_diff_check_params<F>(f: F, params: &[Tensor], epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    if epsilon <= 0.0 {
        return Err(Error::arg(format!("epsilon must be positive, got {epsilon}")));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = ps.iter().map(|p| tape.leaf_tensor(p, false)).collect();
        let y = f(&mut tape, &ids)?;
        Ok(tape.value(y)[0])
    };

    let mut tape = Tape::new();
    let ids: Vec<TensorId> = params.iter().map(|p| tape.leaf_tensor(p, true)).collect();
    let y = f(&mut tape, &ids)?;
    if tape.value(y).len() != 1 {
        return Err(Error::shape("finite_diff_check needs a scalar function"));
    }
    let grads = tape.backward(y)?;

    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_err: f64 = 0.0;
    for (pi, param) in params.iter().enumerate() {
        let analytic = grads.dense(ids[pi], param.shape());
        for i in 0..param.numel() {
            let orig = work[pi].data()[i];
            work[pi].data_mut()[i] = orig + epsilon;
            let fp = eval(&work)?;
            work[pi].data_mut()[i] = orig - epsilon;
            let fm = eval(&work)?;
            work[pi].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * epsilon);
            max_err = max_err.max(rel_err(analytic.data()[i], numeric));
        }
    }
    Ok(max_err)
}
