//! Adam with bias correction. Updates can ascend (discriminator) or descend
//! (generator and LSTM) the objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamHyper {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> AdamHyper {
        AdamHyper {
            lr,
            beta1,
            beta2,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment buffers for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub hyper: AdamHyper,
}

impl AdamState {
    pub fn new(numel: usize, hyper: AdamHyper) -> AdamState {
        AdamState {
            m: vec![0.0; numel],
            v: vec![0.0; numel],
            t: 0,
            hyper,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Ascend,
    Descend,
}

/// One Adam update in place. `Ascend` adds the step, `Descend` subtracts it.
pub fn adam_step(
    param: &mut Tensor,
    grad: &Tensor,
    state: &mut AdamState,
    direction: Direction,
) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::shape(format!(
            "adam gradient shape {:?} does not match parameter {:?}",
            grad.shape(),
            param.shape()
        )));
    }
    if state.m.len() != param.numel() {
        return Err(Error::shape(format!(
            "adam state sized for {} elements, parameter has {}",
            state.m.len(),
            param.numel()
        )));
    }
    state.t += 1;
    let h = state.hyper;
    let bc1 = 1.0 - h.beta1.powi(state.t as i32);
    let bc2 = 1.0 - h.beta2.powi(state.t as i32);
    let sign = match direction {
        Direction::Ascend => 1.0,
        Direction::Descend => -1.0,
    };
    for ((p, &g), (m, v)) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        *m = h.beta1 * *m + (1.0 - h.beta1) * g;
        *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p += sign * h.lr * m_hat / (v_hat.sqrt() + h.epsilon);
    }
    Ok(())
}

/// One Adam state per trainable tensor of a parameter group, in the group's
/// fixed enumeration order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamSet {
    pub states: Vec<AdamState>,
}

impl AdamSet {
    pub fn for_shapes(shapes: &[usize], hyper: AdamHyper) -> AdamSet {
        AdamSet {
            states: shapes.iter().map(|&n| AdamState::new(n, hyper)).collect(),
        }
    }

    pub fn for_params<'a, I>(params: I, hyper: AdamHyper) -> AdamSet
    where
        I: IntoIterator<Item = &'a Tensor>,
    {
        AdamSet {
            states: params
                .into_iter()
                .map(|t| AdamState::new(t.numel(), hyper))
                .collect(),
        }
    }
}
