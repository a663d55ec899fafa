//! Stochastic gradient descent with classic momentum; weight decay is folded
//! into the gradient before the velocity update.

use crate::error::{Error, Result};
use crate::num::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct SgdState {
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<Tensor>,
}

impl SgdState {
    /// Velocities start at zero, one per parameter tensor.
    pub fn new(
        learning_rate: f32,
        momentum: f32,
        weight_decay: f32,
        params: &[Tensor],
    ) -> Result<Self> {
        let velocity = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Self::from_parts(learning_rate, momentum, weight_decay, velocity)
    }

    /// Rebuild from checkpointed velocities.
    pub fn from_parts(
        learning_rate: f32,
        momentum: f32,
        weight_decay: f32,
        velocity: Vec<Tensor>,
    ) -> Result<Self> {
        if !learning_rate.is_finite() || learning_rate < 0.0 {
            return Err(Error::data(format!("learning rate must be finite and >= 0, got {learning_rate}")));
        }
        if !momentum.is_finite() || !(0.0..1.0).contains(&momentum) {
            return Err(Error::data(format!("momentum must be in [0, 1), got {momentum}")));
        }
        if !weight_decay.is_finite() || weight_decay < 0.0 {
            return Err(Error::data(format!("weight decay must be finite and >= 0, got {weight_decay}")));
        }
        Ok(Self { learning_rate, momentum, weight_decay, velocity })
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }
}

/// One update: g' = g + wd*p, v = m*v + g', p = p - lr*v.
pub fn sgd_step(params: &mut [Tensor], grads: &[Tensor], state: &mut SgdState) -> Result<()> {
    let mut param_refs: Vec<&mut Tensor> = params.iter_mut().collect();
    let grad_refs: Vec<&Tensor> = grads.iter().collect();
    sgd_step_refs(&mut param_refs, &grad_refs, state)
}

/// Same update over borrowed tensors, for parameters that live in different
/// structs (backbone weights alongside the cluster bank).
pub fn sgd_step_refs(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut SgdState,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::data(format!(
            "sgd_step wants matching lists, got {} params, {} grads, {} velocities",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    let (lr, m, wd) = (state.learning_rate, state.momentum, state.weight_decay);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::data(format!(
                "sgd_step shape mismatch: param {:?}, grad {:?}, velocity {:?}",
                p.shape(),
                g.shape(),
                v.shape()
            )));
        }
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            let g_decayed = gv + wd * *pv;
            *vv = m * *vv + g_decayed;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}
