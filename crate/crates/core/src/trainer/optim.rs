//! SGD with Nesterov momentum, weight decay and polynomial learning-rate decay.

use crate::diffcore::Parameter;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimError {
    #[error("non-finite gradient {value} for parameter {index}")]
    NonFiniteGradient { index: usize, value: f64 },
    #[error("iteration {iter} is past max_iter {max_iter}")]
    PastEnd { iter: usize, max_iter: usize },
    #[error("expected {expected} parameters, got {got}")]
    Count { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<f64>,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub power: f64,
    pub max_iter: usize,
}

impl OptimizerState {
    pub fn new(num_params: usize, max_iter: usize) -> Self {
        Self {
            velocity: vec![0.0; num_params],
            base_lr: 2.5e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            power: 0.9,
            max_iter,
        }
    }
}

/// `base_lr · (1 − iter/max_iter)^power`.
pub fn lr_at(state: &OptimizerState, iter: usize) -> f64 {
    if iter >= state.max_iter {
        return 0.0;
    }
    state.base_lr * (1.0 - iter as f64 / state.max_iter as f64).powf(state.power)
}

/// One update using each parameter's `grad`:
///
/// ```text
/// g ← g + wd·p        (non-exempt only)
/// v ← μ·v + g
/// p ← p − lr·(g + μ·v)
/// ```
///
/// Parameters are matched to velocities by position. Nothing is modified
/// when any gradient is non-finite. Returns the learning rate used.
pub fn sgd_step<'a>(
    params: impl IntoIterator<Item = &'a mut Parameter>,
    state: &mut OptimizerState,
    iter: usize,
) -> Result<f64, OptimError> {
    if iter > state.max_iter {
        return Err(OptimError::PastEnd {
            iter,
            max_iter: state.max_iter,
        });
    }
    let params: Vec<&mut Parameter> = params.into_iter().collect();
    if params.len() != state.velocity.len() {
        return Err(OptimError::Count {
            expected: state.velocity.len(),
            got: params.len(),
        });
    }
    if let Some((index, p)) = params.iter().enumerate().find(|(_, p)| !p.grad.is_finite()) {
        return Err(OptimError::NonFiniteGradient { index, value: p.grad });
    }
    let lr = lr_at(state, iter);
    let (mu, wd) = (state.momentum, state.weight_decay);
    for (p, v) in params.into_iter().zip(state.velocity.iter_mut()) {
        let mut g = p.grad;
        if !p.decay_exempt {
            g += wd * p.value;
        }
        *v = mu * *v + g;
        p.value -= lr * (g + mu * *v);
    }
    Ok(lr)
}
