use serde::{Deserialize, Serialize};

use super::{NumericError, Parameter, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers, one pair per parameter (aligned by position).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }
}

/// One bias-corrected Adam update. `grads[i]` pairs with `params[i]`; frozen
/// parameters are skipped and a missing gradient counts as zero.
pub fn adam_step(
    params: &mut [Parameter],
    grads: &[Option<Tensor>],
    state: &mut AdamState,
) -> Result<(), NumericError> {
    if params.len() != grads.len() {
        return Err(NumericError::ShapeMismatch {
            op: "adam_step",
            detail: format!("{} parameters, {} gradients", params.len(), grads.len()),
        });
    }
    if state.moments.is_empty() {
        state.moments = vec![None; params.len()];
    } else if state.moments.len() != params.len() {
        return Err(NumericError::ShapeMismatch {
            op: "adam_step",
            detail: format!(
                "state tracks {} parameters, got {}",
                state.moments.len(),
                params.len()
            ),
        });
    }
    for (param, grad) in params.iter().zip(grads) {
        if let Some(g) = grad {
            if g.shape() != param.value.shape() {
                return Err(NumericError::ShapeMismatch {
                    op: "adam_step",
                    detail: format!(
                        "{}: param {:?}, grad {:?}",
                        param.name,
                        param.value.shape(),
                        g.shape()
                    ),
                });
            }
        }
    }

    state.step += 1;
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        eps,
    } = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);

    for ((param, grad), slot) in params.iter_mut().zip(grads).zip(state.moments.iter_mut()) {
        if !param.requires_grad {
            continue;
        }
        let n = param.value.len();
        let (m, v) = slot.get_or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        let mut data = param.value.to_vec();
        for i in 0..n {
            let g = grad.as_ref().map_or(0.0, |g| g.data()[i]);
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= learning_rate * m_hat / (v_hat.sqrt() + eps);
        }
        param.value = Tensor::from_parts(param.value.shape().to_vec(), data);
    }
    Ok(())
}
