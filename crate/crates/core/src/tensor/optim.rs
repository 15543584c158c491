use serde::{Deserialize, Serialize};

use super::{ParamGrads, ParamStore};
use crate::error::{dim_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            momentum: 0.9,
            weight_decay: 0.001,
        }
    }
}

/// Momentum buffers, one per parameter tensor of the store it was created for.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: SgdConfig,
    velocity: Vec<Vec<f32>>,
}

impl OptimizerState {
    pub fn new(config: SgdConfig, params: &ParamStore) -> Result<Self> {
        if !(config.learning_rate >= 0.0 && config.learning_rate.is_finite()) {
            return Err(Error::Parameter(format!(
                "learning rate must be finite and >= 0, got {}",
                config.learning_rate
            )));
        }
        Ok(Self {
            config,
            velocity: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        })
    }

    pub fn velocity(&self, index: usize) -> &[f32] {
        &self.velocity[index]
    }
}

/// One momentum-SGD update:
///
/// ```text
/// v <- momentum * v + (grad + weight_decay * param)
/// param <- param - lr * v
/// ```
///
/// Weight decay is skipped for parameters registered without decay (biases).
pub fn sgd_step(
    params: &mut ParamStore,
    grads: &ParamGrads,
    state: &mut OptimizerState,
) -> Result<()> {
    if grads.len() != params.len() || state.velocity.len() != params.len() {
        return Err(dim_err!(
            "sgd: {} params, {} grads, {} velocity buffers",
            params.len(),
            grads.len(),
            state.velocity.len()
        ));
    }
    let lr = state.config.learning_rate as f32;
    let mu = state.config.momentum as f32;
    let wd = state.config.weight_decay as f32;
    for (i, param) in params.iter_mut().enumerate() {
        let g = grads.get_index(i);
        let v = &mut state.velocity[i];
        if g.len() != param.value.len() || v.len() != param.value.len() {
            return Err(dim_err!(
                "sgd: gradient shape mismatch for `{}`",
                param.name
            ));
        }
        let decay = if param.decay { wd } else { 0.0 };
        for ((p, v), &g) in param
            .value
            .data_mut()
            .iter_mut()
            .zip(v.iter_mut())
            .zip(g.data())
        {
            *v = mu * *v + (g + decay * *p);
            *p -= lr * *v;
        }
    }
    Ok(())
}
