use super::{ModelState, Params};

/// SGD with momentum and L2 weight decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// Optimizer state for one learning step. Velocity buffers start at zero.
pub struct Sgd {
    config: SgdConfig,
    velocity: Params,
}

impl Sgd {
    pub fn new(config: SgdConfig, params: &Params) -> Self {
        Sgd {
            config,
            velocity: params.zeros_like(),
        }
    }

    /// `v ← μ·v + (g + λ·w)`, `w ← w − lr·v`. Extractor tensors are skipped
    /// entirely when the state is frozen.
    pub fn step(&mut self, state: &mut ModelState, grads: &Params) {
        let skip = if state.frozen_extractor {
            state.params.extractor_tensor_count()
        } else {
            0
        };
        let SgdConfig {
            learning_rate,
            momentum,
            weight_decay,
        } = self.config;
        let params = state.params.tensors_mut();
        let velocity = self.velocity.tensors_mut();
        for ((w, v), g) in params
            .into_iter()
            .zip(velocity)
            .zip(grads.tensors())
            .skip(skip)
        {
            for ((w, v), g) in w.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = momentum * *v + g + weight_decay * *w;
                *w -= learning_rate * *v;
            }
        }
    }
}
