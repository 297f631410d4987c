use serde::{Deserialize, Serialize};

use super::{ParamStore, ShapeError, Tensor};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. The learning rate is passed per step so schedules live outside.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || store.ids().map(|id| Tensor::zeros(store.value(id).rows(), store.value(id).cols())).collect();
        Adam { config, step: 0, m: zeros(), v: zeros() }
    }

    /// Applies one update from the gradients held in `store`.
    pub fn update(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<(), ShapeError> {
        if self.m.len() != store.len() {
            return Err(ShapeError(format!("optimizer tracks {} tensors, store has {}", self.m.len(), store.len())));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let (b1, b2, eps) = (T::of(beta1), T::of(beta2), T::of(eps));
        let step_size = T::of(lr / c1);
        let c2_sqrt = T::of(c2.sqrt());
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            if !store.value(id).same_shape(&self.m[i]) {
                return Err(ShapeError(format!("moment shape mismatch for {}", store.name(id))));
            }
            let grad = store.grad(id).data().to_vec();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let value = store.value_mut(id).data_mut();
            for j in 0..grad.len() {
                let g = grad[j];
                m[j] = b1 * m[j] + (T::one() - b1) * g;
                v[j] = b2 * v[j] + (T::one() - b2) * g * g;
                value[j] -= step_size * m[j] / (v[j].sqrt() / c2_sqrt + eps);
            }
        }
        Ok(())
    }
}
