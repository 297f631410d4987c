//! Finite-difference gradient checking.

use rand::seq::index::sample;
use rand::Rng;

use super::{Graph, ParamStore, Tensor, Var};
use crate::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct CheckConfig {
    pub eps: f64,
    /// Coordinates sampled per tensor; tensors at most this large are checked exhaustively.
    pub coords_per_tensor: usize,
    /// Gradients smaller than this times `max(1, |loss|)` are compared in absolute terms,
    /// so round-off in the differences of a large loss does not count against exact zeros.
    pub floor: f64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig { eps: 1e-5, coords_per_tensor: 12, floor: 1e-6 }
    }
}

/// Reverse-mode gradients of `loss` for every parameter.
pub fn analytic_grads<T, F>(store: &mut ParamStore<T>, loss: &mut F) -> Vec<Tensor<T>>
where
    T: Scalar,
    F: FnMut(&mut Graph<T>, &ParamStore<T>) -> Var,
{
    store.zero_grads();
    let mut g = Graph::new();
    let out = loss(&mut g, store);
    let grads = g.backward(out);
    g.accumulate_param_grads(&grads, store);
    store.ids().map(|id| store.grad(id).clone()).collect()
}

/// Largest relative error between `grads` and central differences of `loss`.
pub fn compare_numeric<T, F, R>(
    store: &mut ParamStore<T>,
    loss: &mut F,
    grads: &[Tensor<T>],
    cfg: CheckConfig,
    rng: &mut R,
) -> f64
where
    T: Scalar,
    F: FnMut(&mut Graph<T>, &ParamStore<T>) -> Var,
    R: Rng + ?Sized,
{
    let mut eval = |store: &ParamStore<T>| {
        let mut g = Graph::new();
        let out = loss(&mut g, store);
        g.value(out).item().f64()
    };
    let floor = cfg.floor * eval(store).abs().max(1.0);
    let mut worst = 0.0f64;
    let ids: Vec<_> = store.ids().collect();
    for (id, grad) in ids.into_iter().zip(grads) {
        let n = store.value(id).len();
        let coords: Vec<usize> = if n <= cfg.coords_per_tensor {
            (0..n).collect()
        } else {
            sample(rng, n, cfg.coords_per_tensor).into_vec()
        };
        for c in coords {
            let orig = store.value(id).data()[c];
            store.value_mut(id).data_mut()[c] = T::of(orig.f64() + cfg.eps);
            let plus = eval(store);
            store.value_mut(id).data_mut()[c] = T::of(orig.f64() - cfg.eps);
            let minus = eval(store);
            store.value_mut(id).data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let analytic = grad.data()[c].f64();
            let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(floor);
            if err > worst {
                log::debug!("{}[{c}]: analytic {analytic:e} numeric {numeric:e}", store.name(id));
            }
            worst = worst.max(err);
        }
    }
    worst
}

/// Max relative error of reverse-mode gradients against central differences.
pub fn finite_diff_check<T, F, R>(store: &mut ParamStore<T>, mut loss: F, cfg: CheckConfig, rng: &mut R) -> f64
where
    T: Scalar,
    F: FnMut(&mut Graph<T>, &ParamStore<T>) -> Var,
    R: Rng + ?Sized,
{
    let grads = analytic_grads(store, &mut loss);
    compare_numeric(store, &mut loss, &grads, cfg, rng)
}
