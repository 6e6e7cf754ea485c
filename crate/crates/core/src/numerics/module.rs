use super::{Graph, Real, Tensor};

/// A container of named trainable tensors. `params` and `params_mut` must
/// visit tensors in the same order.
pub trait Module<T: Real> {
    fn params(&self) -> Vec<(String, &Tensor<T>)>;
    fn params_mut(&mut self) -> Vec<&mut Tensor<T>>;
}

pub fn param_count<T: Real, M: Module<T> + ?Sized>(m: &M) -> usize {
    m.params().iter().map(|(_, t)| t.numel()).sum()
}

pub fn zero_grads<T: Real, M: Module<T> + ?Sized>(m: &mut M) {
    m.params_mut().into_iter().for_each(|p| p.zero_grad());
}

/// Adds the gradients recorded on `g` into each parameter's grad buffer.
/// Returns the number of parameters that received a gradient.
pub fn accumulate_grads<T: Real, M: Module<T> + ?Sized>(m: &mut M, g: &Graph<T>) -> usize {
    let mut hits = 0;
    for p in m.params_mut() {
        if let Some(grad) = g.param_grad(p) {
            let grad = grad.to_vec();
            p.accumulate_grad(&grad);
            hits += 1;
        }
    }
    hits
}

/// Copies parameter values from `src` into `dst` (same architecture).
pub fn copy_params<T: Real, M: Module<T> + ?Sized>(dst: &mut M, src: &M) {
    let values: Vec<Vec<T>> = src.params().iter().map(|(_, t)| t.data().to_vec()).collect();
    for (p, v) in dst.params_mut().into_iter().zip(values) {
        p.data_mut().copy_from_slice(&v);
    }
}

/// Prefixes every name of a sub-module's parameter list.
pub fn prefixed<'a, T: Real>(prefix: &str, params: Vec<(String, &'a Tensor<T>)>) -> Vec<(String, &'a Tensor<T>)> {
    params.into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)).collect()
}
