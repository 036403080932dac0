//! Binding persistent parameters into a per-step [`Graph`].

use crate::autodiff::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// A fixed-order collection of trainable tensors.
///
/// `tensors` and `tensors_mut` must list the same tensors in the same order;
/// that order is also the checkpoint order.
pub trait ParamTree<T: Real> {
    fn tensors(&self) -> Vec<&Tensor<T>>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>>;

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    /// Records every tensor as a trainable leaf, in `tensors()` order.
    fn bind_leaves(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.tensors()
            .into_iter()
            .map(|t| g.leaf(t.clone().requires_grad()))
            .collect()
    }

    /// Adds the graph gradients of `vars` (as returned by `bind_leaves`) into
    /// the persistent tensors.
    fn absorb_grads(&mut self, g: &Graph<T>, vars: &[Var]) {
        for (t, &v) in self.tensors_mut().into_iter().zip(vars) {
            if let Some(grad) = g.grad(v) {
                t.accumulate_grad(grad);
            }
        }
    }

    fn zero_grads(&mut self) {
        for t in self.tensors_mut() {
            t.zero_grad();
        }
    }
}
