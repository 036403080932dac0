use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::moe::gate::INIT_STD;
use crate::params::ParamTree;
use crate::real::Real;
use crate::tensor::Tensor;

/// Gated-linear feed-forward expert without biases:
/// `(silu(x·w_in) ⊙ (x·w_gateproj))·w_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertParams<T: Real = f32> {
    /// `[d_model × hidden]`
    pub w_in: Tensor<T>,
    /// `[d_model × hidden]`
    pub w_gateproj: Tensor<T>,
    /// `[hidden × d_model]`
    pub w_out: Tensor<T>,
    pub hidden_size: usize,
}

impl<T: Real> ExpertParams<T> {
    pub fn init<R: Rng + ?Sized>(d_model: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            w_in: Tensor::randn(&[d_model, hidden], INIT_STD, rng),
            w_gateproj: Tensor::randn(&[d_model, hidden], INIT_STD, rng),
            w_out: Tensor::randn(&[hidden, d_model], INIT_STD, rng),
            hidden_size: hidden,
        }
    }

    pub fn zeros(d_model: usize, hidden: usize) -> Self {
        Self {
            w_in: Tensor::zeros(&[d_model, hidden]),
            w_gateproj: Tensor::zeros(&[d_model, hidden]),
            w_out: Tensor::zeros(&[hidden, d_model]),
            hidden_size: hidden,
        }
    }

    pub fn d_model(&self) -> usize {
        self.w_in.shape()[0]
    }

    pub fn bind(&self, g: &mut Graph<T>) -> ExpertVars {
        ExpertVars::from_slice(&self.bind_leaves(g))
    }
}

impl<T: Real> ParamTree<T> for ExpertParams<T> {
    fn tensors(&self) -> Vec<&Tensor<T>> {
        vec![&self.w_in, &self.w_gateproj, &self.w_out]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.w_in, &mut self.w_gateproj, &mut self.w_out]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ExpertVars {
    pub w_in: Var,
    pub w_gateproj: Var,
    pub w_out: Var,
}

impl ExpertVars {
    pub fn from_slice(v: &[Var]) -> Self {
        Self {
            w_in: v[0],
            w_gateproj: v[1],
            w_out: v[2],
        }
    }

    pub fn all(&self) -> Vec<Var> {
        vec![self.w_in, self.w_gateproj, self.w_out]
    }
}

pub fn expert_graph<T: Real>(g: &mut Graph<T>, e: &ExpertVars, x: Var) -> Result<Var> {
    let up = g.matmul(x, e.w_in)?;
    let act = g.silu(up);
    let gate = g.matmul(x, e.w_gateproj)?;
    let hidden = g.mul(act, gate)?;
    g.matmul(hidden, e.w_out)
}

pub fn expert_forward<T: Real>(e: &ExpertParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let vars = ExpertVars {
        w_in: g.constant(e.w_in.clone()),
        w_gateproj: g.constant(e.w_gateproj.clone()),
        w_out: g.constant(e.w_out.clone()),
    };
    let x = g.constant(x.clone());
    let y = expert_graph(&mut g, &vars, x)?;
    Ok(g.value(y).clone())
}

/// Total expert parameters: `Σ 3·d_model·hidden`.
pub fn count_parameters<T: Real>(experts: &[ExpertParams<T>]) -> usize {
    experts.iter().map(|e| 3 * e.d_model() * e.hidden_size).sum()
}

/// Same count from sizes alone, without materializing weights.
pub fn count_parameters_for_sizes(d_model: usize, sizes: &[usize]) -> usize {
    sizes.iter().map(|&h| 3 * d_model * h).sum()
}
