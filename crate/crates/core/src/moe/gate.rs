//! Top-k gate with a softplus/RMSNorm data-dependent offset.
//!
//! For a token `x` the gate logits are
//! `H(x) = x·W_g + rmsnorm(softplus(x·W_n))`, where the RMSNorm runs over the
//! token's N-vector with a single learnable coefficient. Combination weights
//! are the softmax of `H` after all but the `k` largest logits are masked.

use rand::Rng;

use crate::autodiff::{kernels, Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamTree;
use crate::real::Real;
use crate::tensor::Tensor;

pub const RMS_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct GateParams<T: Real = f32> {
    /// `[d_model × N]`
    pub w_gate: Tensor<T>,
    /// `[d_model × N]`
    pub w_noise: Tensor<T>,
    /// Shared RMSNorm coefficient, shape `[1]`.
    pub gamma: Tensor<T>,
}

impl<T: Real> GateParams<T> {
    pub fn init<R: Rng + ?Sized>(d_model: usize, n_experts: usize, rng: &mut R) -> Self {
        Self {
            w_gate: Tensor::randn(&[d_model, n_experts], INIT_STD, rng),
            w_noise: Tensor::randn(&[d_model, n_experts], INIT_STD, rng),
            gamma: Tensor::scalar(T::one()),
        }
    }

    pub fn new(w_gate: Tensor<T>, w_noise: Tensor<T>, gamma: T) -> Result<Self> {
        if w_gate.shape() != w_noise.shape() || w_gate.shape().len() != 2 {
            return Err(Error::dim("gate", w_gate.shape(), w_noise.shape()));
        }
        if w_gate.shape()[1] < 2 {
            return Err(Error::Config("a gate needs at least two experts".into()));
        }
        Ok(Self {
            w_gate,
            w_noise,
            gamma: Tensor::scalar(gamma),
        })
    }

    pub fn n_experts(&self) -> usize {
        self.w_gate.shape()[1]
    }

    pub fn d_model(&self) -> usize {
        self.w_gate.shape()[0]
    }

    pub fn bind(&self, g: &mut Graph<T>) -> GateVars {
        GateVars::from_slice(&self.bind_leaves(g))
    }
}

impl<T: Real> ParamTree<T> for GateParams<T> {
    fn tensors(&self) -> Vec<&Tensor<T>> {
        vec![&self.w_gate, &self.w_noise, &self.gamma]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.w_gate, &mut self.w_noise, &mut self.gamma]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GateVars {
    pub w_gate: Var,
    pub w_noise: Var,
    pub gamma: Var,
}

impl GateVars {
    pub fn from_slice(v: &[Var]) -> Self {
        Self {
            w_gate: v[0],
            w_noise: v[1],
            gamma: v[2],
        }
    }

    pub fn all(&self) -> Vec<Var> {
        vec![self.w_gate, self.w_noise, self.gamma]
    }
}

/// Per-token routing decision. Matrices are flattened row-major `[T × N]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateOutput {
    pub n_experts: usize,
    pub top_k: usize,
    /// Selected experts per token, highest logit first.
    pub topk_indices: Vec<Vec<usize>>,
    /// Combination weights aligned with `topk_indices`.
    pub topk_weights: Vec<Vec<f64>>,
    /// Unmasked softmax of the logits.
    pub full_probs: Vec<f64>,
    pub logits: Vec<f64>,
}

impl GateOutput {
    pub fn tokens(&self) -> usize {
        self.topk_indices.len()
    }

    pub fn probs_row(&self, t: usize) -> &[f64] {
        &self.full_probs[t * self.n_experts..(t + 1) * self.n_experts]
    }

    /// Dense `[T × N]` combination weights with zeros outside the top-k.
    pub fn dense_weights(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.tokens() * self.n_experts];
        for (t, (idx, wt)) in self.topk_indices.iter().zip(&self.topk_weights).enumerate() {
            for (&e, &v) in idx.iter().zip(wt) {
                w[t * self.n_experts + e] = v;
            }
        }
        w
    }

    /// Tokens that selected expert `e`, ascending.
    pub fn tokens_for(&self, e: usize) -> Vec<usize> {
        self.topk_indices
            .iter()
            .enumerate()
            .filter(|(_, idx)| idx.contains(&e))
            .map(|(t, _)| t)
            .collect()
    }
}

/// Graph nodes produced by the gate.
#[derive(Debug, Clone)]
pub struct GateNodes {
    pub logits: Var,
    /// `[T × N]` unmasked probabilities.
    pub full_probs: Var,
    /// `[T × N]` masked softmax: non-zero only on each token's top-k.
    pub topk_probs: Var,
    pub output: GateOutput,
}

pub fn gate_graph<T: Real>(g: &mut Graph<T>, p: &GateVars, x: Var, k: usize) -> Result<GateNodes> {
    let clean = g.matmul(x, p.w_gate)?;
    let raw_noise = g.matmul(x, p.w_noise)?;
    let soft = g.softplus(raw_noise);
    let noise = g.rmsnorm(soft, p.gamma, RMS_EPS)?;
    let logits = g.add(clean, noise)?;
    let full_probs = g.softmax(logits)?;
    let masked = g.keep_topk(logits, k)?;
    let topk_probs = g.softmax(masked)?;

    let (_, n) = g.value(logits).dims2();
    let logit_vals = g.values(logits);
    let masked_probs = g.values(topk_probs);
    let mut topk_indices = Vec::new();
    let mut topk_weights = Vec::new();
    for (row, prow) in logit_vals.chunks(n).zip(masked_probs.chunks(n)) {
        let idx = kernels::topk_indices(row, k);
        topk_weights.push(idx.iter().map(|&e| prow[e].as_f64()).collect());
        topk_indices.push(idx);
    }
    let output = GateOutput {
        n_experts: n,
        top_k: k,
        topk_indices,
        topk_weights,
        full_probs: g.values(full_probs).iter().map(|v| v.as_f64()).collect(),
        logits: logit_vals.iter().map(|v| v.as_f64()).collect(),
    };
    Ok(GateNodes {
        logits,
        full_probs,
        topk_probs,
        output,
    })
}

/// Evaluates the gate on `x[T × d_model]`.
pub fn gate_forward<T: Real>(params: &GateParams<T>, x: &Tensor<T>, k: usize) -> Result<GateOutput> {
    let mut g = Graph::new();
    let vars = GateVars {
        w_gate: g.constant(params.w_gate.clone()),
        w_noise: g.constant(params.w_noise.clone()),
        gamma: g.constant(params.gamma.clone()),
    };
    let x = g.constant(x.clone());
    Ok(gate_graph(&mut g, &vars, x, k)?.output)
}
