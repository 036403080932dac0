//! Auxiliary load-balance loss `L_a = α·N·Σ f_i·P_i`.
//!
//! `f_i` is the fraction of tokens whose most probable expert is `i` (top-1,
//! even when routing selects two), and `P_i` the mean router probability of
//! expert `i`. Only `P` carries gradient; `f` is a count.

use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Graph, Var};
use crate::error::{Error, Result};
use crate::moe::gate::GateOutput;
use crate::real::Real;
use crate::tensor::Tensor;

pub const DEFAULT_ALPHA: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceStats {
    pub f: Vec<f64>,
    #[serde(rename = "P")]
    pub p: Vec<f64>,
    pub loss: f64,
    pub alpha: f64,
    pub token_count: usize,
}

impl BalanceStats {
    /// Top-1 routed token counts per expert.
    pub fn top1_counts(&self) -> Vec<u64> {
        self.f
            .iter()
            .map(|&f| (f * self.token_count as f64).round() as u64)
            .collect()
    }
}

pub fn balance_loss(gate_out: &GateOutput, alpha: f64) -> Result<BalanceStats> {
    let t = gate_out.tokens();
    if t == 0 {
        return Err(Error::EmptyBatch);
    }
    let n = gate_out.n_experts;
    let mut counts = vec![0usize; n];
    let mut p = vec![0.0; n];
    for tok in 0..t {
        let row = gate_out.probs_row(tok);
        counts[kernels::argmax(row)] += 1;
        for (acc, &v) in p.iter_mut().zip(row) {
            *acc += v;
        }
    }
    let inv_t = 1.0 / t as f64;
    let f: Vec<f64> = counts.iter().map(|&c| c as f64 * inv_t).collect();
    p.iter_mut().for_each(|v| *v *= inv_t);
    let loss = alpha * n as f64 * f.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>();
    Ok(BalanceStats {
        f,
        p,
        loss,
        alpha,
        token_count: t,
    })
}

/// Records `L_a` in the graph with `f` held constant.
pub fn balance_graph<T: Real>(
    g: &mut Graph<T>,
    full_probs: Var,
    gate_out: &GateOutput,
    alpha: f64,
) -> Result<(Var, BalanceStats)> {
    let stats = balance_loss(gate_out, alpha)?;
    let mean_p = g.mean_rows(full_probs);
    let f = g.constant(Tensor::vector(stats.f.iter().map(|&v| T::of(v)).collect()));
    let fp = g.mul(mean_p, f)?;
    let s = g.sum(fp);
    let loss = g.scale(s, T::of(alpha * gate_out.n_experts as f64));
    Ok((loss, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gate_from_probs(n: usize, probs: Vec<f64>) -> GateOutput {
        let t = probs.len() / n;
        GateOutput {
            n_experts: n,
            top_k: 1,
            topk_indices: (0..t)
                .map(|i| vec![kernels::argmax(&probs[i * n..(i + 1) * n])])
                .collect(),
            topk_weights: vec![vec![1.0]; t],
            logits: probs.iter().map(|p| p.ln()).collect(),
            full_probs: probs,
        }
    }

    #[test]
    fn total_collapse_gives_alpha_times_n() {
        let n = 4;
        let mut probs = Vec::new();
        for _ in 0..6 {
            probs.extend([1.0, 0.0, 0.0, 0.0]);
        }
        let s = balance_loss(&gate_from_probs(n, probs), 0.01).unwrap();
        assert_eq!(s.f, vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(s.p, vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(s.loss, 0.01 * 4.0);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let g = gate_from_probs(4, vec![]);
        assert!(matches!(balance_loss(&g, 0.01), Err(Error::EmptyBatch)));
    }

    #[test]
    fn argmax_ties_go_to_lowest_index() {
        let s = balance_loss(&gate_from_probs(2, vec![0.5, 0.5]), 1.0).unwrap();
        assert_eq!(s.f, vec![1.0, 0.0]);
    }
}
