//! Sparse dispatch: each expert runs once per batch on the tokens routed to it,
//! and its weighted output is scattered back. Experts are merged in index
//! order, which keeps the result deterministic.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::moe::expert::{expert_graph, ExpertParams, ExpertVars};
use crate::moe::gate::{gate_graph, GateNodes, GateOutput, GateParams, GateVars};
use crate::real::Real;
use crate::tensor::Tensor;

pub fn moe_graph<T: Real>(
    g: &mut Graph<T>,
    gate: &GateVars,
    experts: &[ExpertVars],
    x: Var,
    k: usize,
) -> Result<(Var, GateNodes)> {
    if experts.is_empty() {
        return Err(Error::Argument("an MoE layer needs at least one expert".into()));
    }
    let nodes = gate_graph(g, gate, x, k)?;
    if nodes.output.n_experts != experts.len() {
        return Err(Error::dim(
            "moe",
            &[nodes.output.n_experts],
            &[experts.len()],
        ));
    }
    let tokens = nodes.output.tokens();
    let mut y: Option<Var> = None;
    for (e, ev) in experts.iter().enumerate() {
        let rows = nodes.output.tokens_for(e);
        if rows.is_empty() {
            continue;
        }
        let xe = g.gather_rows(x, &rows)?;
        let ye = expert_graph(g, ev, xe)?;
        let coords: Vec<(usize, usize)> = rows.iter().map(|&t| (t, e)).collect();
        let w = g.pick(nodes.topk_probs, &coords)?;
        let weighted = g.scale_rows(ye, w)?;
        let placed = g.scatter_rows(weighted, &rows, tokens)?;
        y = Some(match y {
            None => placed,
            Some(acc) => g.add(acc, placed)?,
        });
    }
    Ok((y.expect("every token routes to k >= 1 experts"), nodes))
}

/// `y = Σ_i G_i(x)·E_i(x)` over each token's top-k experts.
pub fn moe_layer_forward<T: Real>(
    gate: &GateParams<T>,
    experts: &[ExpertParams<T>],
    x: &Tensor<T>,
    k: usize,
) -> Result<(Tensor<T>, GateOutput)> {
    let mut g = Graph::new();
    let gv = GateVars {
        w_gate: g.constant(gate.w_gate.clone()),
        w_noise: g.constant(gate.w_noise.clone()),
        gamma: g.constant(gate.gamma.clone()),
    };
    let evs: Vec<ExpertVars> = experts
        .iter()
        .map(|e| ExpertVars {
            w_in: g.constant(e.w_in.clone()),
            w_gateproj: g.constant(e.w_gateproj.clone()),
            w_out: g.constant(e.w_out.clone()),
        })
        .collect();
    let xv = g.constant(x.clone());
    let (y, nodes) = moe_graph(&mut g, &gv, &evs, xv, k)?;
    Ok((g.value(y).clone(), nodes.output))
}
