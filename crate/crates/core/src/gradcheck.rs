//! Finite-difference verification of the analytic gradients in 64-bit.
//!
//! Each case reduces its output to a scalar through a fixed random
//! projection, then compares the backward pass with central differences.
//! The error of one input tensor is `‖a − n‖ / max(‖a‖, ‖n‖)`; a suite reports
//! its worst case.

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Graph, Var};
use crate::balance::balance_graph;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::moe::expert::{ExpertParams, ExpertVars};
use crate::moe::gate::{gate_graph, GateVars};
use crate::moe::layer::moe_graph;
use crate::moe::pairing::ExpertRatios;
use crate::params::ParamTree;
use crate::rng;
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Micro,
    Small,
}

impl std::str::FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "micro" => Ok(Scale::Micro),
            "small" => Ok(Scale::Small),
            _ => Err(Error::Config(format!("unknown scale {s:?} (micro, small)"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    pub scale: Scale,
    pub seed: u64,
    /// Perturbs every analytic gradient; a passing run must then fail.
    pub corrupt: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            scale: Scale::Micro,
            seed: 0,
            corrupt: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub cases: usize,
    pub worst_rel_err: f64,
    pub tolerance: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.worst_rel_err <= self.tolerance
    }
}

impl fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<8} {:<6} cases={:<3} worst_rel_err={:.3e} tol={:.0e}",
            self.name,
            if self.passed() { "ok" } else { "FAIL" },
            self.cases,
            self.worst_rel_err,
            self.tolerance
        )
    }
}

/// Central differences of `f` with respect to every element of `x`.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor<f64>) -> f64, x: &Tensor<f64>, h: f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.numel())
        .map(|i| {
            let orig = probe.values()[i];
            probe.values_mut()[i] = orig + h;
            let up = f(&probe);
            probe.values_mut()[i] = orig - h;
            let down = f(&probe);
            probe.values_mut()[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

fn corrupt(grad: &mut [f64]) {
    for (i, g) in grad.iter_mut().enumerate() {
        *g = *g * 1.05 + if i == 0 { 1e-3 } else { 0.0 };
    }
}

type Build<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

/// Worst error over all inputs of one case. Output is reduced with a random
/// projection so every output element matters.
fn check_case(inputs: &[Tensor<f64>], build: &Build, rng: &mut ChaCha8Rng, poison: bool) -> Result<f64> {
    let probe_out = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        g.value(out).shape().to_vec()
    };
    let proj = Tensor::<f64>::randn(&probe_out, 1.0, rng);
    let reduce = |g: &mut Graph<f64>, out: Var| -> Result<Var> {
        let p = g.constant(proj.clone());
        let m = g.mul(out, p)?;
        Ok(g.sum(m))
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone().requires_grad())).collect();
    let out = build(&mut g, &vars)?;
    let loss = reduce(&mut g, out)?;
    g.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let mut analytic = g.grad(vars[i]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]);
        if poison {
            corrupt(&mut analytic);
        }
        let numeric = finite_diff_grad(
            |xi| {
                let mut g = Graph::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| g.constant(if j == i { xi.clone() } else { t.clone() }))
                    .collect();
                let out = build(&mut g, &vars).expect("same graph as the analytic pass");
                let l = reduce(&mut g, out).expect("same graph as the analytic pass");
                g.value(l).values()[0]
            },
            x,
            STEP,
        );
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(0.5..1.5)).collect()).expect("valid shape")
}

/// Every differentiable graph op on random inputs.
pub fn ops_suite(opts: &GradcheckOptions) -> Result<SuiteResult> {
    let seeds = 10;
    let (m, n, p) = match opts.scale {
        Scale::Micro => (3, 4, 5),
        Scale::Small => (6, 8, 10),
    };
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for s in 0..seeds {
        let mut rng = rng::stream(opts.seed.wrapping_add(s), rng::EVAL);
        let r = &mut rng;
        let mut run = |inputs: Vec<Tensor<f64>>, build: &Build, r: &mut ChaCha8Rng| -> Result<()> {
            worst = worst.max(check_case(&inputs, build, r, opts.corrupt)?);
            cases += 1;
            Ok(())
        };
        run(vec![randn(&[m, n], r), randn(&[n, p], r)], &|g, v| g.matmul(v[0], v[1]), r)?;
        run(vec![randn(&[m, n], r), randn(&[m, n], r)], &|g, v| g.add(v[0], v[1]), r)?;
        run(vec![randn(&[m, n], r), randn(&[m, n], r)], &|g, v| g.mul(v[0], v[1]), r)?;
        run(vec![randn(&[m, n], r)], &|g, v| Ok(g.scale(v[0], 0.7)), r)?;
        run(vec![randn(&[m, n], r)], &|g, v| Ok(g.silu(v[0])), r)?;
        run(vec![randn(&[m, n], r)], &|g, v| Ok(g.softplus(v[0])), r)?;
        run(vec![randn(&[m, n], r), randn(&[1], r)], &|g, v| g.rmsnorm(v[0], v[1], 1e-6), r)?;
        run(vec![randn(&[m, n], r), positive(&[n], r)], &|g, v| g.rmsnorm(v[0], v[1], 1e-6), r)?;
        run(vec![randn(&[m, n], r)], &|g, v| g.softmax(v[0]), r)?;
        run(
            vec![randn(&[m, n], r)],
            &|g, v| {
                let k = g.keep_topk(v[0], 2)?;
                g.softmax(k)
            },
            r,
        )?;
        run(vec![randn(&[m, n], r)], &|g, v| Ok(g.transpose(v[0])), r)?;
        run(vec![randn(&[m, n], r)], &|g, v| g.reshape(v[0], &[n, m]), r)?;
        run(vec![randn(&[m, n], r)], &|g, v| g.gather_rows(v[0], &[2, 0, 2]), r)?;
        run(vec![randn(&[n, p], r)], &|g, v| g.embedding_lookup(v[0], &[1, 3, 1, 0]), r)?;
        run(vec![randn(&[2, n], r)], &|g, v| g.scatter_rows(v[0], &[2, 0], m), r)?;
        run(vec![randn(&[m, n], r)], &|g, v| g.pick(v[0], &[(0, 1), (2, 3), (1, 0)]), r)?;
        run(vec![randn(&[m, n], r), randn(&[m], r)], &|g, v| g.scale_rows(v[0], v[1]), r)?;
        run(vec![randn(&[m, n], r)], &|g, v| Ok(g.mean_rows(v[0])), r)?;
        run(
            vec![randn(&[m, n], r)],
            &|g, v| {
                let s = g.sum(v[0]);
                let t = g.constant(Tensor::scalar(1.0));
                g.mul(s, t)
            },
            r,
        )?;
        let targets: Vec<usize> = (0..m).map(|i| (3 * i + 4) % p).collect();
        run(vec![randn(&[m, p], r)], &|g, v| g.cross_entropy(v[0], &targets), r)?;
        run(vec![randn(&[2 * 3, 8], r)], &|g, v| g.rope(v[0], 3, 2, 10_000.0), r)?;
        run(
            vec![randn(&[2 * 3, 8], r), randn(&[2 * 3, 8], r), randn(&[2 * 3, 8], r)],
            &|g, v| g.causal_attention(v[0], v[1], v[2], 2, 3, 2),
            r,
        )?;
    }
    Ok(SuiteResult {
        name: "ops".into(),
        cases,
        worst_rel_err: worst,
        tolerance: TOLERANCE,
    })
}

fn gate_inputs(d: usize, n: usize, t: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    vec![
        randn(&[t, d], rng),
        Tensor::randn(&[d, n], 0.5, rng),
        Tensor::randn(&[d, n], 0.5, rng),
        Tensor::scalar(rng.random_range(0.5..1.5)),
    ]
}

fn gate_vars(v: &[Var]) -> GateVars {
    GateVars::from_slice(&v[1..4])
}

/// Gate logits, both softmaxes and the top-k mask.
pub fn gate_suite(opts: &GradcheckOptions) -> Result<SuiteResult> {
    let (d, n, t) = match opts.scale {
        Scale::Micro => (8, 4, 5),
        Scale::Small => (16, 8, 12),
    };
    let mut worst: f64 = 0.0;
    let seeds = 5;
    for s in 0..seeds {
        let mut rng = rng::stream(opts.seed.wrapping_add(100 + s), rng::EVAL);
        let inputs = gate_inputs(d, n, t, &mut rng);
        let build = |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> {
            let nodes = gate_graph(g, &gate_vars(v), v[0], 2)?;
            let both = g.add(nodes.topk_probs, nodes.full_probs)?;
            g.add(both, nodes.logits)
        };
        worst = worst.max(check_case(&inputs, &build, &mut rng, opts.corrupt)?);
    }
    Ok(SuiteResult {
        name: "gate".into(),
        cases: seeds as usize,
        worst_rel_err: worst,
        tolerance: TOLERANCE,
    })
}

/// The full sparse layer: gate, experts, weighting and scatter.
pub fn layer_suite(opts: &GradcheckOptions) -> Result<SuiteResult> {
    let (d, t, sizes): (usize, usize, Vec<usize>) = match opts.scale {
        Scale::Micro => (8, 3, vec![12, 4, 8, 8]),
        Scale::Small => (16, 8, vec![36, 4, 28, 12, 24, 16, 20, 20]),
    };
    let n = sizes.len();
    let mut worst: f64 = 0.0;
    let seeds = 5;
    for s in 0..seeds {
        let mut rng = rng::stream(opts.seed.wrapping_add(200 + s), rng::EVAL);
        let mut inputs = gate_inputs(d, n, t, &mut rng);
        for &h in &sizes {
            let e = ExpertParams::<f64>::init(d, h, &mut rng);
            for w in e.tensors() {
                // unit-scale weights keep expert outputs comparable to the gate terms
                let vals = w.values().iter().map(|v| v * 20.0).collect();
                inputs.push(Tensor::new(w.shape(), vals).expect("same shape"));
            }
        }
        let build = |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> {
            let experts: Vec<ExpertVars> = v[4..].chunks(3).map(ExpertVars::from_slice).collect();
            let (y, _) = moe_graph(g, &gate_vars(v), &experts, v[0], 2)?;
            Ok(y)
        };
        worst = worst.max(check_case(&inputs, &build, &mut rng, opts.corrupt)?);
    }
    Ok(SuiteResult {
        name: "layer".into(),
        cases: seeds as usize,
        worst_rel_err: worst,
        tolerance: TOLERANCE,
    })
}

/// Balance loss through the unmasked router probabilities.
pub fn balance_suite(opts: &GradcheckOptions) -> Result<SuiteResult> {
    let (d, n, t) = match opts.scale {
        Scale::Micro => (8, 4, 5),
        Scale::Small => (16, 8, 20),
    };
    let mut worst: f64 = 0.0;
    let seeds = 5;
    for s in 0..seeds {
        let mut rng = rng::stream(opts.seed.wrapping_add(300 + s), rng::EVAL);
        let inputs = gate_inputs(d, n, t, &mut rng);
        let build = |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> {
            let nodes = gate_graph(g, &gate_vars(v), v[0], 2)?;
            let (loss, _) = balance_graph(g, nodes.full_probs, &nodes.output, 0.01)?;
            Ok(loss)
        };
        worst = worst.max(check_case(&inputs, &build, &mut rng, opts.corrupt)?);
    }
    Ok(SuiteResult {
        name: "balance".into(),
        cases: seeds as usize,
        worst_rel_err: worst,
        tolerance: TOLERANCE,
    })
}

pub fn micro_model_config(scale: Scale) -> ModelConfig {
    match scale {
        Scale::Micro => ModelConfig {
            dim: 16,
            n_layers: 1,
            n_heads: 2,
            n_experts: 4,
            top_k: 2,
            vocab_size: 12,
            h_base: 16,
            expert_ratios: ExpertRatios::Pairs(vec![(1.5, 0.5), (1.0, 1.0)]),
            seq_len: 4,
            seed: 3,
        },
        Scale::Small => ModelConfig {
            dim: 16,
            n_layers: 2,
            n_heads: 2,
            n_experts: 8,
            top_k: 2,
            vocab_size: 20,
            h_base: 24,
            expert_ratios: ExpertRatios::Pairs(vec![(2.5, 0.5), (2.0, 1.0), (1.75, 1.25), (1.5, 1.5)]),
            seq_len: 8,
            seed: 3,
        },
    }
}

/// The whole objective (cross-entropy plus balance loss) of a tiny model.
pub fn model_suite(opts: &GradcheckOptions) -> Result<SuiteResult> {
    let cfg = micro_model_config(opts.scale);
    let mut model = Model::<f64>::init(&cfg)?;
    let mut rng = rng::stream(opts.seed.wrapping_add(400), rng::EVAL);
    for t in model.tensors_mut() {
        let std = if t.shape().len() == 1 { 0.1 } else { 0.4 };
        let base = if t.shape().len() == 1 { 1.0 } else { 0.0 };
        for v in t.values_mut() {
            *v = base + std * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
    }
    let batch = 2;
    let len = batch * cfg.seq_len;
    let inputs: Vec<usize> = (0..len).map(|_| rng.random_range(0..cfg.vocab_size)).collect();
    let targets: Vec<usize> = (0..len).map(|_| rng.random_range(0..cfg.vocab_size)).collect();
    let alpha = 0.01;
    let loss_of = |m: &Model<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let vars = m.bind(&mut g, false);
        let nodes = m.loss_graph(&mut g, &vars, &inputs, &targets, batch, alpha)?;
        Ok(g.value(nodes.total).values()[0])
    };
    let mut g = Graph::new();
    let vars = model.bind(&mut g, true);
    let nodes = model.loss_graph(&mut g, &vars, &inputs, &targets, batch, alpha)?;
    g.backward(nodes.total)?;
    let mut worst: f64 = 0.0;
    let count = model.tensors().len();
    for i in 0..count {
        let mut analytic = g.grad(vars.all[i]).map(<[f64]>::to_vec).unwrap_or_default();
        if opts.corrupt {
            corrupt(&mut analytic);
        }
        let x = model.tensors()[i].clone();
        let mut probe = model.clone();
        let numeric = finite_diff_grad(
            |xi| {
                probe.tensors_mut()[i].values_mut().copy_from_slice(xi.values());
                loss_of(&probe).expect("same graph as the analytic pass")
            },
            &x,
            STEP,
        );
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(SuiteResult {
        name: "model".into(),
        cases: count,
        worst_rel_err: worst,
        tolerance: MODEL_TOLERANCE,
    })
}

/// All suites in a fixed order.
pub fn run_all(opts: &GradcheckOptions) -> Result<Vec<SuiteResult>> {
    Ok(vec![
        ops_suite(opts)?,
        gate_suite(opts)?,
        layer_suite(opts)?,
        balance_suite(opts)?,
        model_suite(opts)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_differences_of_a_quadratic() {
        let x = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = finite_diff_grad(|t| t.values().iter().map(|v| v * v).sum(), &x, 1e-5);
        for (a, b) in g.iter().zip([2.0, -4.0, 1.0]) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn relative_error_edge_cases() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(relative_error(&[1.0, 0.0], &[0.0, 0.0]), 1.0);
    }
}
