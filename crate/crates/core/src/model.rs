//! Decoder-only transformer whose feed-forward sublayers are MoE layers.
//!
//! Pre-norm blocks: `x += attn(rmsnorm(x))`, `x += moe(rmsnorm(x))`, then a
//! final RMSNorm and an untied output projection. Attention is causal and
//! multi-head with rotary position embeddings.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::balance::{balance_graph, BalanceStats};
use crate::error::{Error, Result};
use crate::moe::expert::{ExpertParams, ExpertVars};
use crate::moe::gate::{GateNodes, GateOutput, GateParams, GateVars, INIT_STD, RMS_EPS};
use crate::moe::layer::moe_graph;
use crate::moe::pairing::{ExpertRatios, PairedExpertSpec};
use crate::params::ParamTree;
use crate::real::Real;
use crate::rng;
use crate::tensor::Tensor;

pub const ROPE_BASE: f64 = 10_000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub vocab_size: usize,
    pub h_base: usize,
    pub expert_ratios: ExpertRatios,
    pub seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// Desk-scale config keeping the four size ratios at `dim = 64`.
    fn default() -> Self {
        Self {
            dim: 64,
            n_layers: 2,
            n_heads: 4,
            n_experts: 8,
            top_k: 2,
            vocab_size: crate::data::VOCAB_SIZE,
            h_base: 160,
            expert_ratios: ExpertRatios::diverse_default(),
            seq_len: 256,
            seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.n_layers == 0 || self.vocab_size == 0 || self.seq_len == 0 {
            return fail("dim, n_layers, vocab_size and seq_len must be positive".into());
        }
        if self.n_heads == 0 || self.dim % self.n_heads != 0 {
            return fail(format!("dim {} not divisible by n_heads {}", self.dim, self.n_heads));
        }
        if (self.dim / self.n_heads) % 2 != 0 {
            return fail("head size must be even for rotary embeddings".into());
        }
        if self.n_experts < 2 || self.n_experts % 2 != 0 {
            return fail(format!("n_experts must be even and >= 2, got {}", self.n_experts));
        }
        if self.top_k == 0 || self.top_k > self.n_experts {
            return fail(format!("top_k {} outside 1..={}", self.top_k, self.n_experts));
        }
        self.expert_spec().map(|_| ())
    }

    pub fn expert_spec(&self) -> Result<PairedExpertSpec> {
        self.expert_ratios.to_spec(self.dim, self.h_base, self.n_experts)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T: Real = f32> {
    pub attn_norm: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub ffn_norm: Tensor<T>,
    pub gate: GateParams<T>,
    pub experts: Vec<ExpertParams<T>>,
}

impl<T: Real> Block<T> {
    fn init<R: Rng + ?Sized>(cfg: &ModelConfig, spec: &PairedExpertSpec, rng: &mut R) -> Self {
        let d = cfg.dim;
        let attn_norm = Tensor::full(&[d], T::one());
        let wq = Tensor::randn(&[d, d], INIT_STD, rng);
        let wk = Tensor::randn(&[d, d], INIT_STD, rng);
        let wv = Tensor::randn(&[d, d], INIT_STD, rng);
        let wo = Tensor::randn(&[d, d], INIT_STD, rng);
        let ffn_norm = Tensor::full(&[d], T::one());
        let gate = GateParams::init(d, cfg.n_experts, rng);
        let experts = spec
            .expert_sizes
            .iter()
            .map(|&h| ExpertParams::init(d, h, rng))
            .collect();
        Self {
            attn_norm,
            wq,
            wk,
            wv,
            wo,
            ffn_norm,
            gate,
            experts,
        }
    }

    fn names(&self, layer: usize) -> Vec<String> {
        let p = format!("layers.{layer}");
        let mut n: Vec<String> = ["attn_norm", "wq", "wk", "wv", "wo", "ffn_norm"]
            .iter()
            .map(|s| format!("{p}.{s}"))
            .collect();
        n.extend(["w_gate", "w_noise", "gamma"].iter().map(|s| format!("{p}.gate.{s}")));
        for e in 0..self.experts.len() {
            n.extend(
                ["w_in", "w_gateproj", "w_out"]
                    .iter()
                    .map(|s| format!("{p}.experts.{e}.{s}")),
            );
        }
        n
    }
}

impl<T: Real> ParamTree<T> for Block<T> {
    fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v = vec![
            &self.attn_norm,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ffn_norm,
        ];
        v.extend(self.gate.tensors());
        for e in &self.experts {
            v.extend(e.tensors());
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = vec![
            &mut self.attn_norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ffn_norm,
        ];
        v.extend(self.gate.tensors_mut());
        for e in &mut self.experts {
            v.extend(e.tensors_mut());
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Real = f32> {
    pub cfg: ModelConfig,
    pub spec: PairedExpertSpec,
    pub embed: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub final_norm: Tensor<T>,
    pub w_out: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct BlockVars {
    pub attn_norm: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ffn_norm: Var,
    pub gate: GateVars,
    pub experts: Vec<ExpertVars>,
}

#[derive(Debug, Clone)]
pub struct ModelVars {
    pub embed: Var,
    pub blocks: Vec<BlockVars>,
    pub final_norm: Var,
    pub w_out: Var,
    /// Every parameter leaf, in `ParamTree` order.
    pub all: Vec<Var>,
}

pub struct ForwardNodes {
    /// `[batch·seq × vocab]`
    pub logits: Var,
    pub gates: Vec<GateNodes>,
}

pub struct LossNodes {
    pub total: Var,
    pub ce: Var,
    pub balance: Vec<BalanceStats>,
    pub gates: Vec<GateOutput>,
}

impl<T: Real> Model<T> {
    /// Initializes weights from the config's `init` stream.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let spec = cfg.expert_spec()?;
        let mut rng = rng::stream(cfg.seed, rng::INIT);
        let d = cfg.dim;
        let embed = Tensor::randn(&[cfg.vocab_size, d], INIT_STD, &mut rng);
        let blocks = (0..cfg.n_layers)
            .map(|_| Block::init(cfg, &spec, &mut rng))
            .collect();
        let final_norm = Tensor::full(&[d], T::one());
        let w_out = Tensor::randn(&[d, cfg.vocab_size], INIT_STD, &mut rng);
        let mut m = Self {
            cfg: cfg.clone(),
            spec,
            embed,
            blocks,
            final_norm,
            w_out,
        };
        for t in m.tensors_mut() {
            t.set_requires_grad(true);
        }
        Ok(m)
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut n = vec!["embed".to_string()];
        for (i, b) in self.blocks.iter().enumerate() {
            n.extend(b.names(i));
        }
        n.push("final_norm".into());
        n.push("w_out".into());
        n
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        let blocks = self
            .blocks
            .iter()
            .map(|b| Block {
                attn_norm: b.attn_norm.cast(),
                wq: b.wq.cast(),
                wk: b.wk.cast(),
                wv: b.wv.cast(),
                wo: b.wo.cast(),
                ffn_norm: b.ffn_norm.cast(),
                gate: GateParams {
                    w_gate: b.gate.w_gate.cast(),
                    w_noise: b.gate.w_noise.cast(),
                    gamma: b.gate.gamma.cast(),
                },
                experts: b
                    .experts
                    .iter()
                    .map(|e| ExpertParams {
                        w_in: e.w_in.cast(),
                        w_gateproj: e.w_gateproj.cast(),
                        w_out: e.w_out.cast(),
                        hidden_size: e.hidden_size,
                    })
                    .collect(),
            })
            .collect();
        Model {
            cfg: self.cfg.clone(),
            spec: self.spec.clone(),
            embed: self.embed.cast(),
            blocks,
            final_norm: self.final_norm.cast(),
            w_out: self.w_out.cast(),
        }
    }

    /// Binds parameters as trainable leaves (`trainable = true`) or constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> ModelVars {
        let all: Vec<Var> = self
            .tensors()
            .into_iter()
            .map(|t| {
                if trainable {
                    g.leaf(t.clone().requires_grad())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        let mut it = all.iter().copied();
        let mut next = || it.next().expect("parameter order");
        let embed = next();
        let blocks = self
            .blocks
            .iter()
            .map(|b| BlockVars {
                attn_norm: next(),
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                ffn_norm: next(),
                gate: GateVars {
                    w_gate: next(),
                    w_noise: next(),
                    gamma: next(),
                },
                experts: b
                    .experts
                    .iter()
                    .map(|_| ExpertVars {
                        w_in: next(),
                        w_gateproj: next(),
                        w_out: next(),
                    })
                    .collect(),
            })
            .collect();
        let final_norm = next();
        let w_out = next();
        ModelVars {
            embed,
            blocks,
            final_norm,
            w_out,
            all,
        }
    }

    /// Records the forward pass for `tokens` laid out as `batch` sequences.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        vars: &ModelVars,
        tokens: &[usize],
        batch: usize,
    ) -> Result<ForwardNodes> {
        if batch == 0 || tokens.is_empty() || tokens.len() % batch != 0 {
            return Err(Error::Data(format!(
                "{} tokens cannot be split into {batch} sequences",
                tokens.len()
            )));
        }
        let seq = tokens.len() / batch;
        if seq > self.cfg.seq_len {
            return Err(Error::Data(format!(
                "sequence length {seq} exceeds configured seq_len {}",
                self.cfg.seq_len
            )));
        }
        let heads = self.cfg.n_heads;
        let mut x = g.embedding_lookup(vars.embed, tokens)?;
        let mut gates = Vec::with_capacity(vars.blocks.len());
        for b in &vars.blocks {
            let h = g.rmsnorm(x, b.attn_norm, RMS_EPS)?;
            let q = g.matmul(h, b.wq)?;
            let k = g.matmul(h, b.wk)?;
            let v = g.matmul(h, b.wv)?;
            let q = g.rope(q, seq, heads, ROPE_BASE)?;
            let k = g.rope(k, seq, heads, ROPE_BASE)?;
            let a = g.causal_attention(q, k, v, batch, seq, heads)?;
            let o = g.matmul(a, b.wo)?;
            x = g.add(x, o)?;
            let h = g.rmsnorm(x, b.ffn_norm, RMS_EPS)?;
            let (y, nodes) = moe_graph(g, &b.gate, &b.experts, h, self.cfg.top_k)?;
            x = g.add(x, y)?;
            gates.push(nodes);
        }
        let h = g.rmsnorm(x, vars.final_norm, RMS_EPS)?;
        let logits = g.matmul(h, vars.w_out)?;
        Ok(ForwardNodes { logits, gates })
    }

    /// Training objective `CE + Σ_layers L_a`.
    pub fn loss_graph(
        &self,
        g: &mut Graph<T>,
        vars: &ModelVars,
        inputs: &[usize],
        targets: &[usize],
        batch: usize,
        alpha: f64,
    ) -> Result<LossNodes> {
        let fwd = self.forward_graph(g, vars, inputs, batch)?;
        let ce = g.cross_entropy(fwd.logits, targets)?;
        let mut total = ce;
        let mut balance = Vec::with_capacity(fwd.gates.len());
        let mut gates = Vec::with_capacity(fwd.gates.len());
        for nodes in fwd.gates {
            let (la, stats) = balance_graph(g, nodes.full_probs, &nodes.output, alpha)?;
            total = g.add(total, la)?;
            balance.push(stats);
            gates.push(nodes.output);
        }
        Ok(LossNodes {
            total,
            ce,
            balance,
            gates,
        })
    }

    /// Logits without gradient tracking.
    pub fn logits(&self, tokens: &[usize], batch: usize) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let fwd = self.forward_graph(&mut g, &vars, tokens, batch)?;
        Ok(g.value(fwd.logits).clone())
    }
}

impl<T: Real> ParamTree<T> for Model<T> {
    fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v = vec![&self.embed];
        for b in &self.blocks {
            v.extend(b.tensors());
        }
        v.push(&self.final_norm);
        v.push(&self.w_out);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = vec![&mut self.embed];
        for b in &mut self.blocks {
            v.extend(b.tensors_mut());
        }
        v.push(&mut self.final_norm);
        v.push(&mut self.w_out);
        v
    }
}
