//! Training loop, evaluation and routing-trace capture.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analytics::trace::{RoutingTrace, TraceHeader};
use crate::autodiff::Graph;
use crate::data::{eval_windows, synthetic_corpus, BatchSampler, Corpus};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::optim::{adam_step, clip_param_grads, lr_at, AdamState, OptimizerConfig};
use crate::params::ParamTree;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub batch_size: usize,
    /// Update count; `None` runs `optimizer.total_steps`.
    pub steps: Option<usize>,
    /// Routing snapshot cadence in steps; `0` keeps only the final snapshot.
    pub trace_interval: usize,
    /// Evaluation covers at most this many tokens of the held-out split.
    pub eval_tokens: usize,
    pub eval_fraction: f64,
    /// UTF-8 text files; empty selects the synthetic grammar.
    pub corpus_files: Vec<PathBuf>,
    pub synthetic_lines: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            batch_size: 16,
            steps: None,
            trace_interval: 0,
            eval_tokens: 4096,
            eval_fraction: 0.1,
            corpus_files: Vec::new(),
            synthetic_lines: 4000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub train: TrainSettings,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.train.steps.unwrap_or(self.optimizer.total_steps)
    }

    /// Corpus files when configured, otherwise the seeded synthetic grammar.
    pub fn corpus(&self) -> Result<Corpus> {
        if self.train.corpus_files.is_empty() {
            let text = synthetic_corpus(self.model.seed, self.train.synthetic_lines);
            Corpus::from_text(&text, self.train.eval_fraction)
        } else {
            Corpus::from_files(&self.train.corpus_files, self.train.eval_fraction)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerBalance {
    pub f: Vec<f64>,
    #[serde(rename = "P")]
    pub p: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStepRecord {
    pub step: usize,
    pub ce_loss: f64,
    pub balance_loss_sum: f64,
    pub lr: f64,
    pub layers: Vec<LayerBalance>,
    pub grad_norm_pre_clip: f64,
}

impl TrainStepRecord {
    /// Mean over layers of the top-1 routing max/min ratio.
    pub fn mean_top1_ratio(&self) -> f64 {
        let n = self.layers.len().max(1) as f64;
        self.layers
            .iter()
            .map(|l| {
                let max = l.f.iter().copied().fold(f64::MIN, f64::max);
                let min = l.f.iter().copied().fold(f64::MAX, f64::min);
                if min > 0.0 {
                    max / min
                } else {
                    f64::INFINITY
                }
            })
            .sum::<f64>()
            / n
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mean_ce: f64,
    /// Corpus position of each scored input token.
    pub positions: Vec<usize>,
    /// Next-token loss per scored position (empty unless requested).
    pub token_losses: Vec<f64>,
}

/// Mean next-token cross-entropy over the first `limit` tokens of `tokens`,
/// optionally appending the routing of every window to `trace`.
pub fn eval_loss(
    model: &Model<f32>,
    tokens: &[usize],
    limit: usize,
    with_per_token: bool,
    mut trace: Option<(&mut RoutingTrace, u32)>,
) -> Result<EvalReport> {
    let mut positions = Vec::new();
    let mut losses = Vec::new();
    for w in eval_windows(tokens, model.cfg.seq_len, limit) {
        let mut g = Graph::new();
        let vars = model.bind(&mut g, false);
        let fwd = model.forward_graph(&mut g, &vars, &w.inputs, 1)?;
        let v = model.cfg.vocab_size;
        let row_losses: Vec<f64> = g
            .values(fwd.logits)
            .chunks(v)
            .zip(&w.targets)
            .map(|(row, &t)| {
                let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
                let lse = row.iter().map(|&z| (z as f64 - max).exp()).sum::<f64>().ln() + max;
                lse - row[t] as f64
            })
            .collect();
        if let Some((tr, epoch)) = trace.as_mut() {
            let l32: Vec<f32> = row_losses.iter().map(|&l| l as f32).collect();
            for (layer, nodes) in fwd.gates.iter().enumerate() {
                tr.push_gate(*epoch, layer, &w.positions, &nodes.output, Some(&l32));
            }
        }
        positions.extend(&w.positions);
        losses.extend(row_losses);
    }
    if losses.is_empty() {
        return Err(Error::Data("evaluation needs at least two tokens".into()));
    }
    let mean_ce = losses.iter().sum::<f64>() / losses.len() as f64;
    if !with_per_token {
        losses.clear();
        positions.clear();
    }
    Ok(EvalReport {
        mean_ce,
        positions,
        token_losses: losses,
    })
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    pub records: Vec<TrainStepRecord>,
    pub trace: Option<RoutingTrace>,
    pub final_eval: Option<EvalReport>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions {
    /// Capture routing snapshots of the evaluation split.
    pub trace: bool,
    /// Score the evaluation split once training ends.
    pub final_eval: bool,
}

/// Runs `cfg.steps()` updates. `on_step` sees each record as it is produced.
pub fn train(
    cfg: &RunConfig,
    corpus: &Corpus,
    opts: TrainOptions,
    mut on_step: impl FnMut(&TrainStepRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = Model::<f32>::init(&cfg.model)?;
    let mut state = AdamState::new(&model);
    let steps = cfg.steps();
    let mut records = Vec::with_capacity(steps);
    let mut trace = opts.trace.then(|| {
        RoutingTrace::new(TraceHeader::for_spec(&model.spec, cfg.model.n_layers, cfg.model.top_k))
    });
    let mut snapshots = 0u32;
    let mut snapshot = |model: &Model<f32>, trace: &mut Option<RoutingTrace>| -> Result<()> {
        if let Some(tr) = trace.as_mut() {
            eval_loss(model, &corpus.eval, cfg.train.eval_tokens, false, Some((tr, snapshots)))?;
            snapshots += 1;
        }
        Ok(())
    };
    if steps > 0 {
        let mut sampler = BatchSampler::new(&corpus.train, cfg.train.batch_size, cfg.model.seq_len, cfg.model.seed)?;
        let opt = &cfg.optimizer;
        for step in 0..steps {
            if cfg.train.trace_interval > 0 && step % cfg.train.trace_interval == 0 {
                snapshot(&model, &mut trace)?;
            }
            let batch = sampler.next_batch();
            let lr = lr_at(step, opt);
            let mut g = Graph::new();
            let vars = model.bind(&mut g, true);
            let nodes = model.loss_graph(&mut g, &vars, &batch.inputs, &batch.targets, batch.batch, opt.alpha)?;
            g.backward(nodes.total)?;
            model.zero_grads();
            model.absorb_grads(&g, &vars.all);
            let grad_norm_pre_clip = clip_param_grads(&mut model, opt.grad_clip_norm);
            adam_step(&mut model, &mut state, opt, lr);
            let rec = TrainStepRecord {
                step,
                ce_loss: g.value(nodes.ce).values()[0] as f64,
                balance_loss_sum: nodes.balance.iter().map(|b| b.loss).sum(),
                lr,
                layers: nodes
                    .balance
                    .iter()
                    .map(|b| LayerBalance {
                        f: b.f.clone(),
                        p: b.p.clone(),
                    })
                    .collect(),
                grad_norm_pre_clip,
            };
            log::debug!("step {step} ce {:.4} lr {lr:.3e}", rec.ce_loss);
            on_step(&rec)?;
            records.push(rec);
        }
    }
    snapshot(&model, &mut trace)?;
    let final_eval = if opts.final_eval {
        Some(eval_loss(&model, &corpus.eval, cfg.train.eval_tokens, true, None)?)
    } else {
        None
    };
    model.zero_grads();
    Ok(TrainOutcome {
        model,
        records,
        trace,
        final_eval,
    })
}
