use modse::data::{encode, Corpus};
use modse::model::{Model, ModelConfig, ROPE_BASE};
use modse::moe::gate::RMS_EPS;
use modse::moe::ExpertRatios;
use modse::params::ParamTree;
use modse::train::{eval_loss, train, RunConfig, TrainOptions};
use modse::Tensor;

fn small_cfg() -> ModelConfig {
    ModelConfig {
        dim: 32,
        n_layers: 2,
        n_heads: 4,
        n_experts: 4,
        top_k: 2,
        vocab_size: 40,
        h_base: 48,
        expert_ratios: "2:1,1.5:1.5".parse::<ExpertRatios>().unwrap(),
        seq_len: 8,
        seed: 21,
    }
}

fn rms(x: &[f64], g: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let r = 1.0 / (ms + RMS_EPS).sqrt();
    x.iter()
        .enumerate()
        .map(|(j, v)| v * r * if g.len() == 1 { g[0] } else { g[j] })
        .collect()
}

fn vecmat(x: &[f64], w: &Tensor<f64>) -> Vec<f64> {
    let (r, c) = w.dims2();
    assert_eq!(r, x.len());
    (0..c).map(|j| (0..r).map(|i| x[i] * w.at(i, j)).sum()).collect()
}

fn rotate(x: &mut [f64], pos: usize, heads: usize) {
    let dh = x.len() / heads;
    let half = dh / 2;
    for h in 0..heads {
        for j in 0..half {
            let th = pos as f64 * ROPE_BASE.powf(-2.0 * j as f64 / dh as f64);
            let (a, b) = (x[h * dh + j], x[h * dh + j + half]);
            x[h * dh + j] = a * th.cos() - b * th.sin();
            x[h * dh + j + half] = a * th.sin() + b * th.cos();
        }
    }
}

/// Token-at-a-time evaluation with an explicit key/value cache.
fn stepwise_logits(m: &Model<f64>, tokens: &[usize]) -> Vec<Vec<f64>> {
    let d = m.cfg.dim;
    let heads = m.cfg.n_heads;
    let dh = d / heads;
    let mut cache: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)> = vec![(vec![], vec![]); m.blocks.len()];
    let mut out = Vec::new();
    for (pos, &tok) in tokens.iter().enumerate() {
        let mut x: Vec<f64> = m.embed.row(tok).to_vec();
        for (b, (ks, vs)) in m.blocks.iter().zip(cache.iter_mut()) {
            let h = rms(&x, b.attn_norm.values());
            let mut q = vecmat(&h, &b.wq);
            let mut k = vecmat(&h, &b.wk);
            let v = vecmat(&h, &b.wv);
            rotate(&mut q, pos, heads);
            rotate(&mut k, pos, heads);
            ks.push(k);
            vs.push(v);
            let mut att = vec![0.0; d];
            for hd in 0..heads {
                let sl = hd * dh..(hd + 1) * dh;
                let scores: Vec<f64> = ks
                    .iter()
                    .map(|kj| {
                        q[sl.clone()].iter().zip(&kj[sl.clone()]).map(|(a, b)| a * b).sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
                for (s, vj) in scores.iter().zip(vs.iter()) {
                    let p = (s - mx).exp() / z;
                    for c in sl.clone() {
                        att[c] += p * vj[c];
                    }
                }
            }
            let o = vecmat(&att, &b.wo);
            x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);

            let h = rms(&x, b.ffn_norm.values());
            let clean = vecmat(&h, &b.gate.w_gate);
            let sp: Vec<f64> = vecmat(&h, &b.gate.w_noise).iter().map(|v| (1.0 + v.exp()).ln()).collect();
            let noise = rms(&sp, b.gate.gamma.values());
            let logits: Vec<f64> = clean.iter().zip(&noise).map(|(a, b)| a + b).collect();
            let mut order: Vec<usize> = (0..logits.len()).collect();
            order.sort_by(|&a, &c| logits[c].partial_cmp(&logits[a]).unwrap().then(a.cmp(&c)));
            let chosen = &order[..m.cfg.top_k];
            let z: f64 = chosen.iter().map(|&e| logits[e].exp()).sum();
            for &e in chosen {
                let w = logits[e].exp() / z;
                let ex = &b.experts[e];
                let up = vecmat(&h, &ex.w_in);
                let gp = vecmat(&h, &ex.w_gateproj);
                let hid: Vec<f64> = up.iter().zip(&gp).map(|(u, g)| u / (1.0 + (-u).exp()) * g).collect();
                let y = vecmat(&hid, &ex.w_out);
                x.iter_mut().zip(&y).for_each(|(a, b)| *a += w * b);
            }
        }
        let h = rms(&x, m.final_norm.values());
        out.push(vecmat(&h, &m.w_out));
    }
    out
}

/// Scales weights up so routing, attention and experts are far from linear.
fn sharpened(cfg: &ModelConfig) -> Model<f64> {
    let mut m = Model::<f32>::init(cfg).unwrap().cast::<f64>();
    for t in m.tensors_mut() {
        if t.shape().len() == 2 {
            t.values_mut().iter_mut().for_each(|v| *v *= 15.0);
        }
    }
    m
}

#[test]
fn logits_match_stepwise_recomputation() {
    let cfg = small_cfg();
    let m = sharpened(&cfg);
    let tokens = [3, 17, 0, 39, 5, 5, 22, 11];
    let got = m.logits(&tokens, 1).unwrap();
    let want = stepwise_logits(&m, &tokens);
    let mut worst = 0.0f64;
    for (t, row) in want.iter().enumerate() {
        for (v, w) in got.row(t).iter().zip(row) {
            worst = worst.max((v - w).abs());
        }
    }
    assert!(worst <= 1e-5, "max abs diff {worst}");
}

#[test]
fn single_token_output_ignores_later_tokens() {
    let m = sharpened(&small_cfg());
    let a = m.logits(&[7], 1).unwrap();
    let b = m.logits(&[7, 1, 2, 3], 1).unwrap();
    let c = m.logits(&[7, 30, 31, 32], 1).unwrap();
    assert_eq!(a.row(0), b.row(0));
    assert_eq!(b.row(0), c.row(0));
    let b3 = m.logits(&[7, 1, 2], 1).unwrap();
    for t in 0..3 {
        assert_eq!(b3.row(t), b.row(t));
    }
}

#[test]
fn batch_permutation_permutes_logits() {
    let m = sharpened(&small_cfg());
    let seqs = [[1usize, 2, 3, 4], [9, 8, 7, 6], [0, 0, 39, 1]];
    let flat = |order: &[usize]| -> Vec<usize> { order.iter().flat_map(|&i| seqs[i]).collect() };
    let a = m.logits(&flat(&[0, 1, 2]), 3).unwrap();
    let b = m.logits(&flat(&[2, 0, 1]), 3).unwrap();
    for (pos_b, &src) in [2usize, 0, 1].iter().enumerate() {
        for t in 0..4 {
            assert_eq!(b.row(pos_b * 4 + t), a.row(src * 4 + t));
        }
    }
}

#[test]
fn out_of_range_token_is_a_data_error() {
    let m = Model::<f32>::init(&small_cfg()).unwrap();
    assert!(matches!(m.logits(&[40], 1), Err(modse::Error::Data(_))));
}

#[test]
fn uniform_predictor_scores_log_vocab() {
    let mut m = Model::<f32>::init(&small_cfg()).unwrap();
    m.w_out.values_mut().iter_mut().for_each(|v| *v = 0.0);
    let tokens: Vec<usize> = (0..200).map(|i| (i * 7) % 40).collect();
    let r = eval_loss(&m, &tokens, usize::MAX, false, None).unwrap();
    let ln_v = (40f64).ln();
    assert!((r.mean_ce - ln_v).abs() <= 0.05 * ln_v, "{} vs {ln_v}", r.mean_ce);
}

#[test]
fn per_token_losses_average_to_the_mean() {
    let m = Model::<f32>::init(&small_cfg()).unwrap();
    let tokens: Vec<usize> = (0..37).map(|i| (i * i + 3) % 40).collect();
    let r = eval_loss(&m, &tokens, usize::MAX, true, None).unwrap();
    assert_eq!(r.token_losses.len(), tokens.len() - 1);
    assert_eq!(r.positions, (0..tokens.len() - 1).collect::<Vec<_>>());
    let mean = r.token_losses.iter().sum::<f64>() / r.token_losses.len() as f64;
    assert!((mean - r.mean_ce).abs() <= 1e-6);
}

#[test]
fn two_token_corpus_matches_scalar_cross_entropy() {
    let m = Model::<f32>::init(&small_cfg()).unwrap();
    let r = eval_loss(&m, &[4, 9], usize::MAX, true, None).unwrap();
    let z = m.logits(&[4], 1).unwrap();
    let row: Vec<f64> = z.row(0).iter().map(|&v| v as f64).collect();
    let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
    let want = lse - row[9];
    assert_eq!(r.token_losses.len(), 1);
    assert!((r.mean_ce - want).abs() < 1e-9, "{} vs {want}", r.mean_ce);
}

fn tiny_run() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = small_cfg();
    cfg.model.vocab_size = modse::data::VOCAB_SIZE;
    cfg.train.batch_size = 2;
    cfg.train.eval_tokens = 64;
    cfg
}

fn corpus() -> Corpus {
    Corpus::from_text(&modse::data::synthetic_corpus(5, 60), 0.1).unwrap()
}

#[test]
fn zero_steps_leave_initial_weights() {
    let mut cfg = tiny_run();
    cfg.train.steps = Some(0);
    let out = train(&cfg, &corpus(), TrainOptions::default(), |_| Ok(())).unwrap();
    assert!(out.records.is_empty());
    let init = Model::<f32>::init(&cfg.model).unwrap();
    for (a, b) in out.model.tensors().iter().zip(init.tensors()) {
        assert_eq!(a.values(), b.values());
    }
}

#[test]
fn balance_weight_only_changes_the_update() {
    let run = |alpha: f64| {
        let mut cfg = tiny_run();
        cfg.train.steps = Some(1);
        cfg.optimizer.alpha = alpha;
        cfg.optimizer.warmup_steps = 0;
        train(&cfg, &corpus(), TrainOptions::default(), |_| Ok(())).unwrap()
    };
    let a = run(0.0);
    let b = run(0.01);
    assert_eq!(a.records[0].ce_loss, b.records[0].ce_loss);
    assert_eq!(a.records[0].balance_loss_sum, 0.0);
    assert!(b.records[0].balance_loss_sum > 0.0);
    let gate_a = &a.model.blocks[0].gate.w_gate;
    let gate_b = &b.model.blocks[0].gate.w_gate;
    assert_ne!(gate_a.values(), gate_b.values());
}

#[test]
fn homogeneous_ratios_match_the_baseline_program() {
    let mut a = tiny_run();
    a.model.expert_ratios = ExpertRatios::Homogeneous;
    a.train.steps = Some(3);
    let mut b = a.clone();
    b.model.expert_ratios = "1.5:1.5,1.5:1.5".parse().unwrap();
    let ra = train(&a, &corpus(), TrainOptions::default(), |_| Ok(())).unwrap();
    let rb = train(&b, &corpus(), TrainOptions::default(), |_| Ok(())).unwrap();
    assert_eq!(ra.records, rb.records);
}

#[test]
fn records_respect_their_invariants() {
    let mut cfg = tiny_run();
    cfg.train.steps = Some(6);
    cfg.optimizer.warmup_steps = 2;
    cfg.optimizer.total_steps = 5;
    let out = train(&cfg, &corpus(), TrainOptions::default(), |_| Ok(())).unwrap();
    let o = &cfg.optimizer;
    for r in &out.records {
        assert!(r.ce_loss >= 0.0);
        assert!(r.lr >= o.lr_init.min(o.lr_min) && r.lr <= o.lr_peak);
        assert_eq!(r.layers.len(), cfg.model.n_layers);
        for l in &r.layers {
            assert!((l.f.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!((l.p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn clipped_gradients_stay_within_the_bound() {
    let cfg = tiny_run();
    let mut m = Model::<f32>::init(&cfg.model).unwrap();
    let text = modse::data::synthetic_corpus(1, 4);
    let toks = encode(&text);
    let n = cfg.model.seq_len;
    let mut g = modse::autodiff::Graph::new();
    let vars = m.bind(&mut g, true);
    let nodes = m.loss_graph(&mut g, &vars, &toks[..n], &toks[1..=n], 1, 0.01).unwrap();
    g.backward(nodes.total).unwrap();
    m.zero_grads();
    m.absorb_grads(&g, &vars.all);
    // Inflate so the clip is active.
    for t in m.tensors_mut() {
        if let Some(gr) = t.grad_mut() {
            gr.iter_mut().for_each(|v| *v *= 1e3);
        }
    }
    let pre = modse::optim::clip_param_grads(&mut m, 1.0);
    assert!(pre > 1.0);
    let post: f64 = m
        .tensors()
        .iter()
        .filter_map(|t| t.grad())
        .flat_map(|g| g.iter().map(|&v| (v as f64) * (v as f64)))
        .sum::<f64>()
        .sqrt();
    assert!(post <= 1.0 + 1e-6, "{post}");
}
