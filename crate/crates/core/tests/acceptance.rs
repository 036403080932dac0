//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any criterion fails.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use modse::analytics::counts::render_ratio;
use modse::analytics::fixtures::{appendix_a_modse, appendix_b_trace, spec_300m};
use modse::analytics::{difficult_token_expert_distribution, RoutingTrace, SizeClasses, TraceHeader, TraceRecord};
use modse::autodiff::kernels;
use modse::balance::balance_loss;
use modse::gradcheck::{run_all, GradcheckOptions, Scale};
use modse::model::ModelConfig;
use modse::moe::{build_paired_spec, count_parameters_for_sizes, GateOutput, PairedExpertSpec};
use modse::placement::{average_selected_hidden_size, plan_contiguous, plan_pairwise, DeviceModel};
use modse::train::{train, RunConfig, TrainOptions, TrainStepRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const RATIOS: [(f64, f64); 4] = [(4.5, 0.5), (4.0, 1.0), (3.0, 2.0), (2.5, 2.5)];
const STEPS: usize = 500;

type Outcome = Result<String, String>;

fn check(cond: bool, ok: String, bad: String) -> Outcome {
    if cond {
        Ok(ok)
    } else {
        Err(bad)
    }
}

fn a1() -> Outcome {
    let t = Instant::now();
    let want = [
        (1536, 3840, vec![(6912, 768), (6144, 1536), (4608, 3072), (3840, 3840)]),
        (2048, 5120, vec![(9216, 1024), (8192, 2048), (6144, 4096), (5120, 5120)]),
    ];
    for (d, h, pairs) in want {
        let spec = build_paired_spec(d, h, &RATIOS).map_err(|e| e.to_string())?;
        if spec.pairs != pairs {
            return Err(format!("d={d}: got {:?}", spec.pairs));
        }
        if let Some(p) = spec.pairs.iter().find(|(a, b)| a + b != 2 * h) {
            return Err(format!("d={d}: pair {p:?} does not sum to {}", 2 * h));
        }
    }
    let el = t.elapsed();
    check(el < Duration::from_secs(1), format!("both layouts exact ({el:.2?})"), format!("took {el:.2?}"))
}

fn a2() -> Outcome {
    let mut notes = Vec::new();
    let toy = ModelConfig::default();
    for (d, h) in [(toy.dim, toy.h_base), (1536, 3840), (2048, 5120)] {
        let spec = build_paired_spec(d, h, &RATIOS).map_err(|e| e.to_string())?;
        let base = PairedExpertSpec::homogeneous(d, h, 8).map_err(|e| e.to_string())?;
        let (a, b) = (
            count_parameters_for_sizes(d, &spec.expert_sizes),
            count_parameters_for_sizes(d, &base.expert_sizes),
        );
        if a != b {
            return Err(format!("d={d}: {a} vs {b}"));
        }
        notes.push(format!("{a}"));
    }
    Ok(format!("expert parameters equal: {}", notes.join(", ")))
}

fn a3() -> Outcome {
    let t = Instant::now();
    let suites = run_all(&GradcheckOptions {
        scale: Scale::Micro,
        seed: 0,
        corrupt: false,
    })
    .map_err(|e| e.to_string())?;
    let el = t.elapsed();
    let mut parts = Vec::new();
    let mut ok = true;
    for s in &suites {
        let tol = if s.name == "model" { 1e-3 } else { 1e-4 };
        ok &= s.worst_rel_err <= tol;
        parts.push(format!("{} {:.1e}", s.name, s.worst_rel_err));
    }
    ok &= suites.len() == 5 && el < Duration::from_secs(120);
    let msg = format!("{} ({el:.1?})", parts.join(", "));
    check(ok, msg.clone(), msg)
}

fn routing(probs: &[f64], n: usize) -> GateOutput {
    let topk_indices: Vec<Vec<usize>> = probs.chunks(n).map(|r| vec![kernels::argmax(r)]).collect();
    GateOutput {
        n_experts: n,
        top_k: 1,
        topk_weights: vec![vec![1.0]; topk_indices.len()],
        topk_indices,
        full_probs: probs.to_vec(),
        logits: probs.iter().map(|p| p.ln()).collect(),
    }
}

fn loop_oracle(probs: &[f64], n: usize, alpha: f64) -> f64 {
    let t = probs.len() / n;
    let mut f = vec![0.0; n];
    let mut p = vec![0.0; n];
    for tok in 0..t {
        let row = &probs[tok * n..(tok + 1) * n];
        let mut best = 0;
        for j in 1..n {
            if row[j] > row[best] {
                best = j;
            }
        }
        f[best] += 1.0 / t as f64;
        for j in 0..n {
            p[j] += row[j] / t as f64;
        }
    }
    alpha * n as f64 * (0..n).map(|i| f[i] * p[i]).sum::<f64>()
}

fn a4() -> Outcome {
    let alpha = 0.01;
    let n = 8;
    let mut uniform = Vec::new();
    for tok in 0..64 {
        let mut row = vec![0.3 / (n - 1) as f64; n];
        row[tok % n] = 0.7;
        uniform.extend(row);
    }
    let u = balance_loss(&routing(&uniform, n), alpha).map_err(|e| e.to_string())?.loss;
    if (u - alpha).abs() > 1e-12 {
        return Err(format!("uniform gave {u}"));
    }
    let collapsed: Vec<f64> = (0..64).flat_map(|_| {
        let mut r = vec![0.0; n];
        r[5] = 1.0;
        r
    }).collect();
    let c = balance_loss(&routing(&collapsed, n), alpha).map_err(|e| e.to_string())?.loss;
    if c != alpha * n as f64 {
        return Err(format!("collapse gave {c}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let t = rng.random_range(1..50);
        let mut probs: Vec<f64> = (0..t * n).map(|_| rng.random_range(1e-3..1.0)).collect();
        for row in probs.chunks_mut(n) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        let got = balance_loss(&routing(&probs, n), alpha).map_err(|e| e.to_string())?.loss;
        worst = worst.max((got - loop_oracle(&probs, n, alpha)).abs());
    }
    check(
        worst <= 1e-10,
        format!("uniform {u:.3e}, collapse {c}, random worst diff {worst:.1e}"),
        format!("random worst diff {worst:.1e}"),
    )
}

fn a5() -> Outcome {
    let mut notes = Vec::new();
    for (d, h) in [(1536, 3840), (2048, 5120)] {
        let spec = build_paired_spec(d, h, &RATIOS).map_err(|e| e.to_string())?;
        for dev in [1, 2, 4] {
            let p = plan_pairwise(&spec, 1, &DeviceModel::new(dev).unwrap()).map_err(|e| e.to_string())?;
            let first = p.per_device_params[0];
            if p.per_device_params.iter().any(|&x| x != first) {
                return Err(format!("d={d} D={dev}: {:?}", p.per_device_params));
            }
        }
        let mut desc: Vec<usize> = (0..spec.n_experts()).collect();
        desc.sort_by(|&a, &b| spec.expert_sizes[b].cmp(&spec.expert_sizes[a]));
        let c = plan_contiguous(&spec, 1, &DeviceModel::new(4).unwrap(), &desc).map_err(|e| e.to_string())?;
        let distinct: BTreeSet<u64> = c.per_device_params.iter().copied().collect();
        if distinct.len() < 2 {
            return Err(format!("d={d}: contiguous baseline is balanced {:?}", c.per_device_params));
        }
        notes.push(format!("d={d} contiguous {:?}", c.per_device_params));
    }
    Ok(format!("pairwise equal for D in {{1,2,4}}; {}", notes.join("; ")))
}

fn a6() -> Outcome {
    let row = appendix_a_modse().get(7, 0, 0).cloned().ok_or("missing epoch 7 row")?;
    let ratio = row.ratio();
    if (ratio - 2.60).abs() > 0.005 {
        return Err(format!("ratio {ratio}"));
    }
    let spec = spec_300m();
    let trace = appendix_b_trace().map_err(|e| e.to_string())?;
    let tokens: BTreeSet<u64> = trace.records.iter().map(|r| r.token).collect();
    let r = difficult_token_expert_distribution(&trace, &tokens, &spec, &SizeClasses::around_base(&spec))
        .map_err(|e| e.to_string())?;
    let got = (r.sum_large_top12, r.sum_small_top12, r.sum_large_top1, r.sum_small_top1);
    check(
        got == (10473, 8326, 6215, 3085),
        format!("ratio {}, sums {}/{} {}/{}", render_ratio(ratio), got.0, got.1, got.2, got.3),
        format!("sums {got:?}"),
    )
}

/// Toy model with the batch shape used for the training criteria.
fn smoke_config(alpha: f64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.seq_len = 64;
    cfg.train.batch_size = 8;
    cfg.train.steps = Some(STEPS);
    cfg.optimizer.alpha = alpha;
    cfg
}

fn run(alpha: f64) -> Result<(Vec<TrainStepRecord>, Duration), String> {
    let cfg = smoke_config(alpha);
    let corpus = cfg.corpus().map_err(|e| e.to_string())?;
    let t = Instant::now();
    let out = train(&cfg, &corpus, TrainOptions::default(), |_| Ok(())).map_err(|e| e.to_string())?;
    Ok((out.records, t.elapsed()))
}

fn a7(records: &[TrainStepRecord], el: Duration) -> Outcome {
    let (first, last) = (records[0].ce_loss, records[records.len() - 1].ce_loss);
    let msg = format!(
        "CE {first:.4} -> {last:.4} over {} steps ({el:.1?}, {} core(s))",
        records.len(),
        std::thread::available_parallelism().map_or(1, |n| n.get())
    );
    check(
        records.len() == STEPS && last <= first - 0.5 && el < Duration::from_secs(600),
        msg.clone(),
        msg,
    )
}

fn tail_ratio(records: &[TrainStepRecord]) -> f64 {
    let tail = &records[records.len() - 100..];
    tail.iter().map(TrainStepRecord::mean_top1_ratio).sum::<f64>() / tail.len() as f64
}

fn a8(with: &[TrainStepRecord], without: &[TrainStepRecord]) -> Outcome {
    let (a, b) = (tail_ratio(with), tail_ratio(without));
    let msg = format!("top-1 max/min over last 100 steps: alpha=0.01 {a:.3}, alpha=0 {b:.3}");
    check(a < b, msg.clone(), msg)
}

fn a9() -> Outcome {
    let mut notes = Vec::new();
    for (d, h) in [(1536, 3840), (2048, 5120), (64, 160)] {
        let spec = build_paired_spec(d, h, &RATIOS).map_err(|e| e.to_string())?;
        let n = spec.n_experts() as u64;
        let mut tr = RoutingTrace::new(TraceHeader::for_spec(&spec, 2, 2));
        for layer in 0..2u16 {
            for tok in 0..10 * n {
                for rank in 0..2u8 {
                    tr.records.push(TraceRecord {
                        epoch: 0,
                        layer,
                        token: tok,
                        rank,
                        expert: ((tok + rank as u64 * 3) % n) as u32,
                        gate_weight: 0.5,
                        ce_loss: None,
                    });
                }
            }
        }
        let avg = average_selected_hidden_size(&tr, &spec).map_err(|e| e.to_string())?;
        if avg != h as f64 {
            return Err(format!("d={d}: {avg} vs {h}"));
        }
        notes.push(format!("{avg}"));
    }
    Ok(format!("uniform averages {}", notes.join(", ")))
}

fn a10() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"model": {"seq_len": 64}, "train": {"batch_size": 8, "eval_tokens": 512}}"#)
        .map_err(|e| e.to_string())?;
    let mut files = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        let args = [
            "modse", "train", "--config", cfg.to_str().unwrap(), "--steps", "30", "--seed", "7",
            "--out", out.to_str().unwrap(),
        ];
        modse::cli::run(args).map_err(|f| f.message().to_string())?;
        let read = |f: &str| std::fs::read(out.join(f)).map_err(|e| e.to_string());
        files.push((read("checkpoint-0.bin")?, read("checkpoint.bin")?, read("metrics.jsonl")?));
    }
    let same = files[0] == files[1];
    let digest = modse::cli::sha256_hex(&files[0].1);
    check(
        same,
        format!("checkpoints and metrics identical (final checkpoint sha256 {})", &digest[..16]),
        "runs differ".into(),
    )
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = vec![
        ("A1 pairing fidelity", a1()),
        ("A2 parameter parity", a2()),
        ("A3 gradient correctness", a3()),
        ("A4 balance-loss values", a4()),
        ("A5 placement equality", a5()),
        ("A6 analytics fixtures", a6()),
    ];
    match (run(0.01), run(0.0)) {
        (Ok((with, el)), Ok((without, _))) => {
            results.push(("A7 training smoke", a7(&with, el)));
            results.push(("A8 balance-loss effect", a8(&with, &without)));
        }
        (a, b) => {
            let e = a.err().or(b.err()).unwrap_or_default();
            results.push(("A7 training smoke", Err(e.clone())));
            results.push(("A8 balance-loss effect", Err(e)));
        }
    }
    results.push(("A9 workload metric", a9()));
    results.push(("A10 determinism", a10()));

    let mut failed = 0;
    for (name, r) in &results {
        match r {
            Ok(m) => println!("PASS {name}: {m}"),
            Err(m) => {
                failed += 1;
                println!("FAIL {name}: {m}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
