//! Balance loss on a balanced and a collapsed router.

use modse::balance::balance_loss;
use modse::moe::GateOutput;

fn routing(probs: Vec<f64>, n: usize) -> GateOutput {
    let mut topk_indices = Vec::new();
    let mut topk_weights = Vec::new();
    for row in probs.chunks(n) {
        let best = (0..n).max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a))).unwrap();
        topk_indices.push(vec![best]);
        topk_weights.push(vec![1.0]);
    }
    GateOutput {
        n_experts: n,
        top_k: 1,
        topk_indices,
        topk_weights,
        logits: probs.iter().map(|p| p.ln()).collect(),
        full_probs: probs,
    }
}

fn main() -> modse::Result<()> {
    let n = 4;
    let alpha = 0.01;
    let mut balanced = Vec::new();
    for t in 0..8 {
        let mut row = vec![0.1; n];
        row[t % n] = 0.7;
        balanced.extend(row);
    }
    let collapsed: Vec<f64> = (0..8).flat_map(|_| [1.0, 0.0, 0.0, 0.0]).collect();
    for (name, probs) in [("balanced", balanced), ("collapsed", collapsed)] {
        let stats = balance_loss(&routing(probs, n), alpha)?;
        println!("{name:9} f={:?} P={:.3?} loss={:.5}", stats.f, stats.p, stats.loss);
    }
    println!("bounds: alpha = {alpha}, alpha*N = {}", alpha * n as f64);
    Ok(())
}
