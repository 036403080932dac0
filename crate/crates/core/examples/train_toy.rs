//! Trains the toy model for a few dozen steps on the synthetic grammar and
//! saves a checkpoint.
//!
//! `cargo run --release --example train_toy -- 60`

use modse::train::{train, RunConfig, TrainOptions};

fn main() -> modse::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(40);
    let mut cfg = RunConfig::default();
    cfg.model.seq_len = 64;
    cfg.train.batch_size = 8;
    cfg.train.steps = Some(steps);
    cfg.train.eval_tokens = 1024;
    let corpus = cfg.corpus()?;
    println!(
        "{} train / {} eval tokens, experts {:?}",
        corpus.train.len(),
        corpus.eval.len(),
        cfg.model.expert_spec()?.expert_sizes
    );
    let opts = TrainOptions {
        trace: true,
        final_eval: true,
    };
    let out = train(&cfg, &corpus, opts, |r| {
        if r.step % 10 == 0 {
            println!(
                "step {:4} ce {:.4} balance {:.5} lr {:.2e} top1 max/min {:.2}",
                r.step,
                r.ce_loss,
                r.balance_loss_sum,
                r.lr,
                r.mean_top1_ratio()
            );
        }
        Ok(())
    })?;
    if let Some(eval) = &out.final_eval {
        println!("eval ce {:.4}", eval.mean_ce);
    }
    if let Some(trace) = &out.trace {
        println!("trace records {}", trace.records.len());
    }
    let path = std::env::temp_dir().join("modse-toy.ckpt");
    modse::checkpoint::save(&out.model, steps, &path)?;
    println!("checkpoint {}", path.display());
    Ok(())
}
