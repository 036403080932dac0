//! Routes a few random tokens through one MoE layer with diverse expert widths.

use modse::moe::{build_paired_spec, gate_forward, moe_layer_forward, ExpertParams, GateParams};
use modse::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> modse::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let spec = build_paired_spec(16, 40, &[(4.5, 0.5), (4.0, 1.0), (3.0, 2.0), (2.5, 2.5)])?;
    let gate = GateParams::<f64>::init(16, spec.n_experts(), &mut rng);
    let experts: Vec<ExpertParams<f64>> = spec
        .expert_sizes
        .iter()
        .map(|&h| ExpertParams::init(16, h, &mut rng))
        .collect();
    let x = Tensor::<f64>::randn(&[6, 16], 1.0, &mut rng);

    let routing = gate_forward(&gate, &x, 2)?;
    for (t, (idx, w)) in routing.topk_indices.iter().zip(&routing.topk_weights).enumerate() {
        let sizes: Vec<usize> = idx.iter().map(|&e| spec.expert_sizes[e]).collect();
        println!("token {t}: experts {idx:?} widths {sizes:?} weights {w:.3?}");
    }
    let (y, _) = moe_layer_forward(&gate, &experts, &x, 2)?;
    println!("output shape {:?}, first row {:.4?}", y.shape(), &y.row(0)[..4]);
    Ok(())
}
