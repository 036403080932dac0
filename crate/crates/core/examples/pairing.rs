//! Expert sizes for the reference layouts and a desk-scale toy layout.

use modse::moe::{build_paired_spec, count_parameters_for_sizes, PairedExpertSpec};

fn main() -> modse::Result<()> {
    let ratios = [(4.5, 0.5), (4.0, 1.0), (3.0, 2.0), (2.5, 2.5)];
    for (d, h) in [(1536, 3840), (2048, 5120), (64, 160)] {
        let spec = build_paired_spec(d, h, &ratios)?;
        let base = PairedExpertSpec::homogeneous(d, h, 8)?;
        println!("d={d} h={h}");
        println!("  pairs      {:?}", spec.pairs);
        println!(
            "  parameters {} (homogeneous {})",
            count_parameters_for_sizes(d, &spec.expert_sizes),
            count_parameters_for_sizes(d, &base.expert_sizes)
        );
    }
    match build_paired_spec(1536, 3840, &[(4.5, 1.0)]) {
        Err(e) => println!("rejected: {e}"),
        Ok(_) => unreachable!(),
    }
    Ok(())
}
