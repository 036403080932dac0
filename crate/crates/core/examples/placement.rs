//! Places the 300M×8 expert layout on four logical devices with each strategy,
//! then scores the plans against a skewed routing trace.

use modse::analytics::{RoutingTrace, TraceHeader, TraceRecord};
use modse::analytics::fixtures::spec_300m;
use modse::placement::{average_selected_hidden_size, evaluate_workload, plan, DeviceModel, Strategy};

fn main() -> modse::Result<()> {
    let spec = spec_300m();
    let devices = DeviceModel::new(4)?;
    let layers = 2;

    // Larger experts attract more tokens.
    let mut trace = RoutingTrace::new(TraceHeader::for_spec(&spec, layers, 1));
    let mut token = 0u64;
    for layer in 0..layers {
        for (e, &size) in spec.expert_sizes.iter().enumerate() {
            for _ in 0..size / 96 {
                trace.records.push(TraceRecord {
                    epoch: 0,
                    layer: layer as u16,
                    token,
                    rank: 0,
                    expert: e as u32,
                    gate_weight: 1.0,
                    ce_loss: None,
                });
                token += 1;
            }
        }
    }

    for strategy in [Strategy::Pairwise, Strategy::NaiveContiguous, Strategy::SizeSorted] {
        let p = plan(&spec, layers, &devices, strategy)?;
        let w = evaluate_workload(&p, &trace, &spec)?;
        println!("{strategy}");
        println!("  parameters {:?}", p.per_device_params);
        println!("  flop proxy {:?} imbalance {:.3}", w.per_device_flop_proxy, w.imbalance_ratio);
    }
    println!(
        "average selected hidden size {:.1} (h = {})",
        average_selected_hidden_size(&trace, &spec)?,
        spec.h_base
    );
    Ok(())
}
