//! Runs the routing analyses over the shipped reference tables.

use modse::analytics::counts::render_ratio;
use modse::analytics::fixtures::{appendix_a_baseline, appendix_a_modse, appendix_b_trace, spec_300m};
use modse::analytics::{
    difficult_token_expert_distribution, difficult_token_table, Heatmap, SizeClasses,
};

fn main() -> modse::Result<()> {
    for (name, table) in [("baseline", appendix_a_baseline()), ("diverse", appendix_a_modse())] {
        println!("{name}: layer 0 rank 0 max/min by epoch");
        for (key, row) in table.rows.iter().filter(|(k, _)| k.layer == 0 && k.rank == 0) {
            println!("  epoch {} -> {}", key.epoch, render_ratio(row.ratio()));
        }
    }

    let spec = spec_300m();
    let trace = appendix_b_trace()?;
    let difficult = trace.records.iter().map(|r| r.token).collect();
    let report =
        difficult_token_expert_distribution(&trace, &difficult, &spec, &SizeClasses::around_base(&spec))?;
    print!("{}", report.to_csv());

    let heat = Heatmap::by_descending_size(
        (0..report.top1_by_layer.len()).map(|l| format!("layer {l}")).collect(),
        report.labels.clone(),
        report.top1_by_layer.clone(),
        &spec.expert_sizes,
    )?;
    let dir = std::env::temp_dir().join("modse-routing-analysis");
    std::fs::create_dir_all(&dir).map_err(|e| modse::Error::io(&dir, e))?;
    heat.emit(&dir.join("heatmap"))?;
    println!("heatmap written to {}", dir.display());

    let baseline = [2.4, 1.1, 0.6, 2.2, 1.9, 0.3, 1.5, 3.0];
    let diverse = [1.8, 1.0, 0.6, 1.7, 1.6, 0.4, 1.4, 2.1];
    for row in difficult_token_table(&baseline, &diverse, &[2.0, 1.8, 1.6, 1.4, 1.2, 1.05])? {
        println!(
            "loss > {:.2}: {} tokens, mean reduction {:?}",
            row.threshold, row.token_count, row.avg_loss_reduction
        );
    }
    Ok(())
}
