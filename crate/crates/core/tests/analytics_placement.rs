use std::collections::{BTreeMap, BTreeSet};

use modse::analytics::counts::{render_ratio, CountKey};
use modse::analytics::fixtures::{
    appendix_a_modse, appendix_b_rows, appendix_b_trace, column_to_expert, spec_300m,
};
use modse::analytics::{
    count_routing, difficult_token_expert_distribution, difficult_token_table, Heatmap, RoutingTrace,
    SizeClasses, TraceHeader, TraceRecord,
};
use modse::moe::{build_paired_spec, PairedExpertSpec};
use modse::placement::{
    average_selected_hidden_size, evaluate_workload, plan, plan_pairwise, DeviceModel, Strategy,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn record(epoch: u32, layer: u16, token: u64, rank: u8, expert: u32) -> TraceRecord {
    TraceRecord {
        epoch,
        layer,
        token,
        rank,
        expert,
        gate_weight: 0.5,
        ce_loss: None,
    }
}

/// Every token picks two distinct random experts in every layer.
fn random_trace(spec: &PairedExpertSpec, layers: usize, tokens: u64, seed: u64) -> RoutingTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tr = RoutingTrace::new(TraceHeader::for_spec(spec, layers, 2));
    for tok in 0..tokens {
        for layer in 0..layers {
            let mut experts: Vec<u32> = (0..spec.n_experts() as u32).collect();
            experts.shuffle(&mut rng);
            for rank in 0..2u8 {
                tr.records.push(record(0, layer as u16, tok, rank, experts[rank as usize]));
            }
        }
    }
    tr
}

fn uniform_trace(spec: &PairedExpertSpec, per_expert: u64) -> RoutingTrace {
    let n = spec.n_experts() as u64;
    let mut tr = RoutingTrace::new(TraceHeader::for_spec(spec, 1, 2));
    for tok in 0..per_expert * n {
        tr.records.push(record(0, 0, tok, 0, (tok % n) as u32));
        tr.records.push(record(0, 0, tok, 1, ((tok + 1) % n) as u32));
    }
    tr
}

#[test]
fn epoch7_layer0_ratio() {
    let t = appendix_a_modse();
    let row = t.get(7, 0, 0).unwrap();
    let mut counts = row.counts.clone();
    counts.sort_unstable();
    assert_eq!(
        counts,
        vec![15442565, 16658651, 18865092, 21987256, 22649968, 29079684, 30773936, 40200720]
    );
    assert_eq!(row.max(), 40200720);
    assert_eq!(row.min(), 15442565);
    assert!((row.ratio() - 2.60).abs() <= 0.005);
    assert_eq!(render_ratio(row.ratio()), "2.60");
}

#[test]
fn single_record_is_one_hot_with_sentinel() {
    let spec = spec_300m();
    let mut tr = RoutingTrace::new(TraceHeader::for_spec(&spec, 1, 2));
    tr.records.push(record(0, 0, 0, 0, 3));
    let table = count_routing(&tr).unwrap();
    let row = table.get(0, 0, 0).unwrap();
    assert_eq!(row.counts, vec![0, 0, 0, 1, 0, 0, 0, 0]);
    assert!(row.ratio().is_infinite());
    assert_eq!(render_ratio(row.ratio()), "inf");
}

#[test]
fn uniform_trace_has_unit_ratios() {
    let tr = uniform_trace(&spec_300m(), 5);
    let table = count_routing(&tr).unwrap();
    for row in table.rows.values() {
        assert!(row.counts.iter().all(|&c| c == 5));
        assert_eq!(row.ratio(), 1.0);
    }
}

#[test]
fn appendix_b_distribution_reproduces_the_published_sums() {
    let spec = spec_300m();
    let trace = appendix_b_trace().unwrap();
    trace.validate().unwrap();
    let difficult: BTreeSet<u64> = trace.records.iter().map(|r| r.token).collect();
    let rep = difficult_token_expert_distribution(&trace, &difficult, &spec, &SizeClasses::around_base(&spec))
        .unwrap();
    let (labels, _) = appendix_b_rows();
    let cols = column_to_expert(&labels, &spec).unwrap();
    let in_columns = |v: &[u64]| -> Vec<u64> { cols.iter().map(|&e| v[e]).collect() };
    assert_eq!(in_columns(&rep.top12), vec![2649, 3729, 4095, 2332, 2933, 2877, 2972, 2477]);
    assert_eq!(in_columns(&rep.top1), vec![1560, 2313, 2342, 1166, 1566, 1363, 873, 849]);
    assert_eq!((rep.sum_large_top12, rep.sum_small_top12), (10473, 8326));
    assert_eq!((rep.sum_large_top1, rep.sum_small_top1), (6215, 3085));

    // mass conservation: one rank-0 event per token and layer, two with rank 1
    let layers = trace.header.n_layers as u64;
    let tokens = difficult.len() as u64;
    assert_eq!(rep.top1.iter().sum::<u64>(), tokens * layers);
    assert_eq!(rep.top12.iter().sum::<u64>(), 2 * tokens * layers);
    let middle: u64 = (0..spec.n_experts())
        .filter(|&e| spec.expert_sizes[e] == spec.h_base)
        .map(|e| rep.top12[e])
        .sum();
    assert_eq!(rep.sum_large_top12 + rep.sum_small_top12 + middle, rep.top12.iter().sum::<u64>());
}

#[test]
fn heatmap_rows_sum_to_layer_totals() {
    let spec = spec_300m();
    let trace = appendix_b_trace().unwrap();
    let all: BTreeSet<u64> = trace.records.iter().map(|r| r.token).collect();
    let rep =
        difficult_token_expert_distribution(&trace, &all, &spec, &SizeClasses::around_base(&spec)).unwrap();
    let heat = Heatmap::by_descending_size(
        (0..8).map(|l| l.to_string()).collect(),
        rep.labels.clone(),
        rep.top1_by_layer.clone(),
        &spec.expert_sizes,
    )
    .unwrap();
    assert_eq!(heat.cells.len(), 8);
    let (_, rows) = appendix_b_rows();
    for r in rows.iter().filter(|r| r.rank == 0) {
        assert_eq!(heat.cells[r.layer].iter().sum::<u64>(), r.counts.iter().sum::<u64>());
        assert_eq!(heat.cells[r.layer], r.counts);
    }
    assert_eq!(heat.col_labels, vec!["4.5", "4", "3", "2.5", "2.5", "2", "1", "0.5"]);
}

#[test]
fn heatmap_identity_csv_and_equal_fills() {
    let h = Heatmap::new(
        vec!["a".into(), "b".into()],
        vec!["x".into(), "y".into()],
        vec![vec![1, 0], vec![0, 1]],
    )
    .unwrap();
    assert_eq!(h.to_csv(), "1,0\n0,1\n");
    let flat = Heatmap::new(vec!["a".into()], vec!["x".into(), "y".into()], vec![vec![4, 4]]).unwrap();
    let svg = flat.to_svg();
    let fills: BTreeSet<&str> = svg
        .split("fill=\"")
        .skip(1)
        .filter_map(|s| s.split('"').next())
        .collect();
    assert_eq!(fills.into_iter().collect::<Vec<_>>(), vec![flat.fill(4).as_str()]);
}

#[test]
fn empty_difficult_set_gives_zero_report() {
    let spec = spec_300m();
    let trace = appendix_b_trace().unwrap();
    let rep = difficult_token_expert_distribution(&trace, &BTreeSet::new(), &spec, &SizeClasses::around_base(&spec))
        .unwrap();
    assert!(rep.top1.iter().chain(&rep.top12).all(|&c| c == 0));
    assert_eq!(rep.sum_large_top12 + rep.sum_small_top12, 0);
}

#[test]
fn unknown_size_class_is_a_config_error() {
    let spec = spec_300m();
    let trace = appendix_b_trace().unwrap();
    let classes = SizeClasses {
        large: vec![7.0],
        small: vec![0.5],
    };
    assert!(matches!(
        difficult_token_expert_distribution(&trace, &BTreeSet::new(), &spec, &classes),
        Err(modse::Error::Config(_))
    ));
}

/// Filter-and-average, one token at a time.
fn threshold_oracle(base: &[f64], other: &[f64], t: f64) -> (usize, Option<f64>) {
    let mut n = 0;
    let mut s = 0.0;
    for i in 0..base.len() {
        if base[i] > t {
            n += 1;
            s += base[i] - other[i];
        }
    }
    (n, (n > 0).then(|| s / n as f64))
}

#[test]
fn table5_like_first_row() {
    // 180 tokens above 2.0 whose reductions average 0.58, plus easier tokens
    let mut base = Vec::new();
    let mut other = Vec::new();
    for i in 0..180 {
        let b = 2.1 + (i % 9) as f64 * 0.1;
        let red = 0.58 + if i % 2 == 0 { 0.2 } else { -0.2 };
        base.push(b);
        other.push(b - red);
    }
    for i in 0..400 {
        let b = 0.2 + (i % 18) as f64 * 0.1;
        base.push(b);
        other.push(b - 0.1);
    }
    let rows = difficult_token_table(&base, &other, &[2.0, 1.05]).unwrap();
    assert_eq!(rows[0].token_count, 180);
    assert!((rows[0].avg_loss_reduction.unwrap() - 0.58).abs() < 1e-12);
    for r in &rows {
        let (n, m) = threshold_oracle(&base, &other, r.threshold);
        assert_eq!(r.token_count, n);
        assert!((r.avg_loss_reduction.unwrap() - m.unwrap()).abs() < 1e-12);
    }
}

#[test]
fn identical_losses_give_zero_reduction() {
    let l = [2.5, 1.9, 1.3, 0.2];
    for r in difficult_token_table(&l, &l, &[2.0, 1.8, 1.6, 1.4, 1.2, 1.05]).unwrap() {
        if let Some(m) = r.avg_loss_reduction {
            assert_eq!(m, 0.0);
        }
    }
}

proptest! {
    #[test]
    fn threshold_rows_match_oracle_and_are_monotone(
        pairs in prop::collection::vec((0.0f64..3.0, -0.5f64..0.5), 1..200),
    ) {
        let base: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let other: Vec<f64> = pairs.iter().map(|p| p.0 - p.1).collect();
        let th = [2.0, 1.8, 1.6, 1.4, 1.2, 1.05];
        let rows = difficult_token_table(&base, &other, &th).unwrap();
        for w in rows.windows(2) {
            prop_assert!(w[1].token_count >= w[0].token_count);
        }
        for r in &rows {
            let (n, m) = threshold_oracle(&base, &other, r.threshold);
            prop_assert_eq!(r.token_count, n);
            match (r.avg_loss_reduction, m) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
                (None, None) => {}
                _ => prop_assert!(false),
            }
        }
    }

    #[test]
    fn counts_ignore_record_order_and_encoding(seed in any::<u64>()) {
        let spec = spec_300m();
        let tr = random_trace(&spec, 3, 40, seed);
        let table = count_routing(&tr).unwrap();
        let mut shuffled = tr.clone();
        shuffled.records.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        prop_assert_eq!(&count_routing(&shuffled).unwrap(), &table);
        let jsonl = RoutingTrace::from_jsonl(tr.to_jsonl().as_bytes()).unwrap();
        let bin = RoutingTrace::from_binary(&tr.to_binary()).unwrap();
        prop_assert_eq!(&jsonl, &bin);
        prop_assert_eq!(&count_routing(&bin).unwrap(), &table);
        // every (layer, rank) of one epoch sees each token once
        let totals: BTreeSet<u64> = table.rows.values().map(|r| r.total()).collect();
        prop_assert_eq!(totals.into_iter().collect::<Vec<_>>(), vec![40]);
        let key = CountKey { epoch: 0, layer: 0, rank: 0 };
        prop_assert!(table.rows.contains_key(&key));
    }

    #[test]
    fn pairwise_plans_balance_parameters(
        pairs in 1usize..6,
        layers in 1usize..4,
        frac in prop::collection::vec(0.0f64..1.0, 6),
        dev_pick in 0usize..16,
    ) {
        let h = 96;
        let sizes: Vec<(usize, usize)> = frac[..pairs]
            .iter()
            .map(|f| {
                let l = h + (f * (h - 1) as f64) as usize;
                (l, 2 * h - l)
            })
            .collect();
        let spec = PairedExpertSpec::from_pairs(32, h, sizes).unwrap();
        let slots = layers * pairs;
        let divisors: Vec<usize> = (1..=slots).filter(|d| slots % d == 0).collect();
        let d = divisors[dev_pick % divisors.len()];
        let p = plan_pairwise(&spec, layers, &DeviceModel::new(d).unwrap()).unwrap();
        prop_assert!(p.is_param_balanced());
        prop_assert_eq!(p.assignment.len(), layers * spec.n_experts());
        for a in &p.assignment {
            prop_assert_eq!(p.device_of(a.layer, a.expert ^ 1), Some(a.device));
        }
        let total: u64 = p.per_device_params.iter().sum();
        prop_assert_eq!(total, (3 * 32 * 2 * h * pairs * layers) as u64);
    }
}

#[test]
fn single_device_holds_everything() {
    let spec = spec_300m();
    let p = plan(&spec, 2, &DeviceModel::new(1).unwrap(), Strategy::Pairwise).unwrap();
    assert_eq!(p.per_device_params.len(), 1);
    assert_eq!(p.assignment.len(), 16);
    assert!(p.assignment.iter().all(|a| a.device == 0));
}

#[test]
fn workload_matches_a_direct_tally() {
    let spec = spec_300m();
    let trace = appendix_b_trace().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for strategy in [Strategy::Pairwise, Strategy::NaiveContiguous, Strategy::SizeSorted] {
        let devices = [1usize, 2, 4][rng.random_range(0..3)];
        let p = plan(&spec, 8, &DeviceModel::new(devices).unwrap(), strategy).unwrap();
        let w = evaluate_workload(&p, &trace, &spec).unwrap();
        let mut tokens = vec![0u64; devices];
        let mut flops = vec![0u64; devices];
        for r in &trace.records {
            let d = p
                .assignment
                .iter()
                .find(|a| a.layer == r.layer as usize && a.expert == r.expert as usize)
                .unwrap()
                .device;
            tokens[d] += 1;
            flops[d] += spec.expert_sizes[r.expert as usize] as u64;
        }
        assert_eq!(w.per_device_tokens, tokens);
        assert_eq!(w.per_device_flop_proxy, flops);
        let (mx, mn) = (*flops.iter().max().unwrap(), *flops.iter().min().unwrap());
        assert_eq!(w.imbalance_ratio, mx as f64 / mn as f64);
    }
}

#[test]
fn uniform_routing_selects_the_base_size_on_average() {
    for (d, h) in [(1536, 3840), (2048, 5120), (64, 160)] {
        let spec = build_paired_spec(d, h, &[(4.5, 0.5), (4.0, 1.0), (3.0, 2.0), (2.5, 2.5)]).unwrap();
        let avg = average_selected_hidden_size(&uniform_trace(&spec, 7), &spec).unwrap();
        assert_eq!(avg, h as f64);
    }
}

#[test]
fn empty_trace_has_no_average() {
    let spec = spec_300m();
    let tr = RoutingTrace::new(TraceHeader::for_spec(&spec, 1, 2));
    assert!(matches!(average_selected_hidden_size(&tr, &spec), Err(modse::Error::EmptyTrace)));
}

#[test]
fn count_csv_round_trips() {
    let t = count_routing(&random_trace(&spec_300m(), 2, 30, 8)).unwrap();
    let back = modse::analytics::CountTable::from_csv(&t.to_csv()).unwrap();
    let as_map = |t: &modse::analytics::CountTable| -> BTreeMap<CountKey, Vec<u64>> {
        t.rows.iter().map(|(k, r)| (*k, r.counts.clone())).collect()
    };
    assert_eq!(as_map(&back), as_map(&t));
}
