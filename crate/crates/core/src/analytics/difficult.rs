//! Difficult-token analyses: loss-threshold tables and where difficult tokens
//! are routed by expert size.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::analytics::trace::RoutingTrace;
use crate::error::{Error, Result};
use crate::moe::pairing::{format_ratio, PairedExpertSpec};

/// Thresholds of the reference loss-interval table.
pub const DEFAULT_THRESHOLDS: [f64; 6] = [2.0, 1.8, 1.6, 1.4, 1.2, 1.05];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdRow {
    pub threshold: f64,
    pub token_count: usize,
    /// Mean of `baseline − modse` over the selection; `None` when empty.
    pub avg_loss_reduction: Option<f64>,
}

/// For each threshold, tokens whose baseline loss exceeds it, and their mean
/// loss reduction.
pub fn difficult_token_table(
    baseline: &[f64],
    modse: &[f64],
    thresholds: &[f64],
) -> Result<Vec<ThresholdRow>> {
    if baseline.len() != modse.len() {
        return Err(Error::Alignment(format!(
            "{} baseline losses vs {} comparison losses",
            baseline.len(),
            modse.len()
        )));
    }
    if thresholds.windows(2).any(|w| !(w[0] > w[1])) {
        return Err(Error::Argument("thresholds must be strictly descending".into()));
    }
    Ok(thresholds
        .iter()
        .map(|&t| {
            let (n, s) = baseline
                .iter()
                .zip(modse)
                .filter(|(b, _)| **b > t)
                .fold((0usize, 0.0), |(n, s), (b, m)| (n + 1, s + (b - m)));
            ThresholdRow {
                threshold: t,
                token_count: n,
                avg_loss_reduction: (n > 0).then(|| s / n as f64),
            }
        })
        .collect())
}

pub fn mean_loss(losses: &[f64]) -> Result<f64> {
    if losses.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Token ids whose loss exceeds the mean loss.
pub fn difficult_tokens(token_ids: &[u64], losses: &[f64]) -> Result<BTreeSet<u64>> {
    if token_ids.len() != losses.len() {
        return Err(Error::Alignment(format!(
            "{} token ids vs {} losses",
            token_ids.len(),
            losses.len()
        )));
    }
    let mean = mean_loss(losses)?;
    Ok(token_ids
        .iter()
        .zip(losses)
        .filter(|(_, &l)| l > mean)
        .map(|(&t, _)| t)
        .collect())
}

pub fn table_csv(rows: &[ThresholdRow]) -> String {
    let mut out = String::from("loss_threshold,avg_loss_reduction,tokens\n");
    for r in rows {
        let red = r
            .avg_loss_reduction
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "nan".into());
        out.push_str(&format!("{},{red},{}\n", r.threshold, r.token_count));
    }
    out
}

/// Which experts count as large and which as small, by size ratio `ĥ/d`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SizeClasses {
    pub large: Vec<f64>,
    pub small: Vec<f64>,
}

impl SizeClasses {
    /// Larger than `h_base` is large, smaller is small, equal is neither.
    pub fn around_base(spec: &PairedExpertSpec) -> Self {
        let mut large = Vec::new();
        let mut small = Vec::new();
        for e in 0..spec.n_experts() {
            let r = spec.ratio(e);
            let s = spec.expert_sizes[e];
            let bucket = match s.cmp(&spec.h_base) {
                std::cmp::Ordering::Greater => &mut large,
                std::cmp::Ordering::Less => &mut small,
                std::cmp::Ordering::Equal => continue,
            };
            if !bucket.contains(&r) {
                bucket.push(r);
            }
        }
        Self { large, small }
    }

    /// Per-expert class: `Some(true)` large, `Some(false)` small.
    fn classify(&self, spec: &PairedExpertSpec) -> Result<Vec<Option<bool>>> {
        let ratios: Vec<f64> = (0..spec.n_experts()).map(|e| spec.ratio(e)).collect();
        let known = |r: &f64| ratios.iter().any(|x| (x - r).abs() < 1e-9);
        if let Some(r) = self.large.iter().chain(&self.small).find(|r| !known(r)) {
            return Err(Error::Config(format!("size ratio {r} matches no expert")));
        }
        let has = |set: &[f64], r: f64| set.iter().any(|x| (x - r).abs() < 1e-9);
        ratios
            .iter()
            .map(|&r| match (has(&self.large, r), has(&self.small, r)) {
                (true, true) => Err(Error::Config(format!("size ratio {r} is both large and small"))),
                (true, false) => Ok(Some(true)),
                (false, true) => Ok(Some(false)),
                (false, false) => Ok(None),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DifficultTokenReport {
    /// Column labels (`ĥ/d`) in expert order.
    pub labels: Vec<String>,
    pub expert_sizes: Vec<usize>,
    pub difficult_tokens: usize,
    /// Rank-0 events per expert.
    pub top1: Vec<u64>,
    /// Rank-0 and rank-1 events per expert.
    pub top12: Vec<u64>,
    /// Rank-0 events per layer and expert.
    pub top1_by_layer: Vec<Vec<u64>>,
    pub sum_large_top1: u64,
    pub sum_small_top1: u64,
    pub sum_large_top12: u64,
    pub sum_small_top12: u64,
}

impl DifficultTokenReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("selection,{},sum_large,sum_small\n", self.labels.join(","));
        let line = |name: &str, v: &[u64], l: u64, s: u64| {
            let cells: Vec<String> = v.iter().map(u64::to_string).collect();
            format!("{name},{},{l},{s}\n", cells.join(","))
        };
        out.push_str(&line("top1", &self.top1, self.sum_large_top1, self.sum_small_top1));
        out.push_str(&line("top1+2", &self.top12, self.sum_large_top12, self.sum_small_top12));
        out
    }
}

/// Expert-size distribution of the routing events of `difficult` tokens.
pub fn difficult_token_expert_distribution(
    trace: &RoutingTrace,
    difficult: &BTreeSet<u64>,
    spec: &PairedExpertSpec,
    classes: &SizeClasses,
) -> Result<DifficultTokenReport> {
    if trace.header.expert_sizes != spec.expert_sizes {
        return Err(Error::Config("trace expert sizes differ from the spec".into()));
    }
    let class = classes.classify(spec)?;
    let n = spec.n_experts();
    let mut top1 = vec![0u64; n];
    let mut top12 = vec![0u64; n];
    let mut by_layer = vec![vec![0u64; n]; trace.header.n_layers];
    for r in &trace.records {
        if !difficult.contains(&r.token) {
            continue;
        }
        let e = r.expert as usize;
        if r.rank == 0 {
            top1[e] += 1;
            by_layer[r.layer as usize][e] += 1;
        }
        if r.rank <= 1 {
            top12[e] += 1;
        }
    }
    let sum = |v: &[u64], want: bool| -> u64 {
        v.iter()
            .zip(&class)
            .filter(|(_, c)| **c == Some(want))
            .map(|(x, _)| x)
            .sum()
    };
    Ok(DifficultTokenReport {
        labels: (0..n).map(|e| format_ratio(spec.ratio(e))).collect(),
        expert_sizes: spec.expert_sizes.clone(),
        difficult_tokens: difficult.len(),
        sum_large_top1: sum(&top1, true),
        sum_small_top1: sum(&top1, false),
        sum_large_top12: sum(&top12, true),
        sum_small_top12: sum(&top12, false),
        top1,
        top12,
        top1_by_layer: by_layer,
    })
}
