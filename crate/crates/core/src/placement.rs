//! Expert placement over logical devices and trace-driven workload evaluation.
//!
//! The pairwise strategy keeps both members of a pair on one device. Pairs
//! are dealt round-robin over the concatenation of all layers, so device `j`
//! receives pair `p` of layer `l` when `(l·N/2 + p) mod D == j`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::analytics::trace::RoutingTrace;
use crate::error::{Error, Result};
use crate::moe::expert::count_parameters_for_sizes;
use crate::moe::pairing::PairedExpertSpec;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceModel {
    pub device_count: usize,
    pub labels: Vec<String>,
}

impl DeviceModel {
    pub fn new(device_count: usize) -> Result<Self> {
        if device_count == 0 {
            return Err(Error::Planning("at least one device is required".into()));
        }
        Ok(Self {
            device_count,
            labels: (0..device_count).map(|i| format!("dev{i}")).collect(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Pairwise,
    NaiveContiguous,
    SizeSorted,
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pairwise" => Ok(Strategy::Pairwise),
            "naive_contiguous" | "naive-contiguous" => Ok(Strategy::NaiveContiguous),
            "size_sorted" | "size-sorted" => Ok(Strategy::SizeSorted),
            _ => Err(Error::Config(format!(
                "unknown strategy {s:?} (pairwise, naive_contiguous, size_sorted)"
            ))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Pairwise => "pairwise",
            Strategy::NaiveContiguous => "naive_contiguous",
            Strategy::SizeSorted => "size_sorted",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub layer: usize,
    pub expert: usize,
    pub device: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementPlan {
    pub strategy: Strategy,
    pub device_count: usize,
    pub assignment: Vec<Assignment>,
    pub per_device_params: Vec<u64>,
}

impl PlacementPlan {
    fn build(
        strategy: Strategy,
        spec: &PairedExpertSpec,
        devices: &DeviceModel,
        mut assignment: Vec<Assignment>,
    ) -> Self {
        assignment.sort_by_key(|a| (a.layer, a.expert));
        let mut per_device_params = vec![0u64; devices.device_count];
        for a in &assignment {
            per_device_params[a.device] +=
                count_parameters_for_sizes(spec.d_model, &[spec.expert_sizes[a.expert]]) as u64;
        }
        Self {
            strategy,
            device_count: devices.device_count,
            assignment,
            per_device_params,
        }
    }

    pub fn device_of(&self, layer: usize, expert: usize) -> Option<usize> {
        self.assignment
            .iter()
            .find(|a| a.layer == layer && a.expert == expert)
            .map(|a| a.device)
    }

    pub fn layers(&self) -> usize {
        self.assignment.iter().map(|a| a.layer + 1).max().unwrap_or(0)
    }

    pub fn is_param_balanced(&self) -> bool {
        self.per_device_params.windows(2).all(|w| w[0] == w[1])
    }
}

fn check_layers(layers: usize) -> Result<()> {
    if layers == 0 {
        return Err(Error::Planning("at least one layer is required".into()));
    }
    Ok(())
}

pub fn plan_pairwise(spec: &PairedExpertSpec, layers: usize, devices: &DeviceModel) -> Result<PlacementPlan> {
    check_layers(layers)?;
    let n_pairs = spec.n_pairs();
    let total = n_pairs * layers;
    let d = devices.device_count;
    if total % d != 0 {
        return Err(Error::Planning(format!(
            "pairwise placement needs (N/2)·layers = {n_pairs}·{layers} = {total} divisible by D = {d}"
        )));
    }
    let mut out = Vec::with_capacity(total * 2);
    for layer in 0..layers {
        for p in 0..n_pairs {
            let device = (layer * n_pairs + p) % d;
            for expert in [2 * p, 2 * p + 1] {
                out.push(Assignment { layer, expert, device });
            }
        }
    }
    Ok(PlacementPlan::build(Strategy::Pairwise, spec, devices, out))
}

fn check_units(spec: &PairedExpertSpec, layers: usize, devices: &DeviceModel) -> Result<usize> {
    check_layers(layers)?;
    let units = spec.n_experts() * layers;
    if units % devices.device_count != 0 {
        return Err(Error::Planning(format!(
            "N·layers = {units} must be divisible by D = {}",
            devices.device_count
        )));
    }
    Ok(units)
}

/// Slices `order` (repeated for each layer) into `D` equal contiguous runs.
pub fn plan_contiguous(
    spec: &PairedExpertSpec,
    layers: usize,
    devices: &DeviceModel,
    order: &[usize],
) -> Result<PlacementPlan> {
    let units = check_units(spec, layers, devices)?;
    let mut sorted = order.to_vec();
    sorted.sort_unstable();
    if sorted != (0..spec.n_experts()).collect::<Vec<_>>() {
        return Err(Error::Planning("expert order must be a permutation of 0..N".into()));
    }
    let per = units / devices.device_count;
    let out = (0..layers)
        .flat_map(|l| order.iter().map(move |&e| (l, e)))
        .enumerate()
        .map(|(i, (layer, expert))| Assignment {
            layer,
            expert,
            device: i / per,
        })
        .collect();
    Ok(PlacementPlan::build(Strategy::NaiveContiguous, spec, devices, out))
}

pub fn plan_baselines(
    spec: &PairedExpertSpec,
    layers: usize,
    devices: &DeviceModel,
    strategy: Strategy,
) -> Result<PlacementPlan> {
    match strategy {
        Strategy::NaiveContiguous => {
            let order: Vec<usize> = (0..spec.n_experts()).collect();
            plan_contiguous(spec, layers, devices, &order)
        }
        Strategy::SizeSorted => {
            check_units(spec, layers, devices)?;
            let mut units: Vec<(usize, usize)> = (0..layers)
                .flat_map(|l| (0..spec.n_experts()).map(move |e| (l, e)))
                .collect();
            units.sort_by(|a, b| spec.expert_sizes[b.1].cmp(&spec.expert_sizes[a.1]));
            let mut load = vec![0usize; devices.device_count];
            let out = units
                .into_iter()
                .map(|(layer, expert)| {
                    let device = (0..load.len()).min_by_key(|&i| (load[i], i)).expect("D >= 1");
                    load[device] += spec.expert_sizes[expert];
                    Assignment { layer, expert, device }
                })
                .collect();
            Ok(PlacementPlan::build(Strategy::SizeSorted, spec, devices, out))
        }
        Strategy::Pairwise => plan_pairwise(spec, layers, devices),
    }
}

pub fn plan(spec: &PairedExpertSpec, layers: usize, devices: &DeviceModel, strategy: Strategy) -> Result<PlacementPlan> {
    plan_baselines(spec, layers, devices, strategy)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WorkloadReport {
    pub per_device_tokens: Vec<u64>,
    /// `Σ tokens·ĥ` over the experts on each device.
    pub per_device_flop_proxy: Vec<u64>,
    /// `max / min` of the flop proxy; `+∞` when a device is idle.
    pub imbalance_ratio: f64,
}

/// Workload from routed-token counts keyed by `(layer, expert)`.
pub fn evaluate_counts(
    plan: &PlacementPlan,
    counts: &BTreeMap<(usize, usize), u64>,
    spec: &PairedExpertSpec,
) -> Result<WorkloadReport> {
    let mut device_of = BTreeMap::new();
    for a in &plan.assignment {
        device_of.insert((a.layer, a.expert), a.device);
    }
    let mut tokens = vec![0u64; plan.device_count];
    let mut flops = vec![0u64; plan.device_count];
    for (&(layer, expert), &c) in counts {
        let d = *device_of.get(&(layer, expert)).ok_or_else(|| {
            Error::Planning(format!("layer {layer} expert {expert} is not in the plan"))
        })?;
        tokens[d] += c;
        flops[d] += c * spec.expert_sizes[expert] as u64;
    }
    let max = flops.iter().copied().max().unwrap_or(0);
    let min = flops.iter().copied().min().unwrap_or(0);
    let imbalance_ratio = if min == 0 {
        f64::INFINITY
    } else {
        max as f64 / min as f64
    };
    Ok(WorkloadReport {
        per_device_tokens: tokens,
        per_device_flop_proxy: flops,
        imbalance_ratio,
    })
}

pub fn evaluate_workload(
    plan: &PlacementPlan,
    trace: &RoutingTrace,
    spec: &PairedExpertSpec,
) -> Result<WorkloadReport> {
    let layers = plan.layers();
    let mut counts = BTreeMap::new();
    for (i, r) in trace.records.iter().enumerate() {
        if r.expert as usize >= spec.n_experts() || r.layer as usize >= layers {
            return Err(Error::TraceFormat {
                offset: i,
                message: format!("layer {} expert {} outside the plan", r.layer, r.expert),
            });
        }
        *counts.entry((r.layer as usize, r.expert as usize)).or_insert(0u64) += 1;
    }
    evaluate_counts(plan, &counts, spec)
}

/// Mean `ĥ` over all (token, selected expert) events.
pub fn average_selected_hidden_size(trace: &RoutingTrace, spec: &PairedExpertSpec) -> Result<f64> {
    if trace.records.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let mut total: u128 = 0;
    for (i, r) in trace.records.iter().enumerate() {
        let size = spec.expert_sizes.get(r.expert as usize).ok_or_else(|| Error::TraceFormat {
            offset: i,
            message: format!("expert {} >= N = {}", r.expert, spec.n_experts()),
        })?;
        total += *size as u128;
    }
    Ok(total as f64 / trace.records.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytics::fixtures::spec_300m;

    #[test]
    fn pairwise_one_layer_four_devices() {
        let spec = spec_300m();
        let p = plan_pairwise(&spec, 1, &DeviceModel::new(4).unwrap()).unwrap();
        assert_eq!(p.per_device_params, vec![3 * 1536 * 7680; 4]);
        for pair in 0..4 {
            assert_eq!(p.device_of(0, 2 * pair), p.device_of(0, 2 * pair + 1));
        }
    }

    #[test]
    fn pairwise_indivisible_is_a_planning_error() {
        let err = plan_pairwise(&spec_300m(), 1, &DeviceModel::new(3).unwrap()).unwrap_err();
        assert!(err.to_string().contains("divisible"));
    }

    #[test]
    fn multi_layer_round_robin_stays_equal() {
        let spec = crate::moe::pairing::build_paired_spec(1536, 3840, &[(4.5, 0.5), (4.0, 1.0)]).unwrap();
        let p = plan_pairwise(&spec, 2, &DeviceModel::new(4).unwrap()).unwrap();
        assert!(p.is_param_balanced());
        assert_eq!(p.assignment.len(), 8);
    }

    #[test]
    fn descending_contiguous_is_unequal() {
        let spec = spec_300m();
        let mut order: Vec<usize> = (0..8).collect();
        order.sort_by(|&a, &b| spec.expert_sizes[b].cmp(&spec.expert_sizes[a]));
        let p = plan_contiguous(&spec, 1, &DeviceModel::new(4).unwrap(), &order).unwrap();
        let unit = 3 * 1536;
        assert_eq!(
            p.per_device_params,
            [13056, 8448, 6912, 2304].map(|v| (v * unit) as u64).to_vec()
        );
    }

    #[test]
    fn size_sorted_balances_reference_sizes() {
        let spec = spec_300m();
        let p = plan_baselines(&spec, 1, &DeviceModel::new(4).unwrap(), Strategy::SizeSorted).unwrap();
        assert_eq!(p.per_device_params, vec![3 * 1536 * 7680; 4]);
    }

    #[test]
    fn plan_json_shape() {
        let p = plan_pairwise(&spec_300m(), 1, &DeviceModel::new(2).unwrap()).unwrap();
        let v: serde_json::Value = serde_json::to_value(&p).unwrap();
        assert_eq!(v["strategy"], "pairwise");
        assert_eq!(v["device_count"], 2);
        assert_eq!(v["assignment"][0]["device"], 0);
        assert_eq!(v["per_device_params"].as_array().unwrap().len(), 2);
    }
}
