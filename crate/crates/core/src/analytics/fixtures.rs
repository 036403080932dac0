//! Reference routing tables shipped with the crate.
//!
//! Columns of the shipped tables are in descending-size order
//! (`4.5, 4, 3, 2.5, 2.5, 2, 1, 0.5`), not the pair-flattened expert order.

use crate::analytics::counts::CountTable;
use crate::analytics::trace::{RoutingTrace, TraceHeader, TraceRecord};
use crate::error::{Error, Result};
use crate::moe::pairing::{build_paired_spec, PairedExpertSpec};

pub const APPENDIX_A_BASELINE: &str = include_str!("../../fixtures/appendix_a_baseline.csv");
pub const APPENDIX_A_MODSE: &str = include_str!("../../fixtures/appendix_a_modse.csv");
pub const APPENDIX_B_DIFFICULT: &str = include_str!("../../fixtures/appendix_b_difficult.csv");

/// The 300M×8 expert layout: `d = 1536`, `h = 3840`.
pub fn spec_300m() -> PairedExpertSpec {
    build_paired_spec(1536, 3840, &[(4.5, 0.5), (4.0, 1.0), (3.0, 2.0), (2.5, 2.5)])
        .expect("valid reference spec")
}

pub fn appendix_a_modse() -> CountTable {
    CountTable::from_csv(APPENDIX_A_MODSE).expect("valid fixture")
}

pub fn appendix_a_baseline() -> CountTable {
    CountTable::from_csv(APPENDIX_A_BASELINE).expect("valid fixture")
}

/// Maps each table column, labelled by size ratio, to a distinct expert of
/// `spec` with that ratio.
pub fn column_to_expert(labels: &[String], spec: &PairedExpertSpec) -> Result<Vec<usize>> {
    let mut used = vec![false; spec.n_experts()];
    labels
        .iter()
        .map(|l| {
            let r: f64 = l
                .parse()
                .map_err(|_| Error::Data(format!("column label {l:?} is not a ratio")))?;
            let e = (0..spec.n_experts())
                .find(|&e| !used[e] && (spec.ratio(e) - r).abs() < 1e-9)
                .ok_or_else(|| Error::Data(format!("no free expert with ratio {l}")))?;
            used[e] = true;
            Ok(e)
        })
        .collect()
}

/// One row of the difficult-token routing table.
#[derive(Debug, Clone, PartialEq)]
pub struct DifficultRow {
    pub layer: usize,
    pub rank: usize,
    /// Counts in column (descending-size) order.
    pub counts: Vec<u64>,
}

pub fn appendix_b_rows() -> (Vec<String>, Vec<DifficultRow>) {
    parse_difficult(APPENDIX_B_DIFFICULT).expect("valid fixture")
}

pub fn parse_difficult(text: &str) -> Result<(Vec<String>, Vec<DifficultRow>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| Error::Data(e.to_string()))?.clone();
    if headers.len() < 3 || &headers[0] != "layer" || &headers[1] != "rank" {
        return Err(Error::Data("difficult table must start with layer,rank".into()));
    }
    let labels = headers.iter().skip(2).map(str::to_string).collect();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Data(format!("row {i}: {e}")))?;
        let nums = rec
            .iter()
            .map(|v| v.parse::<u64>().map_err(|_| Error::Data(format!("row {i}: {v:?}"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(DifficultRow {
            layer: nums[0] as usize,
            rank: nums[1] as usize,
            counts: nums[2..].to_vec(),
        });
    }
    Ok((labels, rows))
}

/// A top-2 trace realizing the per-(layer, rank) counts of the difficult
/// table. Every layer routes the same tokens `0..T`, with two distinct
/// experts per token.
pub fn appendix_b_trace() -> Result<RoutingTrace> {
    let (labels, rows) = appendix_b_rows();
    trace_from_rank_counts(&spec_300m(), &labels, &rows, 0)
}

/// Builds a top-2 trace whose rank-0 and rank-1 counts match `rows`.
pub fn trace_from_rank_counts(
    spec: &PairedExpertSpec,
    labels: &[String],
    rows: &[DifficultRow],
    epoch: u32,
) -> Result<RoutingTrace> {
    let cols = column_to_expert(labels, spec)?;
    let n_layers = rows.iter().map(|r| r.layer + 1).max().unwrap_or(0);
    let mut trace = RoutingTrace::new(TraceHeader::for_spec(spec, n_layers, 2));
    for layer in 0..n_layers {
        let pick = |rank| {
            rows.iter()
                .find(|r| r.layer == layer && r.rank == rank)
                .ok_or_else(|| Error::Data(format!("missing layer {layer} rank {rank}")))
        };
        let expand = |row: &DifficultRow| -> Vec<u32> {
            row.counts
                .iter()
                .zip(&cols)
                .flat_map(|(&c, &e)| std::iter::repeat_n(e as u32, c as usize))
                .collect()
        };
        let first = expand(pick(0)?);
        let second = expand(pick(1)?);
        if first.len() != second.len() {
            return Err(Error::Data(format!("layer {layer}: rank totals differ")));
        }
        let t = first.len();
        let shift = (0..t.max(1))
            .find(|&s| (0..t).all(|i| first[i] != second[(i + s) % t]))
            .ok_or_else(|| Error::Data(format!("layer {layer}: counts admit no distinct pairing")))?;
        for i in 0..t {
            for (rank, e) in [(0u8, first[i]), (1u8, second[(i + shift) % t])] {
                trace.records.push(TraceRecord {
                    epoch,
                    layer: layer as u16,
                    token: i as u64,
                    rank,
                    expert: e,
                    gate_weight: 0.5,
                    ce_loss: None,
                });
            }
        }
    }
    trace.validate()?;
    Ok(trace)
}
