//! Routing traces: one record per (token, layer, rank) routing event.
//!
//! Two encodings share a JSON header:
//! * JSONL: the header object on the first line, then one record per line.
//! * Binary: `MODSETR1`, a little-endian `u64` header length, the header
//!   JSON, then fixed 28-byte little-endian records.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::gate::GateOutput;
use crate::moe::pairing::PairedExpertSpec;

pub const FORMAT: &str = "modse-trace-v1";
pub const BINARY_MAGIC: &[u8; 8] = b"MODSETR1";
pub const RECORD_BYTES: usize = 28;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceHeader {
    pub format: String,
    pub spec_digest: String,
    pub n_experts: usize,
    pub n_layers: usize,
    pub top_k: usize,
    pub d_model: usize,
    pub expert_sizes: Vec<usize>,
}

impl TraceHeader {
    pub fn for_spec(spec: &PairedExpertSpec, n_layers: usize, top_k: usize) -> Self {
        Self {
            format: FORMAT.into(),
            spec_digest: spec.digest(),
            n_experts: spec.n_experts(),
            n_layers,
            top_k,
            d_model: spec.d_model,
            expert_sizes: spec.expert_sizes.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub epoch: u32,
    pub layer: u16,
    pub token: u64,
    pub rank: u8,
    pub expert: u32,
    pub gate_weight: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ce_loss: Option<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingTrace {
    pub header: TraceHeader,
    pub records: Vec<TraceRecord>,
}

impl RoutingTrace {
    pub fn new(header: TraceHeader) -> Self {
        Self {
            header,
            records: Vec::new(),
        }
    }

    /// Appends one record per selected expert of every token.
    /// `tokens[t]` is the global index of row `t`; `losses`, when given, is
    /// each token's next-token loss.
    pub fn push_gate(
        &mut self,
        epoch: u32,
        layer: usize,
        tokens: &[usize],
        gate: &GateOutput,
        losses: Option<&[f32]>,
    ) {
        for (t, (idx, w)) in gate.topk_indices.iter().zip(&gate.topk_weights).enumerate() {
            for (rank, (&e, &gw)) in idx.iter().zip(w).enumerate() {
                self.records.push(TraceRecord {
                    epoch,
                    layer: layer as u16,
                    token: tokens[t] as u64,
                    rank: rank as u8,
                    expert: e as u32,
                    gate_weight: gw as f32,
                    ce_loss: losses.map(|l| l[t]),
                });
            }
        }
    }

    pub fn epochs(&self) -> Vec<u32> {
        let mut e: Vec<u32> = self.records.iter().map(|r| r.epoch).collect();
        e.sort_unstable();
        e.dedup();
        e
    }

    pub fn epoch_subset(&self, epoch: u32) -> Self {
        Self {
            header: self.header.clone(),
            records: self.records.iter().filter(|r| r.epoch == epoch).copied().collect(),
        }
    }

    /// Checks every record against the header and rank distinctness.
    pub fn validate(&self) -> Result<()> {
        let h = &self.header;
        if h.format != FORMAT {
            return Err(Error::TraceFormat {
                offset: 0,
                message: format!("unknown format {:?}", h.format),
            });
        }
        if h.expert_sizes.len() != h.n_experts {
            return Err(Error::TraceFormat {
                offset: 0,
                message: format!("{} expert sizes for {} experts", h.expert_sizes.len(), h.n_experts),
            });
        }
        let mut seen: HashMap<(u32, u64, u16), Vec<u32>> = HashMap::new();
        for (i, r) in self.records.iter().enumerate() {
            let fail = |m: String| Err(Error::TraceFormat { offset: i, message: m });
            if r.expert as usize >= h.n_experts {
                return fail(format!("expert {} >= N = {}", r.expert, h.n_experts));
            }
            if r.rank as usize >= h.top_k {
                return fail(format!("rank {} >= k = {}", r.rank, h.top_k));
            }
            if r.layer as usize >= h.n_layers {
                return fail(format!("layer {} >= {}", r.layer, h.n_layers));
            }
            if !(0.0..=1.0).contains(&r.gate_weight) {
                return fail(format!("gate weight {} outside [0, 1]", r.gate_weight));
            }
            let chosen = seen.entry((r.epoch, r.token, r.layer)).or_default();
            if chosen.contains(&r.expert) {
                return fail(format!(
                    "token {} layer {} selects expert {} twice",
                    r.token, r.layer, r.expert
                ));
            }
            chosen.push(r.expert);
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl<R: Read>(reader: R) -> Result<Self> {
        let mut lines = BufReader::new(reader).lines();
        let io = |e: std::io::Error, offset| Error::TraceFormat {
            offset,
            message: e.to_string(),
        };
        let first = match lines.next() {
            Some(l) => l.map_err(|e| io(e, 0))?,
            None => return Err(Error::EmptyTrace),
        };
        if first.trim().is_empty() {
            return Err(Error::EmptyTrace);
        }
        let header: TraceHeader = serde_json::from_str(&first).map_err(|e| Error::TraceFormat {
            offset: 0,
            message: format!("header: {e}"),
        })?;
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| io(e, i))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: TraceRecord = serde_json::from_str(&line).map_err(|e| Error::TraceFormat {
                offset: i,
                message: e.to_string(),
            })?;
            records.push(r);
        }
        let t = Self { header, records };
        t.validate()?;
        Ok(t)
    }

    pub fn to_binary(&self) -> Vec<u8> {
        let json = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + RECORD_BYTES * self.records.len());
        out.extend_from_slice(BINARY_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for r in &self.records {
            out.extend_from_slice(&r.epoch.to_le_bytes());
            out.extend_from_slice(&r.layer.to_le_bytes());
            out.push(r.rank);
            out.push(r.ce_loss.is_some() as u8);
            out.extend_from_slice(&r.token.to_le_bytes());
            out.extend_from_slice(&r.expert.to_le_bytes());
            out.extend_from_slice(&r.gate_weight.to_le_bytes());
            out.extend_from_slice(&r.ce_loss.unwrap_or(0.0).to_le_bytes());
        }
        out
    }

    pub fn from_binary(bytes: &[u8]) -> Result<Self> {
        let fail = |offset, m: &str| Error::TraceFormat {
            offset,
            message: m.to_string(),
        };
        if bytes.is_empty() {
            return Err(Error::EmptyTrace);
        }
        if bytes.len() < 16 || &bytes[..8] != BINARY_MAGIC {
            return Err(fail(0, "missing binary trace magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let hjson = bytes.get(16..16 + hlen).ok_or_else(|| fail(0, "truncated header"))?;
        let header: TraceHeader =
            serde_json::from_slice(hjson).map_err(|e| fail(0, &format!("header: {e}")))?;
        let body = &bytes[16 + hlen..];
        if body.len() % RECORD_BYTES != 0 {
            return Err(fail(body.len() / RECORD_BYTES, "truncated record"));
        }
        let u32_at = |c: &[u8], o: usize| u32::from_le_bytes(c[o..o + 4].try_into().expect("4 bytes"));
        let mut records = Vec::with_capacity(body.len() / RECORD_BYTES);
        for (i, c) in body.chunks_exact(RECORD_BYTES).enumerate() {
            let has_loss = match c[7] {
                0 => false,
                1 => true,
                _ => return Err(fail(i, "bad loss flag")),
            };
            records.push(TraceRecord {
                epoch: u32_at(c, 0),
                layer: u16::from_le_bytes([c[4], c[5]]),
                rank: c[6],
                token: u64::from_le_bytes(c[8..16].try_into().expect("8 bytes")),
                expert: u32_at(c, 16),
                gate_weight: f32::from_bits(u32_at(c, 20)),
                ce_loss: has_loss.then(|| f32::from_bits(u32_at(c, 24))),
            });
        }
        let t = Self { header, records };
        t.validate()?;
        Ok(t)
    }

    /// Reads either encoding, detected from the leading bytes.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.starts_with(BINARY_MAGIC) {
            Self::from_binary(&bytes)
        } else {
            Self::from_jsonl(bytes.as_slice())
        }
    }

    /// Writes binary when the extension is `.bin`, JSONL otherwise.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = if path.extension().is_some_and(|e| e == "bin") {
            self.to_binary()
        } else {
            self.to_jsonl().into_bytes()
        };
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header() -> TraceHeader {
        TraceHeader {
            format: FORMAT.into(),
            spec_digest: "00".into(),
            n_experts: 4,
            n_layers: 2,
            top_k: 2,
            d_model: 4,
            expert_sizes: vec![6, 2, 4, 4],
        }
    }

    fn sample() -> RoutingTrace {
        let mut t = RoutingTrace::new(header());
        for tok in 0..5u64 {
            for layer in 0..2u16 {
                for rank in 0..2u8 {
                    t.records.push(TraceRecord {
                        epoch: 1,
                        layer,
                        token: tok,
                        rank,
                        expert: ((tok as u32) + rank as u32 * 2) % 4,
                        gate_weight: 0.1 + 0.3 * rank as f32,
                        ce_loss: (tok % 2 == 0).then_some(1.0 / (tok as f32 + 3.0)),
                    });
                }
            }
        }
        t
    }

    #[test]
    fn encodings_round_trip_bitwise() {
        let t = sample();
        let j = RoutingTrace::from_jsonl(t.to_jsonl().as_bytes()).unwrap();
        let b = RoutingTrace::from_binary(&t.to_binary()).unwrap();
        assert_eq!(j, t);
        assert_eq!(b, t);
        assert_eq!(t.to_binary().len(), 16 + serde_json::to_vec(&t.header).unwrap().len() + 28 * t.records.len());
    }

    #[test]
    fn malformed_record_reports_offset() {
        let mut text = sample().to_jsonl();
        text.push_str("{\"epoch\":1}\n");
        match RoutingTrace::from_jsonl(text.as_bytes()) {
            Err(Error::TraceFormat { offset, .. }) => assert_eq!(offset, 20),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn out_of_range_and_duplicates_are_rejected() {
        let mut t = sample();
        t.records[3].expert = 9;
        assert!(matches!(t.validate(), Err(Error::TraceFormat { offset: 3, .. })));
        let mut t = sample();
        t.records[1].expert = t.records[0].expert;
        assert!(matches!(t.validate(), Err(Error::TraceFormat { offset: 1, .. })));
    }

    #[test]
    fn empty_input_is_an_empty_trace() {
        assert!(matches!(RoutingTrace::from_jsonl(&b""[..]), Err(Error::EmptyTrace)));
        assert!(matches!(RoutingTrace::from_binary(&[]), Err(Error::EmptyTrace)));
    }
}
