//! Per (epoch, layer, rank) expert token counts and their max/min ratio.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::analytics::trace::RoutingTrace;
use crate::error::{Error, Result};
use crate::moe::pairing::format_ratio;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct CountKey {
    pub epoch: u32,
    pub layer: u16,
    pub rank: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CountRow {
    pub key: CountKey,
    pub counts: Vec<u64>,
}

impl CountRow {
    pub fn max(&self) -> u64 {
        self.counts.iter().copied().max().unwrap_or(0)
    }

    pub fn min(&self) -> u64 {
        self.counts.iter().copied().min().unwrap_or(0)
    }

    /// `max / min`, or `+∞` when some expert received nothing.
    pub fn ratio(&self) -> f64 {
        max_min_ratio(&self.counts)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

pub fn max_min_ratio(counts: &[u64]) -> f64 {
    let max = counts.iter().copied().max().unwrap_or(0);
    let min = counts.iter().copied().min().unwrap_or(0);
    if min == 0 {
        f64::INFINITY
    } else {
        max as f64 / min as f64
    }
}

/// Two decimals, `inf` for the empty-expert sentinel.
pub fn render_ratio(r: f64) -> String {
    if r.is_infinite() {
        "inf".into()
    } else {
        format!("{r:.2}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CountTable {
    /// Column labels, one per expert (size ratios such as `4.5`).
    pub labels: Vec<String>,
    pub rows: BTreeMap<CountKey, CountRow>,
}

impl CountTable {
    pub fn n_experts(&self) -> usize {
        self.labels.len()
    }

    pub fn get(&self, epoch: u32, layer: u16, rank: u8) -> Option<&CountRow> {
        self.rows.get(&CountKey { epoch, layer, rank })
    }

    /// CSV with columns `epoch,layer,rank,<labels…>,max,min,max/min`.
    pub fn to_csv(&self) -> String {
        let mut out = format!("epoch,layer,rank,{},max,min,max/min\n", self.labels.join(","));
        for row in self.rows.values() {
            let counts: Vec<String> = row.counts.iter().map(u64::to_string).collect();
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                row.key.epoch,
                row.key.layer,
                row.key.rank,
                counts.join(","),
                row.max(),
                row.min(),
                render_ratio(row.ratio())
            ));
        }
        out
    }

    /// Parses the CSV written by [`CountTable::to_csv`]. Trailing
    /// `max,min,max/min` columns are optional and ignored; `#` lines are
    /// comments.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = rdr
            .headers()
            .map_err(|e| Error::Data(format!("count table header: {e}")))?
            .clone();
        let cols: Vec<&str> = headers.iter().collect();
        if cols.len() < 4 || cols[..3] != ["epoch", "layer", "rank"] {
            return Err(Error::Data("count table must start with epoch,layer,rank".into()));
        }
        let end = cols.iter().position(|&c| c == "max").unwrap_or(cols.len());
        let labels: Vec<String> = cols[3..end].iter().map(|s| s.to_string()).collect();
        let mut rows = BTreeMap::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Data(format!("count table row {i}: {e}")))?;
            let num = |j: usize| -> Result<u64> {
                rec.get(j)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::Data(format!("count table row {i}, column {j}")))
            };
            let key = CountKey {
                epoch: num(0)? as u32,
                layer: num(1)? as u16,
                rank: num(2)? as u8,
            };
            let counts = (3..end).map(num).collect::<Result<Vec<_>>>()?;
            rows.insert(key, CountRow { key, counts });
        }
        Ok(Self { labels, rows })
    }
}

/// Exact counts per (epoch, layer, rank, expert).
pub fn count_routing(trace: &RoutingTrace) -> Result<CountTable> {
    trace.validate()?;
    let h = &trace.header;
    let labels = h
        .expert_sizes
        .iter()
        .map(|&s| format_ratio(s as f64 / h.d_model.max(1) as f64))
        .collect();
    let mut rows: BTreeMap<CountKey, CountRow> = BTreeMap::new();
    for r in &trace.records {
        let key = CountKey {
            epoch: r.epoch,
            layer: r.layer,
            rank: r.rank,
        };
        let row = rows.entry(key).or_insert_with(|| CountRow {
            key,
            counts: vec![0; h.n_experts],
        });
        row.counts[r.expert as usize] += 1;
    }
    Ok(CountTable { labels, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_sentinel_and_rendering() {
        assert!(max_min_ratio(&[3, 0, 1]).is_infinite());
        assert_eq!(render_ratio(max_min_ratio(&[5, 5])), "1.00");
        assert_eq!(render_ratio(f64::INFINITY), "inf");
    }

    #[test]
    fn csv_round_trip() {
        let text = "# comment\nepoch,layer,rank,4.5,0.5,max,min,max/min\n7,0,0,3,1,3,1,3.00\n7,0,1,2,2,2,2,1.00\n";
        let t = CountTable::from_csv(text).unwrap();
        assert_eq!(t.labels, vec!["4.5", "0.5"]);
        assert_eq!(t.get(7, 0, 0).unwrap().counts, vec![3, 1]);
        assert_eq!(t.to_csv(), text.trim_start_matches("# comment\n"));
    }
}
