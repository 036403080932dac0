//! Layer × expert count grids as CSV and standalone SVG.

use std::fmt::Write as _;
use std::path::Path;

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub cells: Vec<Vec<u64>>,
}

impl Heatmap {
    pub fn new(row_labels: Vec<String>, col_labels: Vec<String>, cells: Vec<Vec<u64>>) -> Result<Self> {
        if cells.len() != row_labels.len() || cells.iter().any(|r| r.len() != col_labels.len()) {
            return Err(Error::Argument("heatmap grid must be rectangular and match its labels".into()));
        }
        Ok(Self {
            row_labels,
            col_labels,
            cells,
        })
    }

    /// Reorders columns by descending `sizes`; equal sizes keep their order.
    pub fn by_descending_size(
        row_labels: Vec<String>,
        col_labels: Vec<String>,
        cells: Vec<Vec<u64>>,
        sizes: &[usize],
    ) -> Result<Self> {
        if sizes.len() != col_labels.len() {
            return Err(Error::Argument("one size per column required".into()));
        }
        let mut order: Vec<usize> = (0..sizes.len()).collect();
        order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]));
        let cols = order.iter().map(|&c| col_labels[c].clone()).collect();
        let cells = cells
            .iter()
            .map(|r| order.iter().map(|&c| r[c]).collect())
            .collect();
        Self::new(row_labels, cols, cells)
    }

    /// Bare matrix, one row per line.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in &self.cells {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn fill(&self, value: u64) -> String {
        let max = self.cells.iter().flatten().copied().max().unwrap_or(0);
        let t = if max == 0 { 0.0 } else { value as f64 / max as f64 };
        // white → dark blue
        let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
        format!("#{:02x}{:02x}{:02x}", lerp(247.0, 8.0), lerp(251.0, 48.0), lerp(255.0, 107.0))
    }

    pub fn to_svg(&self) -> String {
        let (cw, ch, left, top) = (56usize, 28usize, 72usize, 36usize);
        let w = left + cw * self.col_labels.len() + 8;
        let h = top + ch * self.row_labels.len() + 8;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#
        );
        for (c, label) in self.col_labels.iter().enumerate() {
            let x = left + c * cw + cw / 2;
            let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{label}</text>"#, top - 10);
        }
        for (r, label) in self.row_labels.iter().enumerate() {
            let y = top + r * ch;
            let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{label}</text>"#, left - 6, y + ch / 2 + 4);
            for (c, &v) in self.cells[r].iter().enumerate() {
                let x = left + c * cw;
                let _ = writeln!(
                    s,
                    r#"<rect x="{x}" y="{y}" width="{cw}" height="{ch}" fill="{}"><title>{v}</title></rect>"#,
                    self.fill(v)
                );
            }
        }
        s.push_str("</svg>\n");
        s
    }

    /// Writes `<stem>.csv` and `<stem>.svg`.
    pub fn emit(&self, stem: &Path) -> Result<()> {
        write_atomic(&stem.with_extension("csv"), self.to_csv().as_bytes())?;
        write_atomic(&stem.with_extension("svg"), self.to_svg().as_bytes())
    }
}
