//! Captured attention score matrices and their CSV/SVG export.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// One row-stochastic `N×N` matrix per attention channel for a single scan.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionScores {
    pub regions: usize,
    /// `channels[λ]` is row-major `N×N`.
    pub channels: Vec<Vec<f64>>,
}

impl AttentionScores {
    /// Extracts sample `sample` from a `B×C×N×N` score variable.
    pub fn from_tape(tape: &Tape, scores: Var, sample: usize) -> Result<Self> {
        let s = tape.shape(scores);
        let &[batch, channels, n, n2] = s else {
            return Err(Error::dim(format!("scores must be B×C×N×N, got {s:?}")));
        };
        if n != n2 || sample >= batch {
            return Err(Error::dim(format!("cannot take sample {sample} of scores {s:?}")));
        }
        let data = tape.value(scores).data();
        let per = n * n;
        Ok(AttentionScores {
            regions: n,
            channels: (0..channels)
                .map(|c| {
                    let off = (sample * channels + c) * per;
                    data[off..off + per].to_vec()
                })
                .collect(),
        })
    }

    pub fn get(&self, channel: usize, i: usize, j: usize) -> f64 {
        self.channels[channel][i * self.regions + j]
    }

    /// Largest `|Σ_j P[i][j] − 1|` over every row of every channel.
    pub fn max_row_sum_error(&self) -> f64 {
        self.channels
            .iter()
            .flat_map(|m| m.chunks(self.regions))
            .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Writes `attn_ch{λ}.csv` and `attn_ch{λ}.svg` for every channel.
    pub fn export(&self, dir: &Path, region_names: Option<&[String]>) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for (ch, m) in self.channels.iter().enumerate() {
            let csv = dir.join(format!("attn_ch{ch}.csv"));
            fs::write(&csv, matrix_csv(m, self.regions))?;
            let svg = dir.join(format!("attn_ch{ch}.svg"));
            fs::write(&svg, heatmap_svg(m, self.regions, &format!("channel {ch}"), region_names))?;
            written.push(csv);
            written.push(svg);
        }
        Ok(written)
    }
}

pub fn matrix_csv(m: &[f64], n: usize) -> String {
    let mut out = String::new();
    for row in m.chunks(n) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Reads a square matrix written by [`AttentionScores::export`].
pub fn read_matrix_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let row = line
            .split(',')
            .enumerate()
            .map(|(col, cell)| {
                cell.trim().parse::<f64>().map_err(|_| Error::Ingestion {
                    path: path.to_path_buf(),
                    line: line_no + 1,
                    column: col + 1,
                    message: format!("cell {cell:?} is not a number"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.iter().any(|r| r.len() != rows.len()) {
        return Err(Error::Data(format!("{} is not a square matrix", path.display())));
    }
    Ok(rows)
}

/// Heatmap with each row scaled to its own min..max range.
pub fn heatmap_svg(m: &[f64], n: usize, title: &str, names: Option<&[String]>) -> String {
    let cell = if n > 60 { 6 } else { 600 / n.max(1) }.max(4);
    let margin = if names.is_some() { 80 } else { 10 };
    let top = 30;
    let size = cell * n;
    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#,
        w = size + margin + 10,
        h = size + top + 10
    )
    .unwrap();
    writeln!(svg, r#"<title>{}</title>"#, escape(title)).unwrap();
    writeln!(
        svg,
        r#"<text x="{margin}" y="20" font-family="sans-serif" font-size="14">{}</text>"#,
        escape(title)
    )
    .unwrap();
    for (i, row) in m.chunks(n).enumerate() {
        let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        if let Some(names) = names {
            writeln!(
                svg,
                r#"<text x="{}" y="{}" font-family="sans-serif" font-size="{}" text-anchor="end">{}</text>"#,
                margin - 2,
                top + i * cell + cell,
                cell.min(10),
                escape(&names[i])
            )
            .unwrap();
        }
        for (j, &v) in row.iter().enumerate() {
            let x = if span > 0.0 { (v - lo) / span } else { 0.5 };
            writeln!(
                svg,
                r#"<rect x="{}" y="{}" width="{cell}" height="{cell}" fill="{}"><title>{i},{j}: {v:.6}</title></rect>"#,
                margin + j * cell,
                top + i * cell,
                color(x)
            )
            .unwrap();
        }
    }
    svg.push_str("</svg>\n");
    svg
}

/// Dark blue → yellow ramp.
pub fn color(x: f64) -> String {
    let x = x.clamp(0.0, 1.0);
    let r = (68.0 + x * (253.0 - 68.0)) as u8;
    let g = (1.0 + x * (231.0 - 1.0)) as u8;
    let b = (84.0 + x * (37.0 - 84.0)) as u8;
    format!("#{r:02x}{g:02x}{b:02x}")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
