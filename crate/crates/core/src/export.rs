//! Plain-text exports: norm and attention-value histograms as CSV, and
//! head-averaged CLS attention maps as CSV and PGM.
//!
//! Every file starts with `#` comment lines carrying a [`Provenance`] record,
//! so a plot can be traced back to the run that produced it.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifacts::{ArtifactSet, Histogram};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// What produced an export.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool_version: String,
    pub seed: Option<u64>,
    pub theta: Option<f32>,
    pub source: Option<String>,
    pub strategy: Option<String>,
    /// Hex digest of the model config, computed by the caller.
    pub config_hash: Option<String>,
}

impl Provenance {
    pub fn header(&self) -> String {
        let opt = |v: Option<String>| v.unwrap_or_else(|| "-".into());
        format!(
            "# tool_version={}\n# seed={}\n# theta={}\n# source={}\n# strategy={}\n# config_hash={}\n",
            self.tool_version,
            opt(self.seed.map(|s| s.to_string())),
            opt(self.theta.map(|t| t.to_string())),
            opt(self.source.clone()),
            opt(self.strategy.clone()),
            opt(self.config_hash.clone()),
        )
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `bin_left,bin_right,count` rows.
pub fn histogram_csv(hist: &Histogram, prov: &Provenance) -> String {
    let mut s = prov.header();
    s.push_str("bin_left,bin_right,count\n");
    for (b, c) in hist.counts.iter().enumerate() {
        let (l, r) = hist.edges(b);
        let _ = writeln!(s, "{l},{r},{c}");
    }
    s
}

pub fn write_histogram_csv(path: &Path, hist: &Histogram, prov: &Provenance) -> Result<()> {
    write_text(path, &histogram_csv(hist, prov))
}

/// Attention values to non-CLS tokens, split by artifact membership.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitHistogram {
    pub normal: Histogram,
    pub artifact: Histogram,
}

/// Histogram the row-0 attention weights (`H × T` per image) over tokens
/// `1..T`, one count per (image, head, token).
pub fn attention_value_histogram(rows0: &[&Matrix], sets: &[&ArtifactSet], bins: usize) -> Result<SplitHistogram> {
    if rows0.len() != sets.len() {
        return Err(Error::Shape(format!(
            "{} attention maps but {} artifact sets",
            rows0.len(),
            sets.len()
        )));
    }
    if bins == 0 {
        return Err(Error::InvalidArgument("histogram needs at least one bin".into()));
    }
    let max = rows0
        .iter()
        .flat_map(|m| (0..m.rows()).flat_map(move |h| m.row(h)[1..].iter().copied()))
        .fold(0.0f32, f32::max);
    let hi = if max > 0.0 { max * 1.0001 } else { 1.0 };
    let mut normal = Histogram::new(0.0, hi, bins);
    let mut artifact = Histogram::new(0.0, hi, bins);
    for (m, set) in rows0.iter().zip(sets) {
        for h in 0..m.rows() {
            for (t, &v) in m.row(h).iter().enumerate().skip(1) {
                if set.contains(t) {
                    artifact.add(v);
                } else {
                    normal.add(v);
                }
            }
        }
    }
    Ok(SplitHistogram { normal, artifact })
}

pub fn split_histogram_csv(h: &SplitHistogram, prov: &Provenance) -> String {
    let mut s = prov.header();
    s.push_str("bin_left,bin_right,normal,artifact\n");
    for b in 0..h.normal.bins() {
        let (l, r) = h.normal.edges(b);
        let _ = writeln!(s, "{l},{r},{},{}", h.normal.counts[b], h.artifact.counts[b]);
    }
    s
}

/// Head-averaged CLS attention to the patch tokens as a `g × g` grid.
/// `row0` is `H × T` with tokens ordered CLS, registers, patches.
pub fn attention_grid(row0: &Matrix, num_registers: usize, grid: usize) -> Result<Matrix> {
    let first = 1 + num_registers;
    if row0.cols() != first + grid * grid {
        return Err(Error::Shape(format!(
            "row of {} tokens does not hold {} registers and a {grid}x{grid} grid",
            row0.cols(),
            num_registers
        )));
    }
    let heads = row0.rows();
    let mut out = Matrix::zeros(grid, grid);
    for p in 0..grid * grid {
        let mut sum = 0.0f32;
        for h in 0..heads {
            sum += row0.get(h, first + p);
        }
        out.set(p / grid, p % grid, sum / heads as f32);
    }
    Ok(out)
}

pub fn grid_csv(grid: &Matrix, prov: &Provenance) -> String {
    let mut s = prov.header();
    for r in 0..grid.rows() {
        let row: Vec<String> = grid.row(r).iter().map(|v| v.to_string()).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

/// ASCII PGM (P2), min-max scaled to `0..=255`.
pub fn grid_pgm(grid: &Matrix, prov: &Provenance) -> String {
    let (lo, hi) = grid
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut s = String::from("P2\n");
    s.push_str(&prov.header());
    let _ = writeln!(s, "{} {}\n255", grid.cols(), grid.rows());
    for r in 0..grid.rows() {
        let row: Vec<String> = grid
            .row(r)
            .iter()
            .map(|&v| (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0).to_string())
            .collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

pub fn write_grid(dir: &Path, stem: &str, grid: &Matrix, prov: &Provenance) -> Result<()> {
    write_text(&dir.join(format!("{stem}.csv")), &grid_csv(grid, prov))?;
    write_text(&dir.join(format!("{stem}.pgm")), &grid_pgm(grid, prov))
}

pub fn write_split_histogram_csv(path: &Path, h: &SplitHistogram, prov: &Provenance) -> Result<()> {
    write_text(path, &split_histogram_csv(h, prov))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn data_lines(s: &str) -> Vec<&str> {
        s.lines().filter(|l| !l.starts_with('#')).collect()
    }

    #[test]
    fn histogram_csv_counts_every_value() {
        let mut h = Histogram::new(0.0, 4.0, 4);
        for v in [0.5, 1.5, 1.6, 3.9, 3.99] {
            h.add(v);
        }
        let prov = Provenance {
            tool_version: "0.1.0".into(),
            seed: Some(3),
            ..Default::default()
        };
        let csv = histogram_csv(&h, &prov);
        assert!(csv.starts_with("# tool_version=0.1.0\n# seed=3\n"));
        let lines = data_lines(&csv);
        assert_eq!(lines[0], "bin_left,bin_right,count");
        let total: u64 = lines[1..].iter().map(|l| l.rsplit(',').next().unwrap().parse::<u64>().unwrap()).sum();
        assert_eq!(total, 5);
    }

    #[test]
    fn attention_values_split_along_the_set() {
        let m = Matrix::from_rows(&[vec![0.1, 0.5, 0.2, 0.2], vec![0.3, 0.1, 0.5, 0.1]]).unwrap();
        let set = ArtifactSet::fixed(vec![2]);
        let h = attention_value_histogram(&[&m], &[&set], 8).unwrap();
        assert_eq!(h.artifact.total(), 2);
        assert_eq!(h.normal.total(), 4);
        assert!(attention_value_histogram(&[&m], &[], 8).is_err());
    }

    #[test]
    fn grid_averages_heads_and_skips_registers() {
        // CLS, one register, 2x2 patches
        let m = Matrix::from_rows(&[vec![0.0, 9.0, 1.0, 2.0, 3.0, 4.0], vec![0.0, 9.0, 3.0, 2.0, 1.0, 0.0]]).unwrap();
        let g = attention_grid(&m, 1, 2).unwrap();
        assert_eq!(g.data(), &[2.0, 2.0, 2.0, 2.0]);
        assert!(attention_grid(&m, 0, 2).is_err());
        let pgm = grid_pgm(&g, &Provenance::default());
        assert!(pgm.starts_with("P2\n#"));
        assert!(pgm.contains("2 2\n255\n0 0\n0 0\n"));
    }
}
