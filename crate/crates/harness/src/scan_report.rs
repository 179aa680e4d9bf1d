//! Locality table over every scan variant.

use std::fmt::Write as _;

use anyhow::{bail, Context, Result};
use freqscan::hilbert::{LocalityReport, ScanOrder, ScanVariant};

#[derive(Clone, Debug, PartialEq)]
pub struct LocalityRow {
    pub variant: ScanVariant,
    pub path_index: usize,
    pub height: usize,
    pub width: usize,
    pub mean_rank_gap: f64,
}

pub const CSV_HEADER: &str = "variant,path_index,H,W,mean_rank_gap";

/// One row per path of every variant on an `h × w` power-of-two square.
pub fn scan_report(h: usize, w: usize) -> Result<Vec<LocalityRow>> {
    if h != w || !h.is_power_of_two() || h < 2 {
        bail!("scan report needs a square power-of-two grid of side >= 2, got {h}x{w}");
    }
    let mut rows = Vec::new();
    for v in ScanVariant::ALL {
        let order = ScanOrder::build(v, h, w)?;
        let rep = LocalityReport::for_order(&order)?;
        for (p, &gap) in rep.per_path.iter().enumerate() {
            rows.push(LocalityRow { variant: v, path_index: p, height: h, width: w, mean_rank_gap: gap });
        }
    }
    Ok(rows)
}

pub fn to_csv(rows: &[LocalityRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        writeln!(s, "{},{},{},{},{}", r.variant, r.path_index, r.height, r.width, r.mean_rank_gap).expect("string write");
    }
    s
}

pub fn parse_csv(text: &str) -> Result<Vec<LocalityRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(CSV_HEADER) {
        bail!("missing locality CSV header");
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 {
                bail!("expected 5 fields in `{l}`");
            }
            Ok(LocalityRow {
                variant: f[0].parse()?,
                path_index: f[1].parse().context("path_index")?,
                height: f[2].parse().context("H")?,
                width: f[3].parse().context("W")?,
                mean_rank_gap: f[4].parse().context("mean_rank_gap")?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raster_row_and_round_trip() {
        let rows = scan_report(4, 4).unwrap();
        assert!(rows.iter().any(|r| r.variant == ScanVariant::RasterBiDir && r.mean_rank_gap == 2.5));
        assert_eq!(parse_csv(&to_csv(&rows)).unwrap(), rows);
        assert!(scan_report(4, 8).is_err() && scan_report(6, 6).is_err());
    }
}
