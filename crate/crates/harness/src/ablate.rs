//! Toggle and scan-variant ablation grids.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use freqscan::hilbert::ScanVariant;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::train::{train, write_json, MetricsReport};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Table {
    Toggles,
    ScanVariants,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationCase {
    pub table: Table,
    pub label: String,
    pub use_hsfa: bool,
    pub use_lh_info: bool,
    pub use_spatial: bool,
    pub scan: ScanVariant,
}

impl AblationCase {
    fn full(table: Table, label: &str, scan: ScanVariant) -> Self {
        Self { table, label: label.into(), use_hsfa: true, use_lh_info: true, use_spatial: true, scan }
    }

    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        c.model.use_hsfa = self.use_hsfa;
        c.model.use_lh_info = self.use_lh_info;
        c.model.use_spatial = self.use_spatial;
        c.model.scan = self.scan;
        c.output.dir = PathBuf::from(&base.output.dir).join(&self.label).to_string_lossy().into_owned();
        c
    }
}

/// Baseline (bidirectional Hilbert, no HSFA), LH-info only, spatial only,
/// raster bidirectional with both branches, and the full model.
pub fn toggle_cases() -> Vec<AblationCase> {
    let hb = ScanVariant::HilbertBiDir;
    vec![
        AblationCase {
            table: Table::Toggles,
            label: "baseline".into(),
            use_hsfa: false,
            use_lh_info: false,
            use_spatial: false,
            scan: hb,
        },
        AblationCase {
            table: Table::Toggles,
            label: "lh-info".into(),
            use_hsfa: true,
            use_lh_info: true,
            use_spatial: false,
            scan: hb,
        },
        AblationCase {
            table: Table::Toggles,
            label: "spatial".into(),
            use_hsfa: true,
            use_lh_info: false,
            use_spatial: true,
            scan: hb,
        },
        AblationCase::full(Table::Toggles, "raster-bi-dir-full", ScanVariant::RasterBiDir),
        AblationCase::full(Table::Toggles, "full", hb),
    ]
}

pub fn scan_cases() -> Vec<AblationCase> {
    ScanVariant::HILBERT.iter().map(|&v| AblationCase::full(Table::ScanVariants, v.name(), v)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub table: Table,
    pub use_hsfa: bool,
    pub use_lh_info: bool,
    pub use_spatial: bool,
    pub scan: ScanVariant,
    pub params: usize,
    #[serde(flatten)]
    pub report: MetricsReport,
}

/// Trains and evaluates every case on the shared seeds of `base`. Cases whose
/// effective configuration matches an earlier one reuse its result.
pub fn ablate(base: &RunConfig, cases: &[AblationCase], verbose: bool) -> Result<Vec<AblationRow>> {
    let mut rows: Vec<AblationRow> = Vec::with_capacity(cases.len());
    let mut done: Vec<(RunConfig, usize)> = Vec::new();
    for case in cases {
        let cfg = case.apply(base);
        let mut key = cfg.clone();
        key.output = base.output.clone();
        let (metrics, params) = match done.iter().find(|(k, _)| *k == key) {
            Some(&(_, i)) => (rows[i].report.metrics, rows[i].params),
            None => {
                if verbose {
                    eprintln!("ablate: {}", case.label);
                }
                let out = train(&cfg, verbose).with_context(|| format!("ablation case `{}`", case.label))?;
                done.push((key, rows.len()));
                (out.test, out.param_count)
            }
        };
        rows.push(AblationRow {
            table: case.table.clone(),
            use_hsfa: case.use_hsfa,
            use_lh_info: case.use_lh_info,
            use_spatial: case.use_spatial,
            scan: case.scan,
            params,
            report: MetricsReport { run: case.label.clone(), split: "test".into(), metrics },
        });
    }
    Ok(rows)
}

fn mark(b: bool) -> &'static str {
    if b {
        "x"
    } else {
        "-"
    }
}

pub fn format_table(rows: &[AblationRow]) -> String {
    let mut s = String::new();
    writeln!(
        s,
        "{:<20} {:<18} {:>4} {:>3} {:>3} {:>8} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6}",
        "run", "scan", "hsfa", "lh", "sp", "params", "AP50", "AP60", "AP70", "mAP", "AR50", "AR60", "AR70", "mAR"
    )
    .expect("string write");
    for r in rows {
        let m = &r.report.metrics;
        writeln!(
            s,
            "{:<20} {:<18} {:>4} {:>3} {:>3} {:>8} {:>6.2} {:>6.2} {:>6.2} {:>6.2} {:>6.2} {:>6.2} {:>6.2} {:>6.2}",
            r.report.run,
            r.scan.name(),
            mark(r.use_hsfa),
            mark(r.use_hsfa && r.use_lh_info),
            mark(r.use_hsfa && r.use_spatial),
            r.params,
            100.0 * m.ap50,
            100.0 * m.ap60,
            100.0 * m.ap70,
            100.0 * m.map,
            100.0 * m.ar50,
            100.0 * m.ar60,
            100.0 * m.ar70,
            100.0 * m.mar
        )
        .expect("string write");
    }
    s
}

/// Writes `ablation.json` and `ablation.txt` into the base run directory.
pub fn write_ablation(base: &RunConfig, rows: &[AblationRow]) -> Result<PathBuf> {
    let dir = base.run_dir();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_json(&dir.join("ablation.json"), &rows)?;
    fs::write(dir.join("ablation.txt"), format_table(rows))?;
    Ok(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids_are_valid_configs() {
        let base = RunConfig::default();
        let cases: Vec<_> = toggle_cases().into_iter().chain(scan_cases()).collect();
        assert_eq!(cases.len(), 10);
        for c in &cases {
            c.apply(&base).validate().unwrap();
        }
        let labels: std::collections::HashSet<_> = cases.iter().map(|c| c.label.clone()).collect();
        assert_eq!(labels.len(), 10);
    }
}
