//! Tooling around the `freqscan` detector: synthetic scenes, configuration,
//! training and evaluation, ablation grids, invariant checks, and reports.

pub mod config;
pub mod data;
pub mod train;
pub mod erf;
pub mod records;
pub mod scan_report;
pub mod ablate;
pub mod invariants;
