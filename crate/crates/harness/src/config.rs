//! Run configuration: a sectioned TOML file plus `section.key=value` overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use freqscan::detect::DetectorConfig;
use freqscan::hilbert::ScanVariant;
use freqscan::hsfa::HsfaToggles;
use freqscan::nn::AdamConfig;
use freqscan::vssm::BackboneConfig;
use serde::{Deserialize, Serialize};

use crate::data::NUM_CLASSES;

/// Root directory for every output path.
pub const OUTPUT_ROOT_ENV: &str = "FREQSCAN_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub widths: [usize; 4],
    pub depths: [usize; 4],
    pub d_state: usize,
    pub scan: ScanVariant,
    pub use_hsfa: bool,
    pub use_lh_info: bool,
    pub use_spatial: bool,
    pub fpn_width: usize,
    pub head_depth: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            widths: [32, 64, 128, 256],
            depths: [1, 1, 2, 1],
            d_state: 8,
            scan: ScanVariant::HilbertBiDir,
            use_hsfa: true,
            use_lh_info: true,
            use_spatial: true,
            fpn_width: 32,
            head_depth: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub lambda_reg: f64,
    pub lambda_ctr: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        Self { lambda_reg: 1.0, lambda_ctr: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimSection {
    fn default() -> Self {
        let a = AdamConfig::default();
        Self { lr: 1e-3, weight_decay: a.weight_decay, beta1: a.beta1, beta2: a.beta2, eps: a.eps }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    /// Model initialisation and batch order.
    pub seed: u64,
    /// Scene generation.
    pub data_seed: u64,
    pub image_size: usize,
    pub dataset_size: usize,
    pub precision: Precision,
    pub flip: bool,
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub eval_val_each_epoch: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            seed: 0,
            data_seed: 0,
            image_size: 64,
            dataset_size: 200,
            precision: Precision::F32,
            flip: true,
            score_thresh: 0.05,
            nms_iou: 0.6,
            eval_val_each_epoch: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Run directory, resolved against the output root when relative.
    pub dir: String,
    pub save_checkpoints: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: "default".into(), save_checkpoints: true }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub loss: LossSection,
    pub optim: OptimSection,
    pub train: TrainSection,
    pub output: OutputSection,
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl RunConfig {
    /// Parses `text`, applies `overrides` (`section.key=value`), and validates.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().context("config is not valid TOML")?;
        for ov in overrides {
            let (key, raw) = ov.split_once('=').with_context(|| format!("override `{ov}` is not key=value"))?;
            let (section, field) =
                key.trim().split_once('.').with_context(|| format!("override key `{key}` must be section.field"))?;
            let entry = table.entry(section.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
            let sect = entry.as_table_mut().with_context(|| format!("`{section}` is not a section"))?;
            sect.insert(field.to_string(), parse_value(raw.trim()));
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 {
            bail!("train.epochs and train.batch_size must be at least 1");
        }
        if t.dataset_size < 10 {
            bail!("train.dataset_size must be at least 10, got {}", t.dataset_size);
        }
        if t.image_size == 0 || t.image_size % 64 != 0 {
            bail!("train.image_size must be a positive multiple of 64, got {}", t.image_size);
        }
        if !(0.0..=1.0).contains(&t.score_thresh) || !(0.0..=1.0).contains(&t.nms_iou) {
            bail!("train.score_thresh and train.nms_iou must lie in [0, 1]");
        }
        let o = &self.optim;
        if !(o.lr.is_finite() && o.lr > 0.0) {
            bail!("optim.lr must be positive and finite, got {}", o.lr);
        }
        if !(o.weight_decay >= 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            bail!("optim: weight_decay >= 0, beta1/beta2 in [0, 1) and eps > 0 are required");
        }
        self.detector_config().validate().map_err(|e| anyhow::anyhow!("model: {e}"))?;
        Ok(())
    }

    pub fn detector_config(&self) -> DetectorConfig {
        let m = &self.model;
        DetectorConfig {
            backbone: BackboneConfig {
                in_channels: 1,
                widths: m.widths,
                depths: m.depths,
                d_state: m.d_state,
                scan: m.scan,
                use_hsfa: m.use_hsfa,
                hsfa: HsfaToggles { use_lh_info: m.use_lh_info, use_spatial: m.use_spatial },
                height: self.train.image_size,
                width: self.train.image_size,
            },
            num_classes: NUM_CLASSES,
            fpn_width: m.fpn_width,
            head_depth: m.head_depth,
            lambda_reg: self.loss.lambda_reg,
            lambda_ctr: self.loss.lambda_ctr,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        let o = &self.optim;
        AdamConfig { beta1: o.beta1, beta2: o.beta2, eps: o.eps, weight_decay: o.weight_decay }
    }

    /// Run directory: `output.dir` under the root named by [`OUTPUT_ROOT_ENV`]
    /// (current directory when unset); absolute paths are used as is.
    pub fn run_dir(&self) -> PathBuf {
        resolve_output(&self.output.dir)
    }
}

pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."))
}

pub fn resolve_output(dir: &str) -> PathBuf {
    let p = Path::new(dir);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        output_root().join(p)
    }
}
