//! Line-delimited detection records and portable graymap output.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use freqscan::detect::BBox;
use serde::{Deserialize, Serialize};

/// One box of one image; ground truth carries score 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub image_id: u64,
    pub class: usize,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub score: f64,
}

impl Record {
    pub fn from_box(image_id: u64, b: &BBox) -> Self {
        Self { image_id, class: b.class_id, x1: b.x1, y1: b.y1, x2: b.x2, y2: b.y2, score: b.score }
    }

    pub fn to_box(&self) -> BBox {
        BBox::new(self.x1, self.y1, self.x2, self.y2, self.class).with_score(self.score)
    }
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}: bad record", path.display(), i + 1)))
        .collect()
}

/// Records of each image as box lists, in `image_ids` order.
pub fn group_by_image(records: &[Record], image_ids: &[u64]) -> Vec<Vec<BBox>> {
    image_ids.iter().map(|id| records.iter().filter(|r| r.image_id == *id).map(Record::to_box).collect()).collect()
}

/// Binary 8-bit PGM of values in `[0, 1]`.
pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    if values.len() != width * height {
        bail!("{} values for a {}x{} image", values.len(), width, height);
    }
    let mut f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write!(f, "P5\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    f.write_all(&bytes)?;
    Ok(())
}
