//! Detection decoding, class-wise NMS, and AP/AR at several IoU thresholds.

use serde::{Deserialize, Serialize};

use crate::autodiff::sigmoid;
use crate::detect::{box_iou, BBox, LevelGeometry};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor4;

pub const IOU_THRESHOLDS: [f64; 3] = [0.5, 0.6, 0.7];
pub const MAX_DETECTIONS: usize = 100;

/// Raw head outputs of one level for a single image.
#[derive(Clone, Debug)]
pub struct LevelPrediction {
    pub cls: Tensor4<f64>,
    pub reg: Tensor4<f64>,
    pub ctr: Tensor4<f64>,
}

/// Boxes scored by `sqrt(σ(cls) · σ(ctr))`, thresholded, clipped to the
/// image, passed through class-wise NMS, and capped at [`MAX_DETECTIONS`].
pub fn decode_detections(
    preds: &[LevelPrediction],
    levels: &[LevelGeometry],
    image_hw: (usize, usize),
    score_thresh: f64,
    nms_iou: f64,
) -> Result<Vec<BBox>> {
    if preds.len() != levels.len() {
        return Err(shape_err!("{} prediction levels for {} geometries", preds.len(), levels.len()));
    }
    let (ih, iw) = (image_hw.0 as f64, image_hw.1 as f64);
    let mut boxes = Vec::new();
    for (p, g) in preds.iter().zip(levels) {
        let [n, k, h, w] = p.cls.shape();
        if n != 1 || (h, w) != (g.height, g.width) || p.reg.shape() != [1, 4, h, w] || p.ctr.shape() != [1, 1, h, w] {
            return Err(shape_err!("level prediction {:?} does not match a {}x{} grid", p.cls.shape(), g.height, g.width));
        }
        for y in 0..h {
            for x in 0..w {
                let ctr = sigmoid(p.ctr.at([0, 0, y, x]));
                let (cx, cy) = g.center(y, x);
                let d = |j| p.reg.at([0, j, y, x]);
                for c in 0..k {
                    let score = (sigmoid(p.cls.at([0, c, y, x])) * ctr).sqrt();
                    if score < score_thresh {
                        continue;
                    }
                    let b = BBox::new(
                        (cx - d(0)).clamp(0.0, iw),
                        (cy - d(1)).clamp(0.0, ih),
                        (cx + d(2)).clamp(0.0, iw),
                        (cy + d(3)).clamp(0.0, ih),
                        c,
                    )
                    .with_score(score);
                    if b.x2 > b.x1 && b.y2 > b.y1 {
                        boxes.push(b);
                    }
                }
            }
        }
    }
    let mut kept = nms(&boxes, nms_iou);
    kept.truncate(MAX_DETECTIONS);
    Ok(kept)
}

fn by_score_desc(boxes: &mut [BBox]) {
    boxes.sort_by(|a, b| b.score.total_cmp(&a.score));
}

/// Greedy class-wise NMS; output sorted by descending score.
pub fn nms(boxes: &[BBox], iou: f64) -> Vec<BBox> {
    let mut sorted = boxes.to_vec();
    by_score_desc(&mut sorted);
    let mut kept: Vec<BBox> = Vec::new();
    for b in sorted {
        if kept.iter().all(|k| k.class_id != b.class_id || box_iou(k, &b) <= iou) {
            kept.push(b);
        }
    }
    kept
}

/// All-point area under the precision/recall step curve.
fn average_precision(tp: &[bool], num_gt: usize) -> f64 {
    let (mut recall, mut precision) = (Vec::new(), Vec::new());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        recall.push(hits as f64 / num_gt as f64);
        precision.push(hits as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut prev = 0.0;
    let mut ap = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev) * p;
        prev = *r;
    }
    ap
}

/// `(AP, AR)` for one class at one threshold over all images.
fn class_ap_ar(preds: &[Vec<BBox>], gts: &[Vec<BBox>], class: usize, thr: f64) -> (f64, f64) {
    let num_gt: usize = gts.iter().map(|g| g.iter().filter(|b| b.class_id == class).count()).sum();
    let mut scored: Vec<(f64, usize, BBox)> = Vec::new();
    for (img, p) in preds.iter().enumerate() {
        let mut mine: Vec<BBox> = p.to_vec();
        by_score_desc(&mut mine);
        mine.truncate(MAX_DETECTIONS);
        scored.extend(mine.into_iter().filter(|b| b.class_id == class).map(|b| (b.score, img, b)));
    }
    if num_gt == 0 {
        return if scored.is_empty() { (1.0, 1.0) } else { (0.0, 1.0) };
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = Vec::with_capacity(scored.len());
    for (_, img, b) in &scored {
        let mut best: Option<(f64, usize)> = None;
        for (j, g) in gts[*img].iter().enumerate() {
            if g.class_id != class || used[*img][j] {
                continue;
            }
            let iou = box_iou(b, g);
            if iou >= thr && best.map_or(true, |(v, _)| iou > v) {
                best = Some((iou, j));
            }
        }
        match best {
            Some((_, j)) => {
                used[*img][j] = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }
    let recall = tp.iter().filter(|&&t| t).count() as f64 / num_gt as f64;
    (average_precision(&tp, num_gt), recall)
}

/// Columns mirror the paper-style table: AP and AR at IoU 0.5/0.6/0.7 and
/// their means.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(rename = "AP50")]
    pub ap50: f64,
    #[serde(rename = "AP60")]
    pub ap60: f64,
    #[serde(rename = "AP70")]
    pub ap70: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "AR50")]
    pub ar50: f64,
    #[serde(rename = "AR60")]
    pub ar60: f64,
    #[serde(rename = "AR70")]
    pub ar70: f64,
    #[serde(rename = "mAR")]
    pub mar: f64,
}

impl Metrics {
    pub fn ap(&self) -> [f64; 3] {
        [self.ap50, self.ap60, self.ap70]
    }

    pub fn ar(&self) -> [f64; 3] {
        [self.ar50, self.ar60, self.ar70]
    }
}

/// Class-averaged AP/AR over `IOU_THRESHOLDS`; `preds[i]` and `gts[i]`
/// belong to image `i`.
pub fn evaluate(preds: &[Vec<BBox>], gts: &[Vec<BBox>], num_classes: usize) -> Result<Metrics> {
    if preds.len() != gts.len() {
        return Err(shape_err!("{} prediction lists for {} images", preds.len(), gts.len()));
    }
    let mut ap = [0.0; 3];
    let mut ar = [0.0; 3];
    for (t, &thr) in IOU_THRESHOLDS.iter().enumerate() {
        for c in 0..num_classes {
            let (a, r) = class_ap_ar(preds, gts, c, thr);
            ap[t] += a / num_classes as f64;
            ar[t] += r / num_classes as f64;
        }
    }
    Ok(Metrics {
        ap50: ap[0],
        ap60: ap[1],
        ap70: ap[2],
        map: ap.iter().sum::<f64>() / 3.0,
        ar50: ar[0],
        ar60: ar[1],
        ar70: ar[2],
        mar: ar.iter().sum::<f64>() / 3.0,
    })
}
