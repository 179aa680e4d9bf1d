//! Feature pyramid, shared FCOS head, target assignment, and the detection loss.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{iou_loss_ltrb, Var};
use crate::error::{invalid, shape_err, Result};
use crate::kernels::ConvGeom;
use crate::nn::{channel_vec, conv_weight, Binder, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor4;
use crate::vssm::{Backbone, BackboneConfig, NUM_STAGES};

pub const NUM_LEVELS: usize = 5;
pub const STRIDES: [usize; NUM_LEVELS] = [4, 8, 16, 32, 64];
/// Regression ranges at a 512-pixel input.
pub const RANGES_512: [(f64, f64); NUM_LEVELS] =
    [(0.0, 64.0), (64.0, 128.0), (128.0, 256.0), (256.0, 512.0), (512.0, f64::INFINITY)];
pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
pub const PROB_CLAMP: f64 = 1e-7;
pub const PRIOR_PROB: f64 = 0.01;

/// Axis-aligned box in pixels. `class_id` is zero-based.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub class_id: usize,
    pub score: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64, class_id: usize) -> Self {
        Self { x1, y1, x2, y2, class_id, score: 1.0 }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2, self.score].iter().all(|v| v.is_finite());
        if !finite || self.x2 <= self.x1 || self.y2 <= self.y1 {
            return Err(invalid!("degenerate box ({}, {}, {}, {})", self.x1, self.y1, self.x2, self.y2));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(invalid!("box score {} outside [0, 1]", self.score));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }
}

pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Summed sigmoid focal loss over post-sigmoid probabilities and 0/1 targets.
pub fn focal_loss(probs: &[f64], targets: &[f64]) -> f64 {
    probs
        .iter()
        .zip(targets)
        .map(|(&p, &t)| {
            let pt = if t > 0.5 { p } else { 1.0 - p };
            let at = if t > 0.5 { FOCAL_ALPHA } else { 1.0 - FOCAL_ALPHA };
            -at * (1.0 - pt).powf(FOCAL_GAMMA) * pt.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP).ln()
        })
        .sum()
}

/// `-ln IoU` of two boxes given as (l, t, r, b) distances from one location.
pub fn iou_loss(pred: [f64; 4], target: [f64; 4]) -> f64 {
    iou_loss_ltrb(pred, target).0
}

pub fn centerness([l, t, r, b]: [f64; 4]) -> f64 {
    ((l.min(r) / l.max(r)) * (t.min(b) / t.max(b))).sqrt()
}

/// Binary cross-entropy of probability `p` against soft target `t`.
pub fn bce(p: f64, t: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

/// Lateral 1×1 convs, nearest top-down merge, 3×3 smoothing, and one
/// stride-2 conv on the coarsest map.
#[derive(Clone, Debug)]
pub struct Fpn {
    pub in_widths: [usize; NUM_STAGES],
    pub width: usize,
}

fn conv_named<'t, T: Scalar>(
    bind: &Binder<'t, '_, T>,
    x: Var<'t, T>,
    name: &str,
    geom: ConvGeom,
) -> Result<Var<'t, T>> {
    x.conv2d(bind.param(&format!("{name}.weight"))?, Some(bind.param(&format!("{name}.bias"))?), geom)
}

fn insert_conv<T: Scalar>(store: &mut ParamStore<T>, name: &str, out: usize, inp: usize, k: usize, rng: &mut impl Rng) {
    store.insert(format!("{name}.weight"), conv_weight(out, inp, k, rng));
    store.insert(format!("{name}.bias"), channel_vec(out, 0.0));
}

impl Fpn {
    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        for (i, &c) in self.in_widths.iter().enumerate() {
            insert_conv(store, &format!("fpn.lateral{i}"), self.width, c, 1, rng);
            insert_conv(store, &format!("fpn.smooth{i}"), self.width, self.width, 3, rng);
        }
        insert_conv(store, "fpn.extra", self.width, self.width, 3, rng);
    }

    pub fn forward<'t, T: Scalar>(&self, bind: &Binder<'t, '_, T>, feats: &[Var<'t, T>]) -> Result<Vec<Var<'t, T>>> {
        if feats.len() != NUM_STAGES {
            return Err(shape_err!("FPN expects {} stage maps, got {}", NUM_STAGES, feats.len()));
        }
        let lateral: Vec<_> = feats
            .iter()
            .enumerate()
            .map(|(i, &f)| conv_named(bind, f, &format!("fpn.lateral{i}"), ConvGeom::new(1, 0, 1)))
            .collect::<Result<_>>()?;
        let mut merged = vec![lateral[NUM_STAGES - 1]; NUM_STAGES];
        for i in (0..NUM_STAGES - 1).rev() {
            let [_, _, h, w] = lateral[i].shape();
            let [_, _, hc, wc] = merged[i + 1].shape();
            if h % hc != 0 || h / hc != w / wc || w % wc != 0 {
                return Err(shape_err!("FPN level {}x{} is not an integer multiple of {}x{}", h, w, hc, wc));
            }
            let up = if h == hc { merged[i + 1] } else { merged[i + 1].upsample_nearest(h / hc)? };
            merged[i] = lateral[i].add(up)?;
        }
        let mut out: Vec<_> = merged
            .iter()
            .enumerate()
            .map(|(i, &m)| conv_named(bind, m, &format!("fpn.smooth{i}"), ConvGeom::same(3, 1)))
            .collect::<Result<_>>()?;
        let extra = conv_named(bind, out[NUM_STAGES - 1], "fpn.extra", ConvGeom::new(2, 1, 1))?;
        out.push(extra);
        Ok(out)
    }
}

/// Per-level head outputs: class logits `(B, K, h, w)`, box distances in
/// pixels `(B, 4, h, w)`, centerness logits `(B, 1, h, w)`.
#[derive(Clone, Copy, Debug)]
pub struct LevelOutput<'t, T> {
    pub cls: Var<'t, T>,
    pub reg: Var<'t, T>,
    pub ctr: Var<'t, T>,
}

/// Classification and regression towers shared by every level, with a
/// learnable scale per level on the regression exponent.
#[derive(Clone, Debug)]
pub struct Head {
    pub width: usize,
    pub num_classes: usize,
    pub depth: usize,
}

impl Head {
    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        let c = self.width;
        for j in 0..self.depth {
            insert_conv(store, &format!("head.cls{j}"), c, c, 3, rng);
            insert_conv(store, &format!("head.reg{j}"), c, c, 3, rng);
        }
        insert_conv(store, "head.cls_out", self.num_classes, c, 3, rng);
        let prior = -((1.0 - PRIOR_PROB) / PRIOR_PROB).ln();
        store.insert("head.cls_out.bias", channel_vec(self.num_classes, prior));
        insert_conv(store, "head.reg_out", 4, c, 3, rng);
        insert_conv(store, "head.ctr_out", 1, c, 3, rng);
        for l in 0..NUM_LEVELS {
            store.insert(format!("head.scale{l}"), Tensor4::ones([1, 1, 1, 1]));
        }
    }

    pub fn forward_level<'t, T: Scalar>(
        &self,
        bind: &Binder<'t, '_, T>,
        x: Var<'t, T>,
        level: usize,
        stride: usize,
    ) -> Result<LevelOutput<'t, T>> {
        let same = ConvGeom::same(3, 1);
        let (mut c, mut r) = (x, x);
        for j in 0..self.depth {
            c = conv_named(bind, c, &format!("head.cls{j}"), same)?.relu();
            r = conv_named(bind, r, &format!("head.reg{j}"), same)?.relu();
        }
        let cls = conv_named(bind, c, "head.cls_out", same)?;
        let raw = conv_named(bind, r, "head.reg_out", same)?;
        let reg = raw.mul(bind.param(&format!("head.scale{level}"))?)?.exp().scale(T::lit(stride as f64));
        let ctr = conv_named(bind, r, "head.ctr_out", same)?;
        Ok(LevelOutput { cls, reg, ctr })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub backbone: BackboneConfig,
    pub num_classes: usize,
    pub fpn_width: usize,
    pub head_depth: usize,
    pub lambda_reg: f64,
    pub lambda_ctr: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            num_classes: 2,
            fpn_width: 32,
            head_depth: 1,
            lambda_reg: 1.0,
            lambda_ctr: 1.0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.num_classes == 0 || self.fpn_width == 0 {
            return Err(invalid!("num_classes and fpn_width must be positive"));
        }
        if !(self.lambda_reg >= 0.0 && self.lambda_ctr >= 0.0) {
            return Err(invalid!("loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// Backbone, pyramid, and head.
#[derive(Clone, Debug)]
pub struct Detector {
    pub config: DetectorConfig,
    pub backbone: Backbone,
    pub fpn: Fpn,
    pub head: Head,
}

impl Detector {
    pub fn new(config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::new(config.backbone.clone())?;
        let fpn = Fpn { in_widths: config.backbone.widths, width: config.fpn_width };
        let head = Head { width: config.fpn_width, num_classes: config.num_classes, depth: config.head_depth };
        Ok(Self { config, backbone, fpn, head })
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        self.backbone.init(store, rng);
        self.fpn.init(store, rng);
        self.head.init(store, rng);
    }

    pub fn init_params<T: Scalar>(&self, rng: &mut impl Rng) -> ParamStore<T> {
        let mut store = ParamStore::new();
        self.init(&mut store, rng);
        store
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        bind: &Binder<'t, '_, T>,
        image: Var<'t, T>,
    ) -> Result<Vec<LevelOutput<'t, T>>> {
        let feats = self.backbone.forward(bind, image)?;
        let pyramid = self.fpn.forward(bind, &feats)?;
        pyramid.iter().enumerate().map(|(l, &p)| self.head.forward_level(bind, p, l, STRIDES[l])).collect()
    }

    pub fn levels(&self) -> Vec<LevelGeometry> {
        level_geometry(self.config.backbone.height, self.config.backbone.width)
    }
}

/// One pyramid level's location grid and regression range.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LevelGeometry {
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    pub lo: f64,
    pub hi: f64,
}

impl LevelGeometry {
    /// Image coordinates of location `(y, x)`.
    pub fn center(&self, y: usize, x: usize) -> (f64, f64) {
        let s = self.stride as f64;
        ((x as f64 + 0.5) * s, (y as f64 + 0.5) * s)
    }
}

/// Standard five-level geometry with ranges scaled by `max(h, w) / 512`
/// for inputs below 512 pixels.
pub fn level_geometry(height: usize, width: usize) -> Vec<LevelGeometry> {
    let f = (height.max(width) as f64 / 512.0).min(1.0);
    STRIDES
        .iter()
        .zip(RANGES_512)
        .map(|(&s, (lo, hi))| LevelGeometry {
            stride: s,
            height: height.div_ceil(s),
            width: width.div_ceil(s),
            lo: lo * f,
            hi: hi * f,
        })
        .collect()
}

/// Per-location targets on one level. `cls[q]` is 0 for background and
/// `class_id + 1` otherwise.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LevelTarget {
    pub cls: Vec<usize>,
    pub reg: Vec<[f64; 4]>,
    pub ctr: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DetectionTarget {
    pub levels: Vec<LevelTarget>,
    pub num_pos: usize,
}

/// FCOS assignment: a location is positive for a box that contains it with
/// `max(l, t, r, b)` in the level's `(lo, hi]`; overlaps go to the smaller box.
pub fn assign_targets(boxes: &[BBox], levels: &[LevelGeometry]) -> Result<DetectionTarget> {
    for b in boxes {
        b.validate()?;
    }
    let mut out = DetectionTarget::default();
    for g in levels {
        let n = g.height * g.width;
        let mut lt = LevelTarget { cls: vec![0; n], reg: vec![[0.0; 4]; n], ctr: vec![0.0; n] };
        for y in 0..g.height {
            for x in 0..g.width {
                let (cx, cy) = g.center(y, x);
                let mut best: Option<(f64, usize, [f64; 4])> = None;
                for b in boxes {
                    let d = [cx - b.x1, cy - b.y1, b.x2 - cx, b.y2 - cy];
                    if d.iter().any(|&v| v <= 0.0) {
                        continue;
                    }
                    let m = d.iter().fold(0.0f64, |a, &v| a.max(v));
                    if m <= g.lo || m > g.hi {
                        continue;
                    }
                    if best.map_or(true, |(area, _, _)| b.area() < area) {
                        best = Some((b.area(), b.class_id, d));
                    }
                }
                if let Some((_, c, d)) = best {
                    let q = y * g.width + x;
                    lt.cls[q] = c + 1;
                    lt.reg[q] = d;
                    lt.ctr[q] = centerness(d);
                    out.num_pos += 1;
                }
            }
        }
        out.levels.push(lt);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub reg: f64,
    pub ctr: f64,
    pub total: f64,
}

/// Focal + λ1·IoU + λ2·centerness BCE, each summed and divided by
/// `max(N_pos, 1)`. `targets[b]` describes batch item `b`.
pub fn total_loss<'t, T: Scalar>(
    outputs: &[LevelOutput<'t, T>],
    targets: &[DetectionTarget],
    lambda_reg: f64,
    lambda_ctr: f64,
) -> Result<(Var<'t, T>, LossBreakdown)> {
    let first = outputs.first().ok_or_else(|| invalid!("no head outputs"))?;
    let tape = first.cls.tape();
    let batch = first.cls.shape()[0];
    if targets.len() != batch {
        return Err(shape_err!("{} targets for a batch of {}", targets.len(), batch));
    }
    let num_pos: usize = targets.iter().map(|t| t.num_pos).sum();
    let norm = T::lit(1.0 / num_pos.max(1) as f64);
    let (alpha, gamma) = (T::lit(FOCAL_ALPHA), T::lit(FOCAL_GAMMA));
    let (mut cls_terms, mut reg_terms, mut ctr_terms) = (Vec::new(), Vec::new(), Vec::new());
    for (l, out) in outputs.iter().enumerate() {
        let [n, k, h, w] = out.cls.shape();
        if n != batch || out.reg.shape() != [n, 4, h, w] || out.ctr.shape() != [n, 1, h, w] {
            return Err(shape_err!("level {} outputs have inconsistent shapes", l));
        }
        let hw = h * w;
        let mut onehot = vec![T::zero(); n * k * hw];
        let mut reg_t = vec![T::one(); n * 4 * hw];
        let mut ctr_t = vec![T::zero(); n * hw];
        let mut mask = vec![false; n * hw];
        for (b, tgt) in targets.iter().enumerate() {
            let lt = tgt.levels.get(l).ok_or_else(|| shape_err!("targets lack level {}", l))?;
            if lt.cls.len() != hw {
                return Err(shape_err!("level {} targets cover {} locations, output has {}", l, lt.cls.len(), hw));
            }
            for q in 0..hw {
                let c = lt.cls[q];
                if c == 0 {
                    continue;
                }
                if c > k {
                    return Err(invalid!("target class {} outside {} classes", c - 1, k));
                }
                onehot[(b * k + c - 1) * hw + q] = T::one();
                for j in 0..4 {
                    reg_t[(b * 4 + j) * hw + q] = T::lit(lt.reg[q][j]);
                }
                ctr_t[b * hw + q] = T::lit(lt.ctr[q]);
                mask[b * hw + q] = true;
            }
        }
        let mask: Rc<[bool]> = mask.into();
        cls_terms.push(out.cls.focal_loss_sum(onehot.into(), alpha, gamma)?);
        reg_terms.push(out.reg.iou_loss_sum(reg_t.into(), mask.clone())?);
        ctr_terms.push(out.ctr.bce_logits_sum(ctr_t.into(), mask)?);
    }
    let sum = |terms: Vec<Var<'t, T>>| -> Result<Var<'t, T>> {
        let joined = tape.concat(&terms.iter().map(|v| v.scale(T::one())).collect::<Vec<_>>())?;
        Ok(joined.sum().scale(norm))
    };
    let cls = sum(cls_terms)?;
    let reg = sum(reg_terms)?;
    let ctr = sum(ctr_terms)?;
    let total = cls.add(reg.scale(T::lit(lambda_reg)))?.add(ctr.scale(T::lit(lambda_ctr)))?;
    let v = |x: Var<'t, T>| x.value().data()[0].as_f64();
    let breakdown = LossBreakdown { cls: v(cls), reg: v(reg), ctr: v(ctr), total: v(total) };
    Ok((total, breakdown))
}
