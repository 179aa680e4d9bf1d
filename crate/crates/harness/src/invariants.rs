//! Property suite over every module, reported case by case.

use std::fmt::Write as _;

use anyhow::Result;
use freqscan::autodiff::{Tape, Var};
use freqscan::detect::{
    assign_targets, box_iou, centerness, focal_loss, iou_loss, level_geometry, total_loss, BBox, Fpn, Head,
};
use freqscan::eval::evaluate;
use freqscan::freq::{freq_attention, lh_separate, FreqFilter};
use freqscan::gradcheck::{check_block_gradients, check_gradients, GradCheckReport};
use freqscan::hilbert::{hilbert_d2xy, hilbert_xy2d, locality_score, LocalityReport, ScanOrder, ScanVariant};
use freqscan::hsfa::{HsfaBlock, HsfaToggles};
use freqscan::kernels::{dct2_planes, ConvGeom};
use freqscan::nn::{Binder, ParamStore};
use freqscan::ssm::{apply_kernel, discretize_zoh, ssm_conv_kernel, ssm_recurrence, SsmDiscrete};
use freqscan::tensor::Shape4;
use freqscan::vssm::VssBlock;
use freqscan::Tensor4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{gen_dataset, gen_scene, split_sizes};

pub const GRAD_TOL: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub suite: String,
    pub case: String,
    pub status: Status,
    pub measured: f64,
    pub tolerance: f64,
}

impl CaseResult {
    /// Passes when `measured` is finite and at most `tolerance`.
    pub fn at_most(suite: &str, case: &str, measured: f64, tolerance: f64) -> Self {
        Self::with_status(suite, case, measured, tolerance, measured.is_finite() && measured <= tolerance)
    }

    pub fn with_status(suite: &str, case: &str, measured: f64, tolerance: f64, pass: bool) -> Self {
        Self {
            suite: suite.into(),
            case: case.into(),
            status: if pass { Status::Pass } else { Status::Fail },
            measured,
            tolerance,
        }
    }

    fn error(suite: &str, case: &str, err: impl std::fmt::Display) -> Self {
        eprintln!("{suite}/{case}: {err}");
        Self::with_status(suite, case, f64::NAN, 0.0, false)
    }

    pub fn passed(&self) -> bool {
        self.status == Status::Pass
    }
}

fn rand_t(shape: Shape4, rng: &mut ChaCha8Rng) -> Tensor4<f64> {
    Tensor4::uniform(shape, -1.0, 1.0, rng)
}

fn gradcheck_case(suite: &str, case: &str, report: freqscan::Result<GradCheckReport>) -> CaseResult {
    match report {
        Ok(r) => CaseResult::at_most(suite, case, r.max_rel_err, GRAD_TOL),
        Err(e) => CaseResult::error(suite, case, e),
    }
}

/// Scalar probe `Σ w ⊙ y` with fixed random weights.
fn probe<'t>(y: Var<'t, f64>, seed: u64) -> freqscan::Result<Var<'t, f64>> {
    let w = Tensor4::uniform(y.shape(), -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    Ok(y.mul(y.tape().constant(w))?.sum())
}

// tensor-autodiff

pub fn composite_gradcheck() -> CaseResult {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inputs = [rand_t([1, 3, 4, 4], &mut rng), rand_t([4, 3, 3, 3], &mut rng), rand_t([4, 1, 1, 1], &mut rng)];
    let r = check_gradients(&inputs, FD_STEP, |_, v| {
        let y = v[0].conv2d(v[1], Some(v[2]), ConvGeom::same(3, 1))?.gelu().layer_norm(None, None, 1e-5)?;
        let y = y.avg_pool2()?.upsample_bilinear(2)?.silu().mul(y.sigmoid())?;
        probe(y.softplus(), 1)
    });
    gradcheck_case("tensor-autodiff", "composite conv/norm/pool/activation gradient", r)
}

pub fn conv_linearity() -> CaseResult {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (x, y, w) = (rand_t([1, 2, 5, 5], &mut rng), rand_t([1, 2, 5, 5], &mut rng), rand_t([3, 2, 3, 3], &mut rng));
    let (a, b) = (0.7, -1.3);
    let tape = Tape::<f64>::new();
    let conv = |t: &Tensor4<f64>| tape.constant(t.clone()).conv2d(tape.constant(w.clone()), None, ConvGeom::new(2, 1, 1));
    let combo = Tensor4::from_fn(x.shape(), |i| a * x.at(i) + b * y.at(i));
    let res = (|| -> freqscan::Result<f64> {
        let lhs = conv(&combo)?.value();
        let rhs = conv(&x)?.scale(a).add(conv(&y)?.scale(b))?.value();
        Ok(lhs.max_abs_diff(&rhs))
    })();
    match res {
        Ok(d) => CaseResult::at_most("tensor-autodiff", "conv2d linearity", d, 1e-12),
        Err(e) => CaseResult::error("tensor-autodiff", "conv2d linearity", e),
    }
}

pub fn pool_upsample_constant() -> CaseResult {
    let tape = Tape::<f64>::new();
    let c = 0.37;
    let res = tape
        .constant(Tensor4::full([1, 2, 8, 8], c))
        .avg_pool2()
        .and_then(|p| p.upsample_bilinear(2))
        .map(|u| u.value().data().iter().fold(0.0f64, |m, v| m.max((v - c).abs())));
    match res {
        Ok(d) => CaseResult::at_most("tensor-autodiff", "pool then upsample keeps constants", d, 0.0),
        Err(e) => CaseResult::error("tensor-autodiff", "pool then upsample keeps constants", e),
    }
}

// hilbert-scan

/// Non-bijective paths over every variant and power-of-two side up to 64.
pub fn scan_bijectivity() -> CaseResult {
    let mut bad = 0usize;
    for n in 0..=6 {
        let side = 1usize << n;
        for v in ScanVariant::ALL {
            let order = ScanOrder::build(v, side, side).expect("valid grid");
            for p in &order.paths {
                let mut s = p.clone();
                s.sort_unstable();
                bad += usize::from(s.iter().enumerate().any(|(i, &x)| i != x));
            }
        }
    }
    CaseResult::at_most("hilbert-scan", "every path is a bijection", bad as f64, 0.0)
}

/// Non-unit steps along the curve, plus rank round-trip failures, for `n ≤ 6`.
pub fn hilbert_adjacency() -> CaseResult {
    let mut bad = 0usize;
    for n in 1..=6u32 {
        let mut prev = hilbert_d2xy(n, 0).expect("rank 0");
        for d in 1..(1u64 << (2 * n)) {
            let cur = hilbert_d2xy(n, d).expect("rank in range");
            bad += usize::from(prev.0.abs_diff(cur.0) + prev.1.abs_diff(cur.1) != 1);
            bad += usize::from(hilbert_xy2d(n, cur.0, cur.1).ok() != Some(d));
            prev = cur;
        }
    }
    CaseResult::at_most("hilbert-scan", "unit-step adjacency up to n = 6", bad as f64, 0.0)
}

pub fn bidir_reversal() -> CaseResult {
    let mut bad = 0usize;
    for n in 0..=6 {
        let o = ScanOrder::build(ScanVariant::HilbertBiDir, 1 << n, 1 << n).expect("valid grid");
        bad += usize::from(!o.paths[1].iter().rev().eq(o.paths[0].iter()));
    }
    CaseResult::at_most("hilbert-scan", "bidirectional path is an exact reversal", bad as f64, 0.0)
}

/// Each four-direction-3 path is a unit-step traversal and the four differ.
pub fn fourdir3_symmetry() -> CaseResult {
    let side = 8;
    let o = ScanOrder::build(ScanVariant::HilbertFourDir3, side, side).expect("valid grid");
    let mut bad = 0usize;
    for p in &o.paths {
        for w in p.windows(2) {
            let (a, b) = ((w[0] / side, w[0] % side), (w[1] / side, w[1] % side));
            bad += usize::from(a.0.abs_diff(b.0) + a.1.abs_diff(b.1) != 1);
        }
    }
    for i in 0..o.paths.len() {
        for j in i + 1..o.paths.len() {
            bad += usize::from(o.paths[i] == o.paths[j]);
        }
    }
    CaseResult::at_most("hilbert-scan", "four-direction-3 paths are distinct unit-step curves", bad as f64, 0.0)
}

pub fn raster_baseline() -> CaseResult {
    let o = ScanOrder::build(ScanVariant::RasterBiDir, 4, 4).expect("valid grid");
    let gap = locality_score(&o.paths[0], 4, 4).expect("valid path");
    CaseResult::at_most("hilbert-scan", "raster 4x4 mean rank gap is 2.5", (gap - 2.5).abs(), 0.0)
}

/// `max_n (hilbert − raster)` over `n ∈ {2..6}`; passes only when negative.
pub fn locality_dominance() -> CaseResult {
    let mut worst = f64::NEG_INFINITY;
    for n in 2..=6 {
        let side = 1 << n;
        let h = LocalityReport::for_order(&ScanOrder::build(ScanVariant::HilbertUniDir, side, side).expect("grid"))
            .expect("valid order");
        let raster =
            locality_score(&ScanOrder::build(ScanVariant::RasterBiDir, side, side).expect("grid").paths[0], side, side)
                .expect("valid path");
        worst = worst.max(h.best - raster);
    }
    CaseResult::with_status("hilbert-scan", "Hilbert rank gap below raster for n = 2..6", worst, 0.0, worst < 0.0)
}

// ssm-core

/// Largest `|recurrence − kernel convolution|` over random diagonal LTI
/// systems with `N ≤ 8` and `L ≤ 64`.
pub fn lti_equivalence(systems: usize, seed: u64) -> CaseResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..systems {
        let n = rng.gen_range(1..=8);
        let len = rng.gen_range(1..=64);
        let delta: f64 = rng.gen_range(0.001..1.0);
        let a: Vec<f64> = (0..n).map(|_| -rng.gen_range(0.01..4.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let u: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let res = (|| -> freqscan::Result<f64> {
            let (abar, bbar) = discretize_zoh(delta, &a, &b)?;
            let sys = SsmDiscrete::time_invariant(abar, bbar, c.clone(), len)?;
            let rec = ssm_recurrence(&sys, &u)?;
            let conv = apply_kernel(&ssm_conv_kernel(&sys)?, &u)?;
            Ok(rec.iter().zip(&conv).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())))
        })();
        match res {
            Ok(d) => worst = worst.max(d),
            Err(e) => return CaseResult::error("ssm-core", "recurrence matches convolution kernel", e),
        }
    }
    CaseResult::at_most("ssm-core", "recurrence matches convolution kernel", worst, 1e-6)
}

pub fn zoh_closed_form() -> CaseResult {
    let e = (-1.0f64).exp();
    let err = match discretize_zoh(1.0f64, &[-1.0], &[1.0]) {
        Ok((a, b)) => (a[0] - e).abs().max((b[0] - (1.0 - e)).abs()),
        Err(e) => return CaseResult::error("ssm-core", "zero-order hold closed form", e),
    };
    CaseResult::at_most("ssm-core", "zero-order hold closed form", err, 1e-9)
}

/// `B̄ = ΔB` exactly as `A → 0`.
pub fn zoh_limit() -> CaseResult {
    let mut err = 0.0f64;
    for (delta, b) in [(0.5f64, 2.0f64), (1.0, -0.3), (0.01, 7.0)] {
        for a in [0.0, 1e-12, -1e-10] {
            match discretize_zoh(delta, &[a], &[b]) {
                Ok((_, bb)) => err = err.max((bb[0] - delta * b).abs()),
                Err(e) => return CaseResult::error("ssm-core", "zero-order hold small-A limit", e),
            }
        }
    }
    CaseResult::at_most("ssm-core", "zero-order hold small-A limit", err, 0.0)
}

// freq-sep

fn random_planes(rng: &mut ChaCha8Rng, max_side: usize) -> (Vec<f64>, Shape4) {
    let shape = [1, rng.gen_range(1..=2), rng.gen_range(1..=max_side), rng.gen_range(1..=max_side)];
    (rand_t(shape, rng).into_vec(), shape)
}

/// Largest relative energy change `|‖T x‖² − ‖x‖²| / ‖x‖²` of `transform`
/// over random planes up to 32×32.
pub fn parseval_case(transform: impl Fn(&[f64], Shape4) -> Vec<f64>) -> CaseResult {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst = 0.0f64;
    for _ in 0..40 {
        let (x, shape) = random_planes(&mut rng, 32);
        let ex: f64 = x.iter().map(|v| v * v).sum();
        let ey: f64 = transform(&x, shape).iter().map(|v| v * v).sum();
        worst = worst.max((ey - ex).abs() / ex);
    }
    CaseResult::at_most("freq-sep", "DCT preserves energy", worst, 1e-6)
}

pub fn dct_round_trip() -> CaseResult {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let mut worst = 0.0f64;
    for _ in 0..40 {
        let (x, shape) = random_planes(&mut rng, 32);
        let back = dct2_planes(&dct2_planes(&x, shape, false), shape, true);
        let norm = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        worst = worst.max(x.iter().zip(&back).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / norm);
    }
    CaseResult::at_most("freq-sep", "inverse DCT restores the input", worst, 1e-6)
}

/// A constant plane `c` of size `h × w` has DC coefficient `c·√(hw)` and no
/// other energy.
pub fn dct_constant_plane() -> CaseResult {
    let mut worst = 0.0f64;
    for (h, w, c) in [(4, 4, 0.8), (8, 2, -1.5), (32, 32, 0.25), (3, 5, 2.0)] {
        let y = dct2_planes(&vec![c; h * w], [1, 1, h, w], false);
        worst = worst.max((y[0] - c * ((h * w) as f64).sqrt()).abs());
        worst = worst.max(y[1..].iter().fold(0.0f64, |m, v| m.max(v.abs())));
    }
    CaseResult::at_most("freq-sep", "constant plane maps to the closed-form DC term", worst, 1e-9)
}

/// Largest `|high + upsample(low) − x|` over random even-extent tensors.
pub fn band_reconstruction(count: usize, seed: u64) -> CaseResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..count {
        let shape = [rng.gen_range(1..=2), rng.gen_range(1..=3), 2 * rng.gen_range(1..=8), 2 * rng.gen_range(1..=8)];
        let x = rand_t(shape, &mut rng);
        let tape = Tape::<f64>::new();
        let res = lh_separate(tape.constant(x.clone()))
            .and_then(|b| b.high.add(b.low.upsample_bilinear(2)?))
            .map(|r| r.value().max_abs_diff(&x));
        match res {
            Ok(d) => worst = worst.max(d),
            Err(e) => return CaseResult::error("freq-sep", "bands reconstruct the input", e),
        }
    }
    CaseResult::at_most("freq-sep", "bands reconstruct the input", worst, 1e-6)
}

pub fn freq_attention_gradcheck() -> CaseResult {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let filter = FreqFilter::new("f", 2, 4, 4, false);
    let mut store = ParamStore::<f64>::new();
    filter.init(&mut store);
    for name in [filter.high_name(), filter.low_name()] {
        let t = store.get(&name).expect("just inserted");
        let t = Tensor4::from_fn(t.shape(), |_| rng.gen_range(0.5..1.5));
        store.set(&name, t).expect("same shape");
    }
    let x = rand_t([1, 2, 4, 4], &mut rng);
    let r = check_block_gradients(&store, &[x], FD_STEP, |bind, v| {
        let (hi, lo) = freq_attention(bind, lh_separate(v[0])?, &filter)?;
        probe(hi.sigmoid().add(lo.sigmoid())?, 2)
    });
    gradcheck_case("freq-sep", "frequency attention gradient", r)
}

// hsfa-block

fn hsfa_fixture(toggles: HsfaToggles, seed: u64) -> (HsfaBlock, ParamStore<f64>, Tensor4<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = HsfaBlock::new("h", 2, 4, 4, toggles);
    let mut store = ParamStore::new();
    block.init(&mut store, &mut rng);
    // move the unit-initialised filters and gains off their symmetric start
    let names: Vec<String> = store.names().map(String::from).collect();
    for n in names {
        let t = store.get(&n).expect("listed");
        let t = Tensor4::from_fn(t.shape(), |i| t.at(i) + rng.gen_range(-0.3..0.3));
        store.set(&n, t).expect("same shape");
    }
    let x = rand_t([1, 2, 4, 4], &mut rng);
    (block, store, x)
}

pub fn spatial_branch_gradcheck() -> CaseResult {
    let (block, store, x) = hsfa_fixture(HsfaToggles { use_lh_info: false, use_spatial: true }, 51);
    let r = check_block_gradients(&store, &[x], FD_STEP, |bind, v| probe(block.spatial_branch(bind, v[0])?, 3));
    gradcheck_case("hsfa-block", "multi-kernel spatial branch gradient", r)
}

pub fn hsfa_gradcheck() -> CaseResult {
    let (block, store, x) = hsfa_fixture(HsfaToggles::default(), 52);
    let r = check_block_gradients(&store, &[x], FD_STEP, |bind, v| probe(block.forward(bind, v[0])?, 4));
    gradcheck_case("hsfa-block", "full HSFA block gradient", r)
}

// vssm-block

pub fn vss_gradcheck_report_with(step: f64, channels: usize, seed: u64) -> freqscan::Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = VssBlock::new("v", channels, 2, 2);
    let mut store = ParamStore::new();
    block.init(&mut store, &mut rng);
    let scan = ScanOrder::build(ScanVariant::HilbertBiDir, 4, 4).expect("valid grid");
    let x = rand_t([1, channels, 4, 4], &mut rng);
    check_block_gradients(&store, &[x], step, |bind, v| probe(block.forward(bind, v[0], &scan)?, 5))
}

pub fn vss_gradcheck() -> CaseResult {
    gradcheck_case("vssm-block", "VSS block gradient through the bidirectional Hilbert scan", vss_gradcheck_report_with(FD_STEP, 4, 61))
}

// detect-fcos

/// Smallest `|pre-activation|` of the first head tower layer over all levels.
fn tower_margin(fpn: &Fpn, store: &ParamStore<f64>, feats: &[Tensor4<f64>]) -> freqscan::Result<f64> {
    let tape = Tape::new();
    let bind = Binder::frozen(&tape, store);
    let vars: Vec<_> = feats.iter().map(|f| tape.constant(f.clone())).collect();
    let mut margin = f64::INFINITY;
    for p in fpn.forward(&bind, &vars)? {
        for tower in ["head.cls0", "head.reg0"] {
            let pre = p.conv2d(
                bind.param(&format!("{tower}.weight"))?,
                Some(bind.param(&format!("{tower}.bias"))?),
                ConvGeom::same(3, 1),
            )?;
            margin = pre.value().data().iter().fold(margin, |m, v| m.min(v.abs()));
        }
    }
    Ok(margin)
}

/// Pyramid, head, and total loss on a two-box 16×16 toy with stage maps of
/// side 4, 2, 1, 1.
pub fn detection_gradcheck_report(step: f64, seed: u64) -> freqscan::Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let widths = [2, 2, 3, 3];
    let fpn = Fpn { in_widths: widths, width: 3 };
    let head = Head { width: 3, num_classes: 2, depth: 1 };
    let mut store = ParamStore::new();
    fpn.init(&mut store, &mut rng);
    head.init(&mut store, &mut rng);
    // tower units clearly on or off, so no ReLU kink lies inside the stencil
    for tower in ["head.cls0.bias", "head.reg0.bias"] {
        let b = Tensor4::from_fn([1, 3, 1, 1], |_| rng.gen_range(0.5..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 });
        store.set(tower, b).expect("same shape");
    }
    let feats: Vec<Tensor4<f64>> =
        widths.iter().zip([4, 2, 1, 1]).map(|(&c, s)| rand_t([1, c, s, s], &mut rng)).collect();
    let levels = level_geometry(16, 16);
    let boxes = [BBox::new(1.0, 1.0, 5.0, 5.0, 0), BBox::new(6.0, 6.0, 15.0, 15.0, 1)];
    let target = assign_targets(&boxes, &levels)?;
    if target.num_pos == 0 {
        return Err(freqscan::error::Error::InvalidArgument("detection fixture has no positives".into()));
    }
    let margin = tower_margin(&fpn, &store, &feats)?;
    if margin < 4.0 * step {
        return Err(freqscan::error::Error::InvalidArgument(format!(
            "a head ReLU input is {margin:.1e} from zero, inside the difference stencil"
        )));
    }
    check_block_gradients(&store, &feats, step, |bind, v| {
        let pyramid = fpn.forward(bind, v)?;
        let outs = pyramid
            .iter()
            .zip(&levels)
            .enumerate()
            .map(|(l, (&p, g))| head.forward_level(bind, p, l, g.stride))
            .collect::<freqscan::Result<Vec<_>>>()?;
        Ok(total_loss(&outs, std::slice::from_ref(&target), 1.0, 1.0)?.0)
    })
}

pub fn detection_gradcheck() -> CaseResult {
    gradcheck_case("detect-fcos", "pyramid, head and loss gradient", detection_gradcheck_report(FD_STEP, 71))
}

/// Largest deviation of the IoU-loss, focal, and centerness reference
/// values (`ln 7`, `α·0.25·ln 2`, `√(1/3)`).
pub fn loss_unit_values() -> Vec<CaseResult> {
    let s = "detect-fcos";
    vec![
        CaseResult::at_most(
            s,
            "IoU loss of disjoint-overlap pair is ln 7",
            (iou_loss([1.0, 1.0, 1.0, 1.0], [0.0, 0.0, 2.0, 2.0]) - 7f64.ln()).abs(),
            1e-6,
        ),
        CaseResult::at_most(s, "focal loss at p = 0.5", (focal_loss(&[0.5], &[1.0]) - 0.043321698784996576).abs(), 1e-6),
        CaseResult::at_most(
            s,
            "centerness of (1, 2, 3, 2)",
            (centerness([1.0, 2.0, 3.0, 2.0]) - 0.5773502691896257).abs(),
            1e-6,
        ),
    ]
}

/// One GT, two predictions at IoU 0.6 and 0.4, plus perfect predictions.
pub fn evaluation_scenario() -> Vec<CaseResult> {
    let s = "detect-fcos";
    let gt = BBox::new(0.0, 0.0, 10.0, 10.0, 0);
    let a = BBox::new(0.0, 0.0, 10.0, 6.0, 0).with_score(0.9);
    let b = BBox::new(0.0, 0.0, 10.0, 4.0, 0).with_score(0.8);
    let iou_err = (box_iou(&a, &gt) - 0.6).abs().max((box_iou(&b, &gt) - 0.4).abs());
    let mut out = vec![CaseResult::at_most(s, "scenario IoUs are 0.6 and 0.4", iou_err, 1e-12)];
    match evaluate(&[vec![a, b]], &[vec![gt]], 1) {
        Ok(m) => {
            out.push(CaseResult::at_most(s, "scenario AP at IoU 0.5 is 1", (m.ap50 - 1.0).abs(), 0.0));
            out.push(CaseResult::at_most(s, "scenario AP at IoU 0.7 is 0", m.ap70.abs(), 0.0));
        }
        Err(e) => out.push(CaseResult::error(s, "scenario AP", e)),
    }
    let gts = vec![
        vec![BBox::new(1.0, 1.0, 5.0, 5.0, 0), BBox::new(6.0, 2.0, 9.0, 8.0, 1)],
        vec![BBox::new(20.0, 20.0, 40.0, 33.0, 1)],
        vec![],
    ];
    let perfect: Vec<Vec<BBox>> = gts.iter().map(|g| g.iter().map(|b| b.clone().with_score(0.9)).collect()).collect();
    match evaluate(&perfect, &gts, 2) {
        Ok(m) => out.push(CaseResult::at_most(
            s,
            "perfect predictions give mAP = mAR = 1",
            (m.map - 1.0).abs().max((m.mar - 1.0).abs()),
            0.0,
        )),
        Err(e) => out.push(CaseResult::error(s, "perfect predictions", e)),
    }
    out
}

// harness-cli

pub fn dataset_determinism() -> Vec<CaseResult> {
    let s = "harness-cli";
    let a = gen_scene(5, 17, 64);
    let b = gen_scene(5, 17, 64);
    let same = a.image == b.image && a.boxes == b.boxes;
    let mut out = vec![CaseResult::at_most(s, "scenes reproduce from (seed, index)", f64::from(u8::from(!same)), 0.0)];
    let bad_split = usize::from(split_sizes(10) != (7, 2, 1));
    out.push(CaseResult::at_most(s, "10 scenes split 7/2/1", bad_split as f64, 0.0));
    match gen_dataset(3, 50, 64) {
        Ok(sp) => {
            let bad = sp
                .train
                .iter()
                .chain(&sp.test)
                .chain(&sp.val)
                .flat_map(|sc| &sc.boxes)
                .filter(|b| b.validate().is_err() || b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > 64.0 || b.y2 > 64.0)
                .count();
            out.push(CaseResult::at_most(s, "generated boxes are valid and in bounds", bad as f64, 0.0));
        }
        Err(e) => out.push(CaseResult::error(s, "generated boxes are valid and in bounds", e)),
    }
    out
}

/// Every suite in module order.
pub fn run_invariants() -> Vec<CaseResult> {
    let mut out = vec![
        composite_gradcheck(),
        conv_linearity(),
        pool_upsample_constant(),
        scan_bijectivity(),
        hilbert_adjacency(),
        bidir_reversal(),
        fourdir3_symmetry(),
        raster_baseline(),
        locality_dominance(),
        lti_equivalence(200, 21),
        zoh_closed_form(),
        zoh_limit(),
        parseval_case(|x, s| dct2_planes(x, s, false)),
        dct_round_trip(),
        dct_constant_plane(),
        band_reconstruction(500, 33),
        freq_attention_gradcheck(),
        spatial_branch_gradcheck(),
        hsfa_gradcheck(),
        vss_gradcheck(),
        detection_gradcheck(),
    ];
    out.extend(loss_unit_values());
    out.extend(evaluation_scenario());
    out.extend(dataset_determinism());
    out
}

pub fn format_report(cases: &[CaseResult]) -> String {
    let mut s = String::new();
    for c in cases {
        let st = if c.passed() { "PASS" } else { "FAIL" };
        writeln!(s, "{st}  {:<16} {:<58} measured {:>11.4e}  tol {:.1e}", c.suite, c.case, c.measured, c.tolerance)
            .expect("string write");
    }
    let failed = cases.iter().filter(|c| !c.passed()).count();
    writeln!(s, "{} cases, {} failed", cases.len(), failed).expect("string write");
    s
}

pub fn to_json(cases: &[CaseResult]) -> Result<String> {
    Ok(serde_json::to_string_pretty(cases)?)
}
