//! Visual state-space block and the four-stage backbone.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Var, GATHER_ZERO};
use crate::error::{invalid, shape_err, Result};
use crate::hilbert::{ScanOrder, ScanVariant};
use crate::hsfa::{HsfaBlock, HsfaToggles};
use crate::kernels::ConvGeom;
use crate::nn::{channel_vec, conv_weight, Binder, ParamStore};
use crate::scalar::Scalar;
use crate::ssm::SelectiveSs2d;
use crate::tensor::Tensor4;

pub const NUM_STAGES: usize = 4;
pub const EXPAND: usize = 2;
/// Input extents must be multiples of this (stem 4×, three halvings, one
/// extra pyramid level).
pub const SIZE_MULTIPLE: usize = 64;
const LN_EPS: f64 = 1e-5;

/// Gather indices that embed an `h × w` plane in the top-left of a
/// `side × side` zero plane.
fn pad_index(h: usize, w: usize, side: usize) -> Rc<[u32]> {
    (0..side * side)
        .map(|k| {
            let (r, c) = (k / side, k % side);
            if r < h && c < w {
                (r * w + c) as u32
            } else {
                GATHER_ZERO
            }
        })
        .collect()
}

fn crop_index(h: usize, w: usize, side: usize) -> Rc<[u32]> {
    (0..h * w).map(|k| ((k / w) * side + k % w) as u32).collect()
}

/// Grid the scan runs over for an `h × w` feature map: the map itself for
/// raster variants, the enclosing power-of-two square for Hilbert ones.
pub fn scan_grid(variant: ScanVariant, h: usize, w: usize) -> (usize, usize) {
    if variant.is_hilbert() {
        let side = h.max(w).next_power_of_two();
        (side, side)
    } else {
        (h, w)
    }
}

/// Zero-pads `x` to `side × side` (no-op when already that size).
pub fn pad_square<'t, T: Scalar>(x: Var<'t, T>, side: usize) -> Result<Var<'t, T>> {
    let [_, _, h, w] = x.shape();
    if h > side || w > side {
        return Err(shape_err!("cannot pad {}x{} into {}x{}", h, w, side, side));
    }
    if (h, w) == (side, side) {
        return Ok(x);
    }
    x.gather_spatial(pad_index(h, w, side), side, side)
}

/// Keeps the top-left `h × w` window of a square map.
pub fn crop<'t, T: Scalar>(x: Var<'t, T>, h: usize, w: usize) -> Result<Var<'t, T>> {
    let [_, _, hs, ws] = x.shape();
    if hs != ws || h > hs || w > ws {
        return Err(shape_err!("cannot crop {}x{} out of {}x{}", h, w, hs, ws));
    }
    if (h, w) == (hs, ws) {
        return Ok(x);
    }
    x.gather_spatial(crop_index(h, w, hs), h, w)
}

/// `x + s · out_proj(norm2(ss2d(silu(dw(in_proj(norm1 x))))) ⊙ silu(gate_proj(norm1 x)))`.
#[derive(Clone, Debug)]
pub struct VssBlock {
    pub prefix: String,
    pub channels: usize,
    pub ss2d: SelectiveSs2d,
}

impl VssBlock {
    pub fn new(prefix: &str, channels: usize, num_paths: usize, d_state: usize) -> Self {
        let ss2d = SelectiveSs2d::new(&format!("{prefix}.ss2d"), num_paths, EXPAND * channels, d_state);
        Self { prefix: prefix.to_string(), channels, ss2d }
    }

    pub fn name(&self, leaf: &str) -> String {
        format!("{}.{}", self.prefix, leaf)
    }

    pub fn inner(&self) -> usize {
        EXPAND * self.channels
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        let (c, e) = (self.channels, self.inner());
        store.insert(self.name("norm1.weight"), channel_vec(c, 1.0));
        store.insert(self.name("norm1.bias"), channel_vec(c, 0.0));
        store.insert(self.name("in_proj.weight"), conv_weight(e, c, 1, rng));
        store.insert(self.name("in_proj.bias"), channel_vec(e, 0.0));
        store.insert(self.name("gate_proj.weight"), conv_weight(e, c, 1, rng));
        store.insert(self.name("gate_proj.bias"), channel_vec(e, 0.0));
        store.insert(self.name("dwconv.weight"), conv_weight(e, 1, 3, rng));
        store.insert(self.name("dwconv.bias"), channel_vec(e, 0.0));
        self.ss2d.init(store, rng);
        store.insert(self.name("norm2.weight"), channel_vec(e, 1.0));
        store.insert(self.name("norm2.bias"), channel_vec(e, 0.0));
        store.insert(self.name("out_proj.weight"), conv_weight(c, e, 1, rng));
        store.insert(self.name("out_proj.bias"), channel_vec(c, 0.0));
        store.insert(self.name("res_scale"), Tensor4::ones([1, 1, 1, 1]));
    }

    fn conv<'t, T: Scalar>(&self, bind: &Binder<'t, '_, T>, x: Var<'t, T>, layer: &str, geom: ConvGeom) -> Result<Var<'t, T>> {
        let w = bind.param(&self.name(&format!("{layer}.weight")))?;
        let b = bind.param(&self.name(&format!("{layer}.bias")))?;
        x.conv2d(w, Some(b), geom)
    }

    /// `scan` must be built over [`scan_grid`] of the input extents.
    pub fn forward<'t, T: Scalar>(&self, bind: &Binder<'t, '_, T>, x: Var<'t, T>, scan: &ScanOrder) -> Result<Var<'t, T>> {
        let [_, c, h, w] = x.shape();
        if c != self.channels {
            return Err(shape_err!("VSS block built for {} channels, got {:?}", self.channels, x.shape()));
        }
        if (scan.height, scan.width) != scan_grid(scan.variant, h, w) {
            return Err(shape_err!(
                "{} scan over {}x{} does not fit a {}x{} map",
                scan.variant,
                scan.height,
                scan.width,
                h,
                w
            ));
        }
        let eps = T::lit(LN_EPS);
        let normed = x.layer_norm(
            Some(bind.param(&self.name("norm1.weight"))?),
            Some(bind.param(&self.name("norm1.bias"))?),
            eps,
        )?;
        let point = ConvGeom::new(1, 0, 1);
        let u = self.conv(bind, normed, "in_proj", point)?;
        let u = self.conv(bind, u, "dwconv", ConvGeom::same(3, self.inner()))?.silu();
        let y = if scan.variant.is_hilbert() {
            let padded = pad_square(u, scan.height)?;
            crop(self.ss2d.forward(bind, padded, scan)?, h, w)?
        } else {
            self.ss2d.forward(bind, u, scan)?
        };
        let y = y.layer_norm(
            Some(bind.param(&self.name("norm2.weight"))?),
            Some(bind.param(&self.name("norm2.bias"))?),
            eps,
        )?;
        let gate = self.conv(bind, normed, "gate_proj", point)?.silu();
        let out = self.conv(bind, y.mul(gate)?, "out_proj", point)?;
        x.add(out.mul(bind.param(&self.name("res_scale"))?)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub widths: [usize; NUM_STAGES],
    pub depths: [usize; NUM_STAGES],
    pub d_state: usize,
    pub scan: ScanVariant,
    pub use_hsfa: bool,
    pub hsfa: HsfaToggles,
    pub height: usize,
    pub width: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            widths: [32, 64, 128, 256],
            depths: [1, 1, 2, 1],
            d_state: 8,
            scan: ScanVariant::HilbertBiDir,
            use_hsfa: true,
            hsfa: HsfaToggles::default(),
            height: 64,
            width: 64,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.d_state == 0 {
            return Err(invalid!("in_channels and d_state must be positive"));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(invalid!("stage widths must be positive, got {:?}", self.widths));
        }
        if self.widths.windows(2).any(|p| p[1] < p[0]) {
            return Err(invalid!("stage widths must be non-decreasing, got {:?}", self.widths));
        }
        if self.height == 0 || self.width == 0 || self.height % SIZE_MULTIPLE != 0 || self.width % SIZE_MULTIPLE != 0 {
            return Err(invalid!(
                "input {}x{} must be a positive multiple of {} on both axes",
                self.height,
                self.width,
                SIZE_MULTIPLE
            ));
        }
        Ok(())
    }

    /// Feature-map extents of stage `s`.
    pub fn stage_extent(&self, s: usize) -> (usize, usize) {
        (self.height >> (2 + s), self.width >> (2 + s))
    }
}

/// Stem, per-stage downsampling, optional HSFA, and VSS stacks.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub hsfa: Vec<Option<HsfaBlock>>,
    pub blocks: Vec<Vec<VssBlock>>,
    pub scans: Vec<ScanOrder>,
}

impl Backbone {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let paths = config.scan.num_paths();
        let (mut hsfa, mut blocks, mut scans) = (Vec::new(), Vec::new(), Vec::new());
        for s in 0..NUM_STAGES {
            let (h, w) = config.stage_extent(s);
            let c = config.widths[s];
            hsfa.push(config.use_hsfa.then(|| HsfaBlock::new(&format!("stage{s}.hsfa"), c, h, w, config.hsfa)));
            blocks.push(
                (0..config.depths[s])
                    .map(|j| VssBlock::new(&format!("stage{s}.block{j}"), c, paths, config.d_state))
                    .collect(),
            );
            let (gh, gw) = scan_grid(config.scan, h, w);
            scans.push(ScanOrder::build(config.scan, gh, gw)?);
        }
        Ok(Self { config, hsfa, blocks, scans })
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        let c = &self.config;
        store.insert("stem.weight", conv_weight(c.widths[0], c.in_channels, 5, rng));
        store.insert("stem.bias", channel_vec(c.widths[0], 0.0));
        for s in 0..NUM_STAGES {
            if s > 0 {
                store.insert(format!("stage{s}.down.weight"), conv_weight(c.widths[s], c.widths[s - 1], 3, rng));
                store.insert(format!("stage{s}.down.bias"), channel_vec(c.widths[s], 0.0));
            }
            if let Some(h) = &self.hsfa[s] {
                h.init(store, rng);
            }
            for b in &self.blocks[s] {
                b.init(store, rng);
            }
        }
    }

    /// Parameter count owned by the HSFA blocks.
    pub fn hsfa_census<T: Scalar>(store: &ParamStore<T>) -> usize {
        (0..NUM_STAGES).map(|s| store.num_elements_with_prefix(&format!("stage{s}.hsfa."))).sum()
    }

    /// Runs stages `0..=last` and returns their outputs.
    pub fn forward_stages<'t, T: Scalar>(
        &self,
        bind: &Binder<'t, '_, T>,
        image: Var<'t, T>,
        last: usize,
    ) -> Result<Vec<Var<'t, T>>> {
        let c = &self.config;
        let [_, ch, h, w] = image.shape();
        if (ch, h, w) != (c.in_channels, c.height, c.width) {
            return Err(shape_err!(
                "backbone built for {}x{}x{} input, got {:?}",
                c.in_channels,
                c.height,
                c.width,
                image.shape()
            ));
        }
        let mut x = image.conv2d(bind.param("stem.weight")?, Some(bind.param("stem.bias")?), ConvGeom::new(4, 2, 1))?;
        let mut outs = Vec::with_capacity(NUM_STAGES);
        for s in 0..=last.min(NUM_STAGES - 1) {
            if s > 0 {
                x = x.conv2d(
                    bind.param(&format!("stage{s}.down.weight"))?,
                    Some(bind.param(&format!("stage{s}.down.bias"))?),
                    ConvGeom::new(2, 1, 1),
                )?;
            }
            if let Some(hb) = &self.hsfa[s] {
                x = hb.forward(bind, x)?;
            }
            for b in &self.blocks[s] {
                x = b.forward(bind, x, &self.scans[s])?;
            }
            outs.push(x);
        }
        Ok(outs)
    }

    pub fn forward<'t, T: Scalar>(&self, bind: &Binder<'t, '_, T>, image: Var<'t, T>) -> Result<Vec<Var<'t, T>>> {
        self.forward_stages(bind, image, NUM_STAGES - 1)
    }
}
