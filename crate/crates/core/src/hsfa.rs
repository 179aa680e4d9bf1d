//! Hybrid spatial-frequency block: multi-kernel depthwise branch plus the
//! DCT frequency branch, fused by a 1×1 convolution and GELU.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{shape_err, Result};
use crate::freq::{freq_attention, lh_separate, FreqFilter};
use crate::kernels::ConvGeom;
use crate::nn::{conv_weight, Binder, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

pub const SPATIAL_KERNELS: [usize; 2] = [3, 5];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HsfaToggles {
    pub use_lh_info: bool,
    pub use_spatial: bool,
}

impl Default for HsfaToggles {
    fn default() -> Self {
        Self { use_lh_info: true, use_spatial: true }
    }
}

/// Parameters live under `prefix`: `dw{k}.weight/bias` and `gamma{k}` for each
/// spatial kernel, `freq.e_high/e_low`, and `fuse.weight/bias`. Branches that
/// are toggled off own no parameters and feed zero planes into the fuse conv.
#[derive(Clone, Debug)]
pub struct HsfaBlock {
    pub prefix: String,
    pub channels: usize,
    pub toggles: HsfaToggles,
    pub freq: FreqFilter,
}

impl HsfaBlock {
    pub fn new(prefix: &str, channels: usize, height: usize, width: usize, toggles: HsfaToggles) -> Self {
        Self {
            prefix: prefix.to_string(),
            channels,
            toggles,
            freq: FreqFilter::new(format!("{prefix}.freq"), channels, height, width, false),
        }
    }

    pub fn name(&self, leaf: &str) -> String {
        format!("{}.{}", self.prefix, leaf)
    }

    /// Input channels of the fuse conv: `F_s`, two spatial halves, two bands.
    pub fn fuse_in(&self) -> usize {
        5 * self.channels
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        let c = self.channels;
        if self.toggles.use_spatial {
            for k in SPATIAL_KERNELS {
                store.insert(self.name(&format!("dw{k}.weight")), conv_weight(c, 1, k, rng));
                store.insert(self.name(&format!("dw{k}.bias")), Tensor4::zeros([c, 1, 1, 1]));
                store.insert(self.name(&format!("gamma{k}")), Tensor4::ones([1, 1, 1, 1]));
            }
        }
        if self.toggles.use_lh_info {
            self.freq.init(store);
        }
        store.insert(self.name("fuse.weight"), conv_weight(c, self.fuse_in(), 1, rng));
        store.insert(self.name("fuse.bias"), Tensor4::zeros([c, 1, 1, 1]));
    }

    /// `concat_k γ_k · dwconv_k(F_s)`, doubling the channel count.
    pub fn spatial_branch<'t, T: Scalar>(&self, bind: &Binder<'t, '_, T>, fs: Var<'t, T>) -> Result<Var<'t, T>> {
        let mut parts = Vec::with_capacity(SPATIAL_KERNELS.len());
        for k in SPATIAL_KERNELS {
            let y = fs.conv2d(
                bind.param(&self.name(&format!("dw{k}.weight")))?,
                Some(bind.param(&self.name(&format!("dw{k}.bias")))?),
                ConvGeom::same(k, self.channels),
            )?;
            parts.push(y.mul(bind.param(&self.name(&format!("gamma{k}")))?)?);
        }
        bind.tape().concat(&parts)
    }

    /// `GELU(fuse(concat(F_s, Q_s, σ(Q_h), σ(Q_l))))`.
    pub fn forward<'t, T: Scalar>(&self, bind: &Binder<'t, '_, T>, fs: Var<'t, T>) -> Result<Var<'t, T>> {
        let [n, c, h, w] = fs.shape();
        if c != self.channels {
            return Err(shape_err!("HSFA block built for {} channels, got {:?}", self.channels, fs.shape()));
        }
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err!("HSFA block needs even extents, got {}x{}", h, w));
        }
        let tape = bind.tape();
        let zeros = |k: usize| tape.constant(Tensor4::zeros([n, k * c, h, w]));
        let qs = if self.toggles.use_spatial { self.spatial_branch(bind, fs)? } else { zeros(2) };
        let (qh, ql) = if self.toggles.use_lh_info {
            let (qh, ql) = freq_attention(bind, lh_separate(fs)?, &self.freq)?;
            (qh.sigmoid(), ql.sigmoid())
        } else {
            (zeros(1), zeros(1))
        };
        let stack = tape.concat(&[fs, qs, qh, ql])?;
        Ok(stack
            .conv2d(
                bind.param(&self.name("fuse.weight"))?,
                Some(bind.param(&self.name("fuse.bias"))?),
                ConvGeom::new(1, 0, 1),
            )?
            .gelu())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block(c: usize, h: usize, toggles: HsfaToggles) -> (HsfaBlock, ParamStore<f64>) {
        let b = HsfaBlock::new("h", c, h, h, toggles);
        let mut store = ParamStore::new();
        b.init(&mut store, &mut ChaCha8Rng::seed_from_u64(1));
        (b, store)
    }

    fn input(shape: [usize; 4], seed: u64) -> Tensor4<f64> {
        Tensor4::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn zero_input_gives_zero() {
        let (b, store) = block(3, 8, HsfaToggles::default());
        let tape = Tape::new();
        let bind = Binder::new(&tape, &store);
        let x = tape.constant(Tensor4::zeros([1, 3, 8, 8]));
        assert!(b.spatial_branch(&bind, x).unwrap().value().max_abs() == 0.0);
        // frequency bands of zero are zero, but σ(0) = 1/2 still enters the fuse conv
        let mut store = store;
        store.fill("h.fuse.weight", 0.0).unwrap();
        let bind = Binder::new(&tape, &store);
        assert!(b.forward(&bind, x).unwrap().value().max_abs() == 0.0);
    }

    #[test]
    fn zero_gamma_silences_spatial_branch() {
        let (b, mut store) = block(2, 8, HsfaToggles::default());
        store.fill("h.gamma3", 0.0).unwrap();
        store.fill("h.gamma5", 0.0).unwrap();
        let tape = Tape::new();
        let bind = Binder::new(&tape, &store);
        let q = b.spatial_branch(&bind, tape.constant(input([1, 2, 8, 8], 2))).unwrap();
        assert_eq!(q.shape(), [1, 4, 8, 8]);
        assert!(q.value().max_abs() == 0.0);
    }

    #[test]
    fn averaging_kernels_preserve_constant_interior() {
        let (b, mut store) = block(1, 12, HsfaToggles::default());
        store.fill("h.dw3.weight", 1.0 / 9.0).unwrap();
        store.fill("h.dw5.weight", 1.0 / 25.0).unwrap();
        let tape = Tape::new();
        let bind = Binder::new(&tape, &store);
        let q = b.spatial_branch(&bind, tape.constant(Tensor4::full([1, 1, 12, 12], 0.7))).unwrap().value();
        for ch in 0..2 {
            for y in 2..10 {
                for x in 2..10 {
                    assert!((q.at([0, ch, y, x]) - 0.7).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn constructed_pass_through_is_gelu() {
        let c = 2;
        let (b, mut store) = block(c, 4, HsfaToggles::default());
        store.fill("h.gamma3", 0.0).unwrap();
        store.fill("h.gamma5", 0.0).unwrap();
        let fuse = Tensor4::from_fn([c, 5 * c, 1, 1], |[o, i, _, _]| if o == i { 1.0 } else { 0.0 });
        store.set("h.fuse.weight", fuse).unwrap();
        let t = input([1, c, 4, 4], 3);
        let tape = Tape::new();
        let bind = Binder::new(&tape, &store);
        let x = tape.constant(t.clone());
        let out = b.forward(&bind, x).unwrap();
        assert!(out.value().max_abs_diff(&x.gelu().value()) < 1e-12);
    }

    #[test]
    fn both_toggles_off_is_gelu_of_fuse() {
        let toggles = HsfaToggles { use_lh_info: false, use_spatial: false };
        let (b, store) = block(2, 4, toggles);
        assert!(store.get("h.dw3.weight").is_none() && store.get("h.freq.e_high").is_none());
        let tape = Tape::new();
        let bind = Binder::new(&tape, &store);
        let x = tape.constant(input([1, 2, 4, 4], 4));
        let out = b.forward(&bind, x).unwrap();
        let w = store.get("h.fuse.weight").unwrap();
        let sliced = Tensor4::from_fn([2, 2, 1, 1], |[o, i, _, _]| w.at([o, i, 0, 0]));
        let direct = x
            .conv2d(tape.constant(sliced), Some(bind.param("h.fuse.bias").unwrap()), ConvGeom::new(1, 0, 1))
            .unwrap()
            .gelu();
        assert!(out.value().max_abs_diff(&direct.value()) < 1e-12);
    }

    #[test]
    fn shape_contract_and_odd_rejection() {
        let (b, store) = block(3, 8, HsfaToggles::default());
        let tape = Tape::new();
        let bind = Binder::new(&tape, &store);
        let out = b.forward(&bind, tape.constant(input([2, 3, 8, 8], 5))).unwrap();
        assert_eq!(out.shape(), [2, 3, 8, 8]);
        let (b, store) = block(1, 6, HsfaToggles { use_lh_info: false, use_spatial: true });
        let bind = Binder::new(&tape, &store);
        assert!(b.forward(&bind, tape.constant(Tensor4::zeros([1, 1, 5, 6]))).is_err());
    }
}
