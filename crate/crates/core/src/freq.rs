//! Low/high frequency band split and DCT-domain filtering.

use crate::autodiff::Var;
use crate::error::{shape_err, Result};
use crate::nn::{Binder, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

/// `low` is the 2×2 mean-pooled map; `high = x − upsample(low)`.
#[derive(Clone, Copy, Debug)]
pub struct FreqBands<'t, T> {
    pub low: Var<'t, T>,
    pub high: Var<'t, T>,
}

pub fn lh_separate<'t, T: Scalar>(x: Var<'t, T>) -> Result<FreqBands<'t, T>> {
    let low = x.avg_pool2()?;
    let high = x.sub(low.upsample_bilinear(2)?)?;
    Ok(FreqBands { low, high })
}

/// Learnable elementwise multipliers over the DCT coefficients of each band,
/// stored as `{prefix}.e_high` (`height × width`) and `{prefix}.e_low`
/// (half resolution). One plane is shared across channels unless
/// `per_channel` is set.
#[derive(Clone, Debug)]
pub struct FreqFilter {
    pub prefix: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub per_channel: bool,
}

impl FreqFilter {
    pub fn new(prefix: impl Into<String>, channels: usize, height: usize, width: usize, per_channel: bool) -> Self {
        Self { prefix: prefix.into(), channels, height, width, per_channel }
    }

    pub fn high_name(&self) -> String {
        format!("{}.e_high", self.prefix)
    }

    pub fn low_name(&self) -> String {
        format!("{}.e_low", self.prefix)
    }

    fn planes(&self) -> usize {
        if self.per_channel {
            self.channels
        } else {
            1
        }
    }

    /// All-ones planes: the identity filter.
    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>) {
        let c = self.planes();
        store.insert(self.high_name(), Tensor4::ones([1, c, self.height, self.width]));
        store.insert(self.low_name(), Tensor4::ones([1, c, self.height / 2, self.width / 2]));
    }
}

fn filter_band<'t, T: Scalar>(band: Var<'t, T>, plane: Var<'t, T>) -> Result<Var<'t, T>> {
    let [_, c, h, w] = band.shape();
    let [_, pc, ph, pw] = plane.shape();
    if (ph, pw) != (h, w) || (pc != 1 && pc != c) {
        return Err(shape_err!("filter plane {:?} does not fit band {:?}", plane.shape(), band.shape()));
    }
    Ok(band.dct2().mul(plane)?.idct2())
}

/// `idct2(E ⊙ dct2(band))` per band. The filtered low band is bilinearly
/// upsampled so both outputs share the input resolution.
pub fn freq_attention<'t, T: Scalar>(
    bind: &Binder<'t, '_, T>,
    bands: FreqBands<'t, T>,
    filter: &FreqFilter,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let q_high = filter_band(bands.high, bind.param(&filter.high_name())?)?;
    let q_low = filter_band(bands.low, bind.param(&filter.low_name())?)?.upsample_bilinear(2)?;
    Ok((q_high, q_low))
}
