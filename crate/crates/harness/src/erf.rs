//! Effective receptive fields: input-gradient magnitude of the centre
//! activation of the first backbone stage.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use freqscan::autodiff::{Tape, Var};
use freqscan::checkpoint::load_matching;
use freqscan::hilbert::ScanVariant;
use freqscan::nn::{Binder, ParamStore};
use freqscan::vssm::Backbone;
use freqscan::Tensor4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::gen_scene;
use crate::records::write_pgm;

/// The unidirectional, bidirectional, and Y-flip four-direction curves.
pub const ERF_VARIANTS: [ScanVariant; 3] =
    [ScanVariant::HilbertUniDir, ScanVariant::HilbertBiDir, ScanVariant::HilbertFourDir1];

#[derive(Clone, Debug, PartialEq)]
pub struct ErfGrid {
    pub label: String,
    pub height: usize,
    pub width: usize,
    /// Row-major, normalised so the maximum is exactly 1.
    pub values: Vec<f64>,
}

impl ErfGrid {
    pub fn l1_distance(&self, other: &ErfGrid) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.values.chunks(self.width) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(s, "{}", cells.join(",")).expect("string write");
        }
        s
    }
}

/// `|∂ Σ_c f(x)[c, centre] / ∂x|` over the single-channel `image`, scaled to
/// a maximum of 1.
pub fn erf_from_fn<F>(label: &str, image: &Tensor4<f64>, f: F) -> Result<ErfGrid>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> freqscan::Result<Var<'t, f64>>,
{
    let [n, c, h, w] = image.shape();
    if n != 1 || c != 1 {
        bail!("ERF input must be a single 1-channel image, got {:?}", image.shape());
    }
    let tape = Tape::new();
    let x = tape.leaf(image.clone());
    let out = f(&tape, x)?;
    let [_, oc, oh, ow] = out.shape();
    let mut seed = Tensor4::zeros([1, oc, oh, ow]);
    for ch in 0..oc {
        seed.set([0, ch, oh / 2, ow / 2], 1.0);
    }
    let g = tape.backward_with_seed(out, &seed)?.get_or_zeros(x);
    let mags: Vec<f64> = g.data().iter().map(|v| v.abs()).collect();
    let max = mags.iter().fold(0.0f64, |m, &v| m.max(v));
    if !(max > 0.0 && max.is_finite()) {
        bail!("ERF for {label} has no finite non-zero response");
    }
    Ok(ErfGrid { label: label.to_string(), height: h, width: w, values: mags.iter().map(|v| v / max).collect() })
}

/// ERF of stage 0 of the backbone configured by `cfg` with its scan set to
/// `variant`. Weights come from `cfg.train.seed`, overlaid by matching
/// entries of `checkpoint` when given.
pub fn erf_map(cfg: &RunConfig, variant: ScanVariant, checkpoint: Option<&ParamStore<f64>>) -> Result<ErfGrid> {
    let mut dc = cfg.detector_config();
    dc.backbone.scan = variant;
    let backbone = Backbone::new(dc.backbone)?;
    let mut store = ParamStore::<f64>::new();
    backbone.init(&mut store, &mut ChaCha8Rng::seed_from_u64(cfg.train.seed));
    if let Some(ck) = checkpoint {
        load_matching(&mut store, ck);
    }
    let scene = gen_scene(cfg.train.data_seed, 0, cfg.train.image_size);
    let image = scene.tensor::<f64>(false);
    erf_from_fn(variant.name(), &image, |tape, x| {
        let bind = Binder::frozen(tape, &store);
        Ok(backbone.forward_stages(&bind, x, 0)?.remove(0))
    })
}

/// Writes `erf_<label>.csv` and `erf_<label>.pgm` into `dir`.
pub fn write_erf(dir: &Path, grid: &ErfGrid) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let csv = dir.join(format!("erf_{}.csv", grid.label));
    let pgm = dir.join(format!("erf_{}.pgm", grid.label));
    fs::write(&csv, grid.to_csv())?;
    write_pgm(&pgm, grid.width, grid.height, &grid.values)?;
    Ok((csv, pgm))
}
