//! Synthetic single-channel scenes with smooth blobs and speckle patches.

use anyhow::{bail, Result};
use freqscan::detect::BBox;
use freqscan::{Scalar, Tensor4};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const NUM_CLASSES: usize = 2;
pub const BLOB: usize = 0;
pub const SPECKLE: usize = 1;
pub const MIN_SIDE: usize = 8;
pub const MAX_SIDE: usize = 24;
pub const MAX_OBJECTS: usize = 3;
const BACKGROUND: f64 = 0.2;
const NOISE: f64 = 0.08;
const GAP: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub seed: u64,
    pub index: u64,
    pub size: usize,
    /// Row-major `size × size` intensities.
    pub image: Vec<f64>,
    pub boxes: Vec<BBox>,
    /// Per pixel: 0 for background, `k + 1` inside anomaly `k`.
    pub support: Vec<u8>,
}

impl SyntheticScene {
    pub fn tensor<T: Scalar>(&self, flip: bool) -> Tensor4<T> {
        let s = self.size;
        Tensor4::from_fn([1, 1, s, s], |[_, _, y, x]| {
            let xx = if flip { s - 1 - x } else { x };
            T::lit(self.image[y * s + xx])
        })
    }

    /// Boxes mirrored to match `tensor(true)`.
    pub fn flipped_boxes(&self) -> Vec<BBox> {
        let s = self.size as f64;
        self.boxes.iter().map(|b| BBox { x1: s - b.x2, x2: s - b.x1, ..*b }).collect()
    }

    pub fn boxes_for(&self, flip: bool) -> Vec<BBox> {
        if flip {
            self.flipped_boxes()
        } else {
            self.boxes.clone()
        }
    }
}

fn overlaps(a: &(usize, usize, usize, usize), b: &(usize, usize, usize, usize)) -> bool {
    let (ax, ay, aw, ah) = *a;
    let (bx, by, bw, bh) = *b;
    ax < bx + bw + GAP && bx < ax + aw + GAP && ay < by + bh + GAP && by < ay + ah + GAP
}

/// Scene `index` of the stream selected by `seed`.
pub fn gen_scene(seed: u64, index: u64, size: usize) -> SyntheticScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let mut image: Vec<f64> = (0..size * size).map(|_| BACKGROUND + rng.gen_range(-NOISE..NOISE)).collect();
    let mut support = vec![0u8; size * size];
    let want = rng.gen_range(1..=MAX_OBJECTS);
    let mut rects: Vec<(usize, usize, usize, usize)> = Vec::new();
    for _ in 0..100 {
        if rects.len() == want {
            break;
        }
        let w = rng.gen_range(MIN_SIDE..=MAX_SIDE);
        let h = rng.gen_range(MIN_SIDE..=MAX_SIDE);
        let r = (rng.gen_range(0..=size - w), rng.gen_range(0..=size - h), w, h);
        if rects.iter().all(|o| !overlaps(o, &r)) {
            rects.push(r);
        }
    }
    let mut boxes = Vec::with_capacity(rects.len());
    for (k, &(x0, y0, w, h)) in rects.iter().enumerate() {
        let class = rng.gen_range(0..NUM_CLASSES);
        let amp = rng.gen_range(0.4..0.9);
        let (cx, cy) = (x0 as f64 + w as f64 / 2.0, y0 as f64 + h as f64 / 2.0);
        let (sx, sy) = (w as f64 / 4.0, h as f64 / 4.0);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                let v = if class == BLOB {
                    let dx = (x as f64 + 0.5 - cx) / sx;
                    let dy = (y as f64 + 0.5 - cy) / sy;
                    amp * (-0.5 * (dx * dx + dy * dy)).exp()
                } else if rng.gen::<bool>() {
                    amp * 0.5
                } else {
                    -amp * 0.5
                };
                image[y * size + x] += v;
                support[y * size + x] = k as u8 + 1;
            }
        }
        boxes.push(BBox::new(x0 as f64, y0 as f64, (x0 + w) as f64, (y0 + h) as f64, class));
    }
    SyntheticScene { seed, index, size, image, boxes, support }
}

/// Train/test/val sizes: 70/20/10 of `n`, the remainder going to val.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (n as f64 * 0.7).round() as usize;
    let test = (n as f64 * 0.2).round() as usize;
    (train, test, n - train - test)
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Vec<SyntheticScene>,
    pub test: Vec<SyntheticScene>,
    pub val: Vec<SyntheticScene>,
}

impl Splits {
    pub fn get(&self, name: &str) -> Result<&[SyntheticScene]> {
        Ok(match name {
            "train" => &self.train,
            "test" => &self.test,
            "val" => &self.val,
            other => bail!("unknown split `{other}`; expected train, test or val"),
        })
    }
}

pub fn gen_dataset(seed: u64, n: usize, image_size: usize) -> Result<Splits> {
    if n < 10 {
        bail!("dataset needs at least 10 scenes, got {n}");
    }
    if image_size == 0 || image_size % 64 != 0 {
        bail!("image size {image_size} must be a positive multiple of 64");
    }
    let scenes: Vec<_> = (0..n as u64).map(|i| gen_scene(seed, i, image_size)).collect();
    let (tr, te, _) = split_sizes(n);
    let mut it = scenes.into_iter();
    let train = it.by_ref().take(tr).collect();
    let test = it.by_ref().take(te).collect();
    let val = it.collect();
    Ok(Splits { train, test, val })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_follow_seventy_twenty_ten() {
        assert_eq!(split_sizes(10), (7, 2, 1));
        assert_eq!(split_sizes(200), (140, 40, 20));
        let s = gen_dataset(1, 10, 64).unwrap();
        assert_eq!((s.train.len(), s.test.len(), s.val.len()), (7, 2, 1));
        assert!(gen_dataset(1, 9, 64).is_err());
        assert!(gen_dataset(1, 10, 48).is_err());
    }

    #[test]
    fn flip_mirrors_boxes() {
        let s = gen_scene(3, 0, 64);
        let t = s.tensor::<f64>(true);
        let b = s.boxes[0];
        let fb = s.flipped_boxes()[0];
        let (y, x) = (b.y1 as usize, b.x1 as usize);
        assert_eq!(t.at([0, 0, y, 63 - x]), s.image[y * 64 + x]);
        assert_eq!((fb.x1, fb.x2), (64.0 - b.x2, 64.0 - b.x1));
    }
}
