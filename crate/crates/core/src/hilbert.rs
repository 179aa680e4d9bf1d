//! Hilbert-curve and raster scan orders over 2D grids.
//!
//! A scan path is a permutation `path[i] = row * width + col`: the grid cell
//! visited at step `i`. The order-1 Hilbert curve, with `x` the row and `y`
//! the column, visits (0,0), (0,1), (1,1), (1,0).

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{invalid, shape_err, Result};
use crate::scalar::Scalar;

/// Maps a rank `d` on the order-`order` Hilbert curve to `(row, col)`.
pub fn hilbert_d2xy(order: u32, d: u64) -> Result<(u32, u32)> {
    let side = 1u64 << order;
    if d >= side * side {
        return Err(invalid!("rank {} outside the order-{} curve ({} cells)", d, order, side * side));
    }
    let (mut x, mut y) = (0u64, 0u64);
    let mut t = d;
    let mut s = 1u64;
    while s < side {
        let rx = 1 & (t / 2);
        let ry = 1 & (t ^ rx);
        if ry == 0 {
            if rx == 1 {
                x = s - 1 - x;
                y = s - 1 - y;
            }
            std::mem::swap(&mut x, &mut y);
        }
        x += s * rx;
        y += s * ry;
        t /= 4;
        s *= 2;
    }
    Ok((x as u32, y as u32))
}

/// Inverse of [`hilbert_d2xy`].
pub fn hilbert_xy2d(order: u32, x: u32, y: u32) -> Result<u64> {
    let side = 1u64 << order;
    let (mut x, mut y) = (x as u64, y as u64);
    if x >= side || y >= side {
        return Err(invalid!("cell ({}, {}) outside the {}x{} grid", x, y, side, side));
    }
    let mut d = 0u64;
    let mut s = side / 2;
    while s > 0 {
        let rx = u64::from(x & s > 0);
        let ry = u64::from(y & s > 0);
        d += s * s * ((3 * rx) ^ ry);
        // rotate the sub-square back to the base orientation
        if ry == 0 {
            if rx == 1 {
                x = s - 1 - (x & (s - 1));
                y = s - 1 - (y & (s - 1));
            }
            std::mem::swap(&mut x, &mut y);
        }
        x &= s - 1;
        y &= s - 1;
        s /= 2;
    }
    Ok(d)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScanVariant {
    HilbertUniDir,
    HilbertBiDir,
    HilbertFourDir1,
    HilbertFourDir2,
    HilbertFourDir3,
    RasterBiDir,
    CascadeFourDir,
}

impl ScanVariant {
    pub const ALL: [ScanVariant; 7] = [
        ScanVariant::HilbertUniDir,
        ScanVariant::HilbertBiDir,
        ScanVariant::HilbertFourDir1,
        ScanVariant::HilbertFourDir2,
        ScanVariant::HilbertFourDir3,
        ScanVariant::RasterBiDir,
        ScanVariant::CascadeFourDir,
    ];

    /// The Hilbert variants compared in the scan-variant ablation.
    pub const HILBERT: [ScanVariant; 5] = [
        ScanVariant::HilbertUniDir,
        ScanVariant::HilbertFourDir1,
        ScanVariant::HilbertFourDir2,
        ScanVariant::HilbertFourDir3,
        ScanVariant::HilbertBiDir,
    ];

    pub fn is_hilbert(self) -> bool {
        !matches!(self, ScanVariant::RasterBiDir | ScanVariant::CascadeFourDir)
    }

    pub fn num_paths(self) -> usize {
        match self {
            ScanVariant::HilbertUniDir => 1,
            ScanVariant::HilbertBiDir | ScanVariant::RasterBiDir => 2,
            _ => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScanVariant::HilbertUniDir => "hilbert-uni-dir",
            ScanVariant::HilbertBiDir => "hilbert-bi-dir",
            ScanVariant::HilbertFourDir1 => "hilbert-four-dir1",
            ScanVariant::HilbertFourDir2 => "hilbert-four-dir2",
            ScanVariant::HilbertFourDir3 => "hilbert-four-dir3",
            ScanVariant::RasterBiDir => "raster-bi-dir",
            ScanVariant::CascadeFourDir => "cascade-four-dir",
        }
    }
}

impl fmt::Display for ScanVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScanVariant {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        ScanVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = ScanVariant::ALL.iter().map(|v| v.name()).collect();
                invalid!("unknown scan variant `{}`; expected one of {}", s, names.join(", "))
            })
    }
}

/// One or more traversal paths over an `height × width` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanOrder {
    pub variant: ScanVariant,
    pub height: usize,
    pub width: usize,
    pub paths: Vec<Vec<usize>>,
    pub inverses: Vec<Vec<usize>>,
}

fn invert(path: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; path.len()];
    for (i, &p) in path.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn reversed(path: &[usize]) -> Vec<usize> {
    path.iter().rev().copied().collect()
}

/// Applies a grid symmetry cell-wise to a path on a square `side × side` grid.
fn mapped(path: &[usize], side: usize, f: impl Fn(usize, usize) -> (usize, usize)) -> Vec<usize> {
    path.iter()
        .map(|&p| {
            let (r, c) = f(p / side, p % side);
            r * side + c
        })
        .collect()
}

fn hilbert_path(side: usize) -> Vec<usize> {
    let order = side.trailing_zeros();
    (0..(side * side) as u64)
        .map(|d| {
            let (x, y) = hilbert_d2xy(order, d).expect("rank in range");
            x as usize * side + y as usize
        })
        .collect()
}

impl ScanOrder {
    pub fn build(variant: ScanVariant, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid!("scan grid must be non-empty, got {}x{}", height, width));
        }
        let paths = if variant.is_hilbert() {
            if height != width || !height.is_power_of_two() {
                return Err(shape_err!(
                    "{} needs a square power-of-two grid, got {}x{}; zero-pad the feature map to {}x{} first",
                    variant,
                    height,
                    width,
                    height.max(width).next_power_of_two(),
                    height.max(width).next_power_of_two()
                ));
            }
            let side = height;
            let fwd = hilbert_path(side);
            let flip_y = |r, c| (r, side - 1 - c);
            let flip_x = |r, c| (side - 1 - r, c);
            let transpose = |r, c| (c, r);
            match variant {
                ScanVariant::HilbertUniDir => vec![fwd],
                ScanVariant::HilbertBiDir => {
                    let rev = reversed(&fwd);
                    vec![fwd, rev]
                }
                ScanVariant::HilbertFourDir1 => {
                    let yf = mapped(&fwd, side, flip_y);
                    vec![fwd.clone(), reversed(&fwd), yf.clone(), reversed(&yf)]
                }
                ScanVariant::HilbertFourDir2 => {
                    let tr = mapped(&fwd, side, transpose);
                    vec![fwd.clone(), reversed(&fwd), tr.clone(), reversed(&tr)]
                }
                ScanVariant::HilbertFourDir3 => {
                    let xf = mapped(&fwd, side, flip_x);
                    let yf = mapped(&fwd, side, flip_y);
                    let tr = mapped(&fwd, side, transpose);
                    vec![fwd, xf, yf, tr]
                }
                _ => unreachable!(),
            }
        } else {
            let row_major: Vec<usize> = (0..height * width).collect();
            let col_major: Vec<usize> =
                (0..width).flat_map(|c| (0..height).map(move |r| r * width + c)).collect();
            match variant {
                ScanVariant::RasterBiDir => vec![row_major.clone(), reversed(&row_major)],
                ScanVariant::CascadeFourDir => {
                    vec![row_major.clone(), col_major.clone(), reversed(&row_major), reversed(&col_major)]
                }
                _ => unreachable!(),
            }
        };
        let inverses = paths.iter().map(|p| invert(p)).collect();
        Ok(Self { variant, height, width, paths, inverses })
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Gather indices serializing the grid along path `i`.
    pub fn scan_index(&self, i: usize) -> Rc<[u32]> {
        self.paths[i].iter().map(|&p| p as u32).collect()
    }

    /// Gather indices restoring the grid from a sequence scanned along path `i`.
    pub fn unscan_index(&self, i: usize) -> Rc<[u32]> {
        self.inverses[i].iter().map(|&p| p as u32).collect()
    }
}

/// Serializes `x` of shape `(B, C, H, W)` into `(B, C, 1, H·W)` along `path`.
pub fn apply_scan<'t, T: Scalar>(x: Var<'t, T>, order: &ScanOrder, path: usize) -> Result<Var<'t, T>> {
    check_grid(x, order, path)?;
    x.gather_spatial(order.scan_index(path), 1, order.len())
}

/// Exact inverse of [`apply_scan`].
pub fn inverse_scan<'t, T: Scalar>(seq: Var<'t, T>, order: &ScanOrder, path: usize) -> Result<Var<'t, T>> {
    let [_, _, h, l] = seq.shape();
    if h != 1 || l != order.len() {
        return Err(shape_err!("sequence {:?} does not match a {}-step path", seq.shape(), order.len()));
    }
    if path >= order.paths.len() {
        return Err(invalid!("path {} out of {}", path, order.paths.len()));
    }
    seq.gather_spatial(order.unscan_index(path), order.height, order.width)
}

fn check_grid<T: Scalar>(x: Var<'_, T>, order: &ScanOrder, path: usize) -> Result<()> {
    let [_, _, h, w] = x.shape();
    if (h, w) != (order.height, order.width) {
        return Err(shape_err!(
            "feature map {}x{} does not match the {}x{} scan grid",
            h,
            w,
            order.height,
            order.width
        ));
    }
    if path >= order.paths.len() {
        return Err(invalid!("path {} out of {}", path, order.paths.len()));
    }
    Ok(())
}

/// Mean absolute rank difference over horizontally and vertically adjacent cells.
pub fn locality_score(path: &[usize], height: usize, width: usize) -> Result<f64> {
    if path.len() != height * width {
        return Err(shape_err!("path has {} entries for a {}x{} grid", path.len(), height, width));
    }
    let rank = invert(path);
    let (mut total, mut pairs) = (0usize, 0usize);
    for r in 0..height {
        for c in 0..width {
            let p = r * width + c;
            if c + 1 < width {
                total += rank[p].abs_diff(rank[p + 1]);
                pairs += 1;
            }
            if r + 1 < height {
                total += rank[p].abs_diff(rank[p + width]);
                pairs += 1;
            }
        }
    }
    Ok(if pairs == 0 { 0.0 } else { total as f64 / pairs as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalityReport {
    pub variant: ScanVariant,
    pub height: usize,
    pub width: usize,
    pub per_path: Vec<f64>,
    pub best: f64,
}

impl LocalityReport {
    pub fn for_order(order: &ScanOrder) -> Result<Self> {
        let per_path = order
            .paths
            .iter()
            .map(|p| locality_score(p, order.height, order.width))
            .collect::<Result<Vec<_>>>()?;
        let best = per_path.iter().copied().fold(f64::INFINITY, f64::min);
        Ok(Self { variant: order.variant, height: order.height, width: order.width, per_path, best })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::tensor::Tensor4;

    /// Independent recursive construction: quadrant (0,0) holds the transposed
    /// lower-order curve, (0,1) and (1,1) translated copies, (1,0) the
    /// anti-transposed copy.
    fn recursive_curve(order: u32) -> Vec<(u32, u32)> {
        if order == 0 {
            return vec![(0, 0)];
        }
        let prev = recursive_curve(order - 1);
        let s = 1u32 << (order - 1);
        let mut out = Vec::with_capacity(prev.len() * 4);
        out.extend(prev.iter().map(|&(x, y)| (y, x)));
        out.extend(prev.iter().map(|&(x, y)| (x, y + s)));
        out.extend(prev.iter().map(|&(x, y)| (x + s, y + s)));
        out.extend(prev.iter().map(|&(x, y)| (2 * s - 1 - y, s - 1 - x)));
        out
    }

    #[test]
    fn order_one_base_orientation() {
        let pts: Vec<_> = (0..4).map(|d| hilbert_d2xy(1, d).unwrap()).collect();
        assert_eq!(pts, vec![(0, 0), (0, 1), (1, 1), (1, 0)]);
    }

    #[test]
    fn matches_recursive_construction() {
        for order in 0..=6 {
            let want = recursive_curve(order);
            let got: Vec<_> = (0..want.len() as u64).map(|d| hilbert_d2xy(order, d).unwrap()).collect();
            assert_eq!(got, want, "order {order}");
        }
    }

    #[test]
    fn round_trip_and_unit_steps() {
        for order in 0..=6u32 {
            let n = 1u64 << (2 * order);
            let mut prev = None;
            for d in 0..n {
                let (x, y) = hilbert_d2xy(order, d).unwrap();
                assert_eq!(hilbert_xy2d(order, x, y).unwrap(), d);
                if let Some((px, py)) = prev {
                    assert_eq!(x.abs_diff(px) + y.abs_diff(py), 1);
                }
                prev = Some((x, y));
            }
        }
    }

    #[test]
    fn rank_out_of_range_rejected() {
        assert!(hilbert_d2xy(1, 4).is_err());
        assert!(hilbert_xy2d(1, 2, 0).is_err());
    }

    #[test]
    fn path_counts_and_bijectivity() {
        for v in ScanVariant::ALL {
            let o = ScanOrder::build(v, 8, 8).unwrap();
            assert_eq!(o.paths.len(), v.num_paths());
            for (p, inv) in o.paths.iter().zip(&o.inverses) {
                let mut s = p.clone();
                s.sort_unstable();
                assert_eq!(s, (0..64).collect::<Vec<_>>());
                assert!(p.iter().enumerate().all(|(i, &c)| inv[c] == i));
            }
        }
    }

    #[test]
    fn unit_grid_is_identity() {
        for v in ScanVariant::ALL {
            let o = ScanOrder::build(v, 1, 1).unwrap();
            assert!(o.paths.iter().all(|p| p == &[0]));
        }
    }

    #[test]
    fn bidir_two_by_two() {
        let o = ScanOrder::build(ScanVariant::HilbertBiDir, 2, 2).unwrap();
        // (0,0),(0,1),(1,1),(1,0)
        assert_eq!(o.paths[0], vec![0, 1, 3, 2]);
        assert_eq!(o.paths[1], vec![2, 3, 1, 0]);
        let r = ScanOrder::build(ScanVariant::RasterBiDir, 2, 2).unwrap();
        assert_eq!(r.paths[0], vec![0, 1, 2, 3]);
    }

    #[test]
    fn four_dir_layouts() {
        let side = 4;
        let fwd = ScanOrder::build(ScanVariant::HilbertUniDir, side, side).unwrap().paths.remove(0);
        let yf = mapped(&fwd, side, |r, c| (r, side - 1 - c));
        let xf = mapped(&fwd, side, |r, c| (side - 1 - r, c));
        let tr = mapped(&fwd, side, |r, c| (c, r));
        let o1 = ScanOrder::build(ScanVariant::HilbertFourDir1, side, side).unwrap();
        assert_eq!(o1.paths, vec![fwd.clone(), reversed(&fwd), yf.clone(), reversed(&yf)]);
        let o2 = ScanOrder::build(ScanVariant::HilbertFourDir2, side, side).unwrap();
        assert_eq!(o2.paths, vec![fwd.clone(), reversed(&fwd), tr.clone(), reversed(&tr)]);
        let o3 = ScanOrder::build(ScanVariant::HilbertFourDir3, side, side).unwrap();
        assert_eq!(o3.paths, vec![fwd.clone(), xf, yf, tr]);
        // every symmetric copy is still a unit-step traversal
        for p in &o3.paths {
            for w in p.windows(2) {
                let (a, b) = (w[0], w[1]);
                assert_eq!((a / side).abs_diff(b / side) + (a % side).abs_diff(b % side), 1);
            }
        }
        // four distinct first steps
        let firsts: std::collections::HashSet<_> = o3.paths.iter().map(|p| (p[0], p[1])).collect();
        assert_eq!(firsts.len(), 4);
    }

    #[test]
    fn hilbert_rejects_non_power_of_two() {
        let err = ScanOrder::build(ScanVariant::HilbertBiDir, 6, 6).unwrap_err();
        assert!(err.to_string().contains("zero-pad"));
        assert!(ScanOrder::build(ScanVariant::HilbertBiDir, 4, 8).is_err());
        assert!(ScanOrder::build(ScanVariant::RasterBiDir, 3, 5).is_ok());
    }

    #[test]
    fn raster_locality_values() {
        let r4 = ScanOrder::build(ScanVariant::RasterBiDir, 4, 4).unwrap();
        assert_eq!(locality_score(&r4.paths[0], 4, 4).unwrap(), 2.5);
        let r2 = ScanOrder::build(ScanVariant::RasterBiDir, 2, 2).unwrap();
        assert_eq!(locality_score(&r2.paths[0], 2, 2).unwrap(), 1.5);
    }

    #[test]
    fn hilbert_locality_brute_force_values() {
        // brute force over all 24 4-neighbour pairs of the 4x4 curve
        let pts = recursive_curve(2);
        let mut rank = [[0usize; 4]; 4];
        for (d, &(x, y)) in pts.iter().enumerate() {
            rank[x as usize][y as usize] = d;
        }
        let mut total = 0;
        for r in 0..4 {
            for c in 0..4 {
                if c < 3 {
                    total += rank[r][c].abs_diff(rank[r][c + 1]);
                }
                if r < 3 {
                    total += rank[r][c].abs_diff(rank[r + 1][c]);
                }
            }
        }
        let h = ScanOrder::build(ScanVariant::HilbertUniDir, 4, 4).unwrap();
        let got = locality_score(&h.paths[0], 4, 4).unwrap();
        assert_eq!(got, total as f64 / 24.0);
        assert!((got - 64.0 / 24.0).abs() < 1e-12);
    }

    #[test]
    fn scan_round_trip_and_reversal() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor4::from_fn([2, 3, 4, 4], |[b, c, y, x]| {
            ((b * 7 + c * 13 + y * 5 + x * 3) % 11) as f64 * 0.37 - 1.1
        }));
        let o = ScanOrder::build(ScanVariant::HilbertBiDir, 4, 4).unwrap();
        let s0 = apply_scan(x, &o, 0).unwrap();
        let s1 = apply_scan(x, &o, 1).unwrap();
        let back = inverse_scan(s0, &o, 0).unwrap();
        assert_eq!(*back.value(), *x.value());
        let (a, b) = (s0.value(), s1.value());
        for p in 0..6 {
            let ra = &a.data()[p * 16..(p + 1) * 16];
            let rb: Vec<f64> = b.data()[p * 16..(p + 1) * 16].iter().rev().copied().collect();
            assert_eq!(ra, rb.as_slice());
        }
        let raster = ScanOrder::build(ScanVariant::RasterBiDir, 4, 4).unwrap();
        assert_eq!(apply_scan(x, &raster, 0).unwrap().value().data(), x.value().data());
    }

    #[test]
    fn scan_rejects_mismatched_grid() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor4::zeros([1, 1, 4, 2]));
        let o = ScanOrder::build(ScanVariant::RasterBiDir, 4, 4).unwrap();
        assert!(apply_scan(x, &o, 0).is_err());
    }

    #[test]
    fn variant_names_parse() {
        for v in ScanVariant::ALL {
            assert_eq!(v.name().parse::<ScanVariant>().unwrap(), v);
        }
        assert!("zigzag".parse::<ScanVariant>().is_err());
    }
}
