//! Slice-level forward/backward kernels used by the tape.
//!
//! Everything here works on raw row-major buffers; shape validation happens
//! in the `Var` constructors.

use crate::scalar::Scalar;
use crate::tensor::Shape4;

/// Stride, zero padding, and channel grouping of a 2D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub const fn new(stride: usize, pad: usize, groups: usize) -> Self {
        Self { stride, pad, groups }
    }

    /// Stride 1, padding chosen to preserve extents for an odd kernel.
    pub const fn same(k: usize, groups: usize) -> Self {
        Self { stride: 1, pad: k / 2, groups }
    }

    pub fn out_extent(&self, n: usize, k: usize) -> usize {
        (n + 2 * self.pad - k) / self.stride + 1
    }
}

/// Range of output columns `ox` whose input column `ox * s + k - pad` is in `[0, n)`.
#[inline]
fn valid_range(out_n: usize, n: usize, k: usize, s: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k + s - 1) / s } else { 0 };
    // largest ox with ox*s + k - pad <= n - 1
    let hi = if n + pad > k { ((n - 1 + pad - k) / s + 1).min(out_n) } else { 0 };
    (lo, hi.max(lo))
}


fn is_pointwise(ws: Shape4, g: ConvGeom) -> bool {
    ws[2] == 1 && ws[3] == 1 && g.stride == 1 && g.pad == 0
}

/// Unfolds one image `(cin, h, w)` into `(cin·kh·kw) × (oh·ow)` patches.
fn im2col<T: Scalar>(x: &[T], cin: usize, h: usize, wd: usize, kh: usize, kw: usize, g: ConvGeom, cols: &mut [T]) {
    let oh = g.out_extent(h, kh);
    let ow = g.out_extent(wd, kw);
    let s = g.stride;
    cols.iter_mut().for_each(|v| *v = T::zero());
    for ic in 0..cin {
        let xp = &x[ic * h * wd..(ic + 1) * h * wd];
        for ky in 0..kh {
            let (ylo, yhi) = valid_range(oh, h, ky, s, g.pad);
            for kx in 0..kw {
                let (xlo, xhi) = valid_range(ow, wd, kx, s, g.pad);
                let row = &mut cols[((ic * kh + ky) * kw + kx) * oh * ow..][..oh * ow];
                for oy in ylo..yhi {
                    let iy = oy * s + ky - g.pad;
                    for ox in xlo..xhi {
                        row[oy * ow + ox] = xp[iy * wd + ox * s + kx - g.pad];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
fn col2im<T: Scalar>(cols: &[T], cin: usize, h: usize, wd: usize, kh: usize, kw: usize, g: ConvGeom, dx: &mut [T]) {
    let oh = g.out_extent(h, kh);
    let ow = g.out_extent(wd, kw);
    let s = g.stride;
    for ic in 0..cin {
        let dp = &mut dx[ic * h * wd..(ic + 1) * h * wd];
        for ky in 0..kh {
            let (ylo, yhi) = valid_range(oh, h, ky, s, g.pad);
            for kx in 0..kw {
                let (xlo, xhi) = valid_range(ow, wd, kx, s, g.pad);
                let row = &cols[((ic * kh + ky) * kw + kx) * oh * ow..][..oh * ow];
                for oy in ylo..yhi {
                    let iy = oy * s + ky - g.pad;
                    for ox in xlo..xhi {
                        dp[iy * wd + ox * s + kx - g.pad] += row[oy * ow + ox];
                    }
                }
            }
        }
    }
}

fn conv2d_forward_gemm<T: Scalar>(x: &[T], xs: Shape4, w: &[T], ws: Shape4, bias: Option<&[T]>, g: ConvGeom) -> (Vec<T>, Shape4) {
    let [n, cin, h, wd] = xs;
    let [cout, _, kh, kw] = ws;
    let (oh, ow) = (g.out_extent(h, kh), g.out_extent(wd, kw));
    let (p, k) = (oh * ow, cin * kh * kw);
    let mut out = vec![T::zero(); n * cout * p];
    let pointwise = is_pointwise(ws, g);
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); k * p] };
    for b in 0..n {
        let xb = &x[b * cin * h * wd..(b + 1) * cin * h * wd];
        let ob = &mut out[b * cout * p..(b + 1) * cout * p];
        if let Some(bias) = bias {
            for (oc, row) in ob.chunks_mut(p).enumerate() {
                row.iter_mut().for_each(|v| *v = bias[oc]);
            }
        }
        let src = if pointwise {
            xb
        } else {
            im2col(xb, cin, h, wd, kh, kw, g, &mut cols);
            &cols
        };
        T::gemm(cout, k, p, w, false, src, false, T::one(), ob);
    }
    (out, [n, cout, oh, ow])
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_gemm<T: Scalar>(
    x: &[T],
    xs: Shape4,
    w: &[T],
    ws: Shape4,
    gout: &[T],
    g: ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let [n, cin, h, wd] = xs;
    let [cout, _, kh, kw] = ws;
    let (oh, ow) = (g.out_extent(h, kh), g.out_extent(wd, kw));
    let (p, k) = (oh * ow, cin * kh * kw);
    let pointwise = is_pointwise(ws, g);
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.len()]);
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); k * p] };
    for b in 0..n {
        let gb = &gout[b * cout * p..(b + 1) * cout * p];
        let xb = &x[b * cin * h * wd..(b + 1) * cin * h * wd];
        if let Some(dw) = dw.as_mut() {
            let src = if pointwise {
                xb
            } else {
                im2col(xb, cin, h, wd, kh, kw, g, &mut cols);
                &cols
            };
            T::gemm(cout, p, k, gb, false, src, true, T::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * cin * h * wd..(b + 1) * cin * h * wd];
            if pointwise {
                T::gemm(k, cout, p, w, true, gb, false, T::zero(), dxb);
            } else {
                T::gemm(k, cout, p, w, true, gb, false, T::zero(), &mut cols);
                col2im(&cols, cin, h, wd, kh, kw, g, dxb);
            }
        }
    }
    (dx, dw)
}

pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    xs: Shape4,
    w: &[T],
    ws: Shape4,
    bias: Option<&[T]>,
    g: ConvGeom,
) -> (Vec<T>, Shape4) {
    let [n, cin, h, wd] = xs;
    let [cout, cin_g, kh, kw] = ws;
    let oh = g.out_extent(h, kh);
    let ow = g.out_extent(wd, kw);
    if g.groups == 1 {
        return conv2d_forward_gemm(x, xs, w, ws, bias, g);
    }
    let cout_g = cout / g.groups;
    let mut out = vec![T::zero(); n * cout * oh * ow];
    let s = g.stride;
    for b in 0..n {
        for oc in 0..cout {
            let grp = oc / cout_g;
            let o = &mut out[(b * cout + oc) * oh * ow..(b * cout + oc + 1) * oh * ow];
            if let Some(bias) = bias {
                o.iter_mut().for_each(|v| *v = bias[oc]);
            }
            for icg in 0..cin_g {
                let ic = grp * cin_g + icg;
                let xp = &x[(b * cin + ic) * h * wd..(b * cin + ic + 1) * h * wd];
                for ky in 0..kh {
                    let (ylo, yhi) = valid_range(oh, h, ky, s, g.pad);
                    for kx in 0..kw {
                        let wv = w[((oc * cin_g + icg) * kh + ky) * kw + kx];
                        let (xlo, xhi) = valid_range(ow, wd, kx, s, g.pad);
                        if xlo >= xhi {
                            continue;
                        }
                        for oy in ylo..yhi {
                            let iy = oy * s + ky - g.pad;
                            let orow = &mut o[oy * ow + xlo..oy * ow + xhi];
                            let ix0 = xlo * s + kx - g.pad;
                            if s == 1 {
                                let xrow = &xp[iy * wd + ix0..iy * wd + ix0 + (xhi - xlo)];
                                for (ov, &xv) in orow.iter_mut().zip(xrow) {
                                    *ov += wv * xv;
                                }
                            } else {
                                for (j, ov) in orow.iter_mut().enumerate() {
                                    *ov += wv * xp[iy * wd + ix0 + j * s];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (out, [n, cout, oh, ow])
}

/// Returns `(dx, dw, dbias)`; each only when requested.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    xs: Shape4,
    w: &[T],
    ws: Shape4,
    gout: &[T],
    g: ConvGeom,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let [n, cin, h, wd] = xs;
    let [cout, cin_g, kh, kw] = ws;
    let oh = g.out_extent(h, kh);
    let ow = g.out_extent(wd, kw);
    let db = need_db.then(|| {
        let mut db = vec![T::zero(); cout];
        for b in 0..n {
            for (oc, d) in db.iter_mut().enumerate() {
                *d += gout[(b * cout + oc) * oh * ow..(b * cout + oc + 1) * oh * ow].iter().copied().sum();
            }
        }
        db
    });
    if g.groups == 1 {
        let (dx, dw) = conv2d_backward_gemm(x, xs, w, ws, gout, g, need_dx, need_dw);
        return (dx, dw, db);
    }
    let cout_g = cout / g.groups;
    let s = g.stride;
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.len()]);
    for b in 0..n {
        for oc in 0..cout {
            let grp = oc / cout_g;
            let go = &gout[(b * cout + oc) * oh * ow..(b * cout + oc + 1) * oh * ow];
            for icg in 0..cin_g {
                let ic = grp * cin_g + icg;
                let base = (b * cin + ic) * h * wd;
                for ky in 0..kh {
                    let (ylo, yhi) = valid_range(oh, h, ky, s, g.pad);
                    for kx in 0..kw {
                        let widx = ((oc * cin_g + icg) * kh + ky) * kw + kx;
                        let wv = w[widx];
                        let (xlo, xhi) = valid_range(ow, wd, kx, s, g.pad);
                        if xlo >= xhi {
                            continue;
                        }
                        let mut acc = T::zero();
                        for oy in ylo..yhi {
                            let iy = oy * s + ky - g.pad;
                            let grow = &go[oy * ow + xlo..oy * ow + xhi];
                            let ix0 = base + iy * wd + xlo * s + kx - g.pad;
                            if s == 1 {
                                let len = xhi - xlo;
                                if let Some(dx) = dx.as_mut() {
                                    for (d, &gv) in dx[ix0..ix0 + len].iter_mut().zip(grow) {
                                        *d += wv * gv;
                                    }
                                }
                                if need_dw {
                                    acc += grow.iter().zip(&x[ix0..ix0 + len]).map(|(&a, &b)| a * b).sum::<T>();
                                }
                            } else {
                                for (j, &gv) in grow.iter().enumerate() {
                                    let xi = ix0 + j * s;
                                    if let Some(dx) = dx.as_mut() {
                                        dx[xi] += wv * gv;
                                    }
                                    acc += gv * x[xi];
                                }
                            }
                        }
                        if let Some(dw) = dw.as_mut() {
                            dw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

pub fn avg_pool2_forward<T: Scalar>(x: &[T], xs: Shape4) -> Vec<T> {
    let [n, c, h, w] = xs;
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for p in 0..n * c {
        let xp = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let i = 2 * oy * w + 2 * ox;
                out.push((xp[i] + xp[i + 1] + xp[i + w] + xp[i + w + 1]) * quarter);
            }
        }
    }
    out
}

pub fn avg_pool2_backward<T: Scalar>(g: &[T], xs: Shape4) -> Vec<T> {
    let [n, c, h, w] = xs;
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut dx = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = g[p * oh * ow + oy * ow + ox] * quarter;
                let i = p * h * w + 2 * oy * w + 2 * ox;
                dx[i] += gv;
                dx[i + 1] += gv;
                dx[i + w] += gv;
                dx[i + w + 1] += gv;
            }
        }
    }
    dx
}

/// Half-pixel (align-corners=false) source taps along one axis.
fn bilinear_taps<T: Scalar>(n: usize, factor: usize) -> Vec<(usize, usize, T)> {
    (0..n * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, T::lit(src - i0 as f64))
        })
        .collect()
}

#[inline]
fn lerp<T: Scalar>(a: T, b: T, t: T) -> T {
    a + t * (b - a)
}

pub fn bilinear_forward<T: Scalar>(x: &[T], xs: Shape4, factor: usize) -> Vec<T> {
    let [n, c, h, w] = xs;
    let (oh, ow) = (h * factor, w * factor);
    let ty = bilinear_taps::<T>(h, factor);
    let tx = bilinear_taps::<T>(w, factor);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for p in 0..n * c {
        let xp = &x[p * h * w..(p + 1) * h * w];
        for &(y0, y1, ly) in &ty {
            for &(x0, x1, lx) in &tx {
                let top = lerp(xp[y0 * w + x0], xp[y0 * w + x1], lx);
                let bot = lerp(xp[y1 * w + x0], xp[y1 * w + x1], lx);
                out.push(lerp(top, bot, ly));
            }
        }
    }
    out
}

pub fn bilinear_backward<T: Scalar>(g: &[T], xs: Shape4, factor: usize) -> Vec<T> {
    let [n, c, h, w] = xs;
    let (oh, ow) = (h * factor, w * factor);
    let ty = bilinear_taps::<T>(h, factor);
    let tx = bilinear_taps::<T>(w, factor);
    let mut dx = vec![T::zero(); n * c * h * w];
    let one = T::one();
    for p in 0..n * c {
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        let gp = &g[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let gv = gp[oy * ow + ox];
                let (gt, gb) = (gv * (one - ly), gv * ly);
                d[y0 * w + x0] += gt * (one - lx);
                d[y0 * w + x1] += gt * lx;
                d[y1 * w + x0] += gb * (one - lx);
                d[y1 * w + x1] += gb * lx;
            }
        }
    }
    dx
}

pub fn nearest_forward<T: Scalar>(x: &[T], xs: Shape4, factor: usize) -> Vec<T> {
    let [n, c, h, w] = xs;
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for p in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                out.push(x[p * h * w + (oy / factor) * w + ox / factor]);
            }
        }
    }
    out
}

pub fn nearest_backward<T: Scalar>(g: &[T], xs: Shape4, factor: usize) -> Vec<T> {
    let [n, c, h, w] = xs;
    let (oh, ow) = (h * factor, w * factor);
    let mut dx = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                dx[p * h * w + (oy / factor) * w + ox / factor] += g[p * oh * ow + oy * ow + ox];
            }
        }
    }
    dx
}

/// Orthonormal DCT-II matrix, `m[k * n + j]`.
pub fn dct_matrix<T: Scalar>(n: usize) -> Vec<T> {
    let mut m = Vec::with_capacity(n * n);
    for k in 0..n {
        let s = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        for j in 0..n {
            let angle = std::f64::consts::PI * (2 * j + 1) as f64 * k as f64 / (2 * n) as f64;
            m.push(T::lit(s * angle.cos()));
        }
    }
    m
}

/// Applies `M_h · P · M_w^T` (forward) or `M_h^T · P · M_w` (inverse) to every plane.
pub fn dct2_planes<T: Scalar>(x: &[T], xs: Shape4, inverse: bool) -> Vec<T> {
    let [n, c, h, w] = xs;
    let mh = dct_matrix::<T>(h);
    let mw = dct_matrix::<T>(w);
    let mut out = vec![T::zero(); x.len()];
    let mut tmp = vec![T::zero(); h * w];
    for p in 0..n * c {
        let xp = &x[p * h * w..(p + 1) * h * w];
        // rows: tmp = Mh (or Mh^T) * xp
        for k in 0..h {
            let row = &mut tmp[k * w..(k + 1) * w];
            row.iter_mut().for_each(|v| *v = T::zero());
            for j in 0..h {
                let m = if inverse { mh[j * h + k] } else { mh[k * h + j] };
                for (r, &v) in row.iter_mut().zip(&xp[j * w..(j + 1) * w]) {
                    *r += m * v;
                }
            }
        }
        // columns: out = tmp * Mw^T (or tmp * Mw)
        let op = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for k in 0..w {
                let mut acc = T::zero();
                for j in 0..w {
                    let m = if inverse { mw[j * w + k] } else { mw[k * w + j] };
                    acc += tmp[y * w + j] * m;
                }
                op[y * w + k] = acc;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_brute_force() {
        for n in 1..7 {
            for k in 0..5 {
                for s in 1..3 {
                    for pad in 0..3 {
                        if n + 2 * pad < k + 1 {
                            continue;
                        }
                        let out_n = (n + 2 * pad - (k + 1)) / s + 1;
                        let (lo, hi) = valid_range(out_n, n, k, s, pad);
                        for o in 0..out_n {
                            let i = (o * s + k) as isize - pad as isize;
                            let inside = i >= 0 && (i as usize) < n;
                            assert_eq!(inside, o >= lo && o < hi, "n={n} k={k} s={s} pad={pad} o={o}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn dct_matrix_is_orthonormal() {
        for n in [1usize, 2, 3, 4, 7, 16] {
            let m = dct_matrix::<f64>(n);
            for a in 0..n {
                for b in 0..n {
                    let dot: f64 = (0..n).map(|j| m[a * n + j] * m[b * n + j]).sum();
                    let want = if a == b { 1.0 } else { 0.0 };
                    assert!((dot - want).abs() < 1e-12);
                }
            }
        }
    }
}
