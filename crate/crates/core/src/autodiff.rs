//! Reverse-mode differentiation over a fixed operation set.
//!
//! A [`Tape`] records every operation executed through a [`Var`]. Calling
//! [`Tape::backward`] walks the record once in reverse and returns the
//! adjoint of every node that depends on a leaf created with
//! [`Tape::leaf`].

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{invalid, shape_err, Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor4};

/// Index value meaning "write zero" in a spatial gather.
pub const GATHER_ZERO: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Sigmoid,
    Silu,
    Gelu,
    Softplus,
    Exp,
}

impl Unary {
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Unary::Relu => x.max(T::zero()),
            Unary::Sigmoid => sigmoid(x),
            Unary::Silu => x * sigmoid(x),
            Unary::Gelu => {
                let (c, k) = gelu_consts::<T>();
                T::lit(0.5) * x * (T::one() + (c * (x + k * x * x * x)).tanh())
            }
            Unary::Softplus => softplus(x),
            Unary::Exp => x.exp(),
        }
    }

    /// Derivative at input `x` given output `y`.
    fn deriv<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Unary::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Unary::Sigmoid => y * (T::one() - y),
            Unary::Silu => {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
            Unary::Gelu => {
                let (c, k) = gelu_consts::<T>();
                let half = T::lit(0.5);
                let inner = c * (x + k * x * x * x);
                let th = inner.tanh();
                let sech2 = T::one() - th * th;
                half * (T::one() + th) + half * x * sech2 * c * (T::one() + T::lit(3.0) * k * x * x)
            }
            Unary::Softplus => sigmoid(x),
            Unary::Exp => y,
        }
    }
}

fn gelu_consts<T: Scalar>() -> (T, T) {
    (T::lit((2.0 / std::f64::consts::PI).sqrt()), T::lit(0.044715))
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

enum Op<T> {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: T },
    Unary { a: usize, f: Unary },
    Conv { x: usize, w: usize, b: Option<usize>, geom: ConvGeom },
    AvgPool2 { x: usize },
    Bilinear { x: usize, factor: usize },
    Nearest { x: usize, factor: usize },
    LayerNorm { x: usize, w: Option<usize>, b: Option<usize>, xhat: Vec<T>, rstd: Vec<T> },
    Concat { parts: Vec<usize> },
    Narrow { x: usize, start: usize },
    Gather { x: usize, index: Rc<[u32]> },
    Dct2 { x: usize, inverse: bool },
    SelectiveScan { u: usize, delta: usize, a: usize, b: usize, c: usize, states: Vec<T>, abar: Vec<T>, coef: Vec<T> },
    Sum { x: usize },
    Focal { logits: usize, targets: Rc<[T]>, alpha: T, gamma: T },
    IouLoss { pred: usize, target: Rc<[T]>, mask: Rc<[bool]> },
    BceLogits { logits: usize, target: Rc<[T]>, mask: Rc<[bool]> },
}

struct Node<T> {
    value: Rc<Tensor4<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Single-writer record of executed operations.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Shape4>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<Tensor4<T>> {
        self.grads[v.id]
            .as_ref()
            .map(|g| Tensor4::from_vec(self.shapes[v.id], g.clone()).expect("gradient shape"))
    }

    /// Gradient, or zeros when the node received no adjoint.
    pub fn get_or_zeros(&self, v: Var<'_, T>) -> Tensor4<T> {
        self.get(v).unwrap_or_else(|| Tensor4::zeros(self.shapes[v.id]))
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor4<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn value(&self, id: usize) -> Rc<Tensor4<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Differentiable input.
    pub fn leaf(&self, t: Tensor4<T>) -> Var<'_, T> {
        self.push(t, Op::Leaf, true)
    }

    /// Input excluded from differentiation.
    pub fn constant(&self, t: Tensor4<T>) -> Var<'_, T> {
        self.push(t, Op::Leaf, false)
    }

    pub fn concat(&self, parts: &[Var<'_, T>]) -> Result<Var<'_, T>> {
        let first = parts.first().ok_or_else(|| invalid!("concat of zero tensors"))?.shape();
        let mut channels = 0;
        for p in parts {
            let s = p.shape();
            if s[0] != first[0] || s[2] != first[2] || s[3] != first[3] {
                return Err(shape_err!("concat: {:?} incompatible with {:?}", s, first));
            }
            channels += s[1];
        }
        let [n, _, h, w] = first;
        let hw = h * w;
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let mut out = Vec::with_capacity(n * channels * hw);
        for b in 0..n {
            for v in &vals {
                let c = v.shape()[1];
                out.extend_from_slice(&v.data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let rg = parts.iter().any(|p| self.requires(p.id));
        let t = Tensor4::from_vec([n, channels, h, w], out)?;
        Ok(self.push(t, Op::Concat { parts: parts.iter().map(|p| p.id).collect() }, rg))
    }

    /// Adjoints of a single-element output.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if loss.value().numel() != 1 {
            return Err(invalid!(
                "backward needs a single-element output, got shape {:?}; use backward_with_seed",
                loss.shape()
            ));
        }
        self.backward_with_seed(loss, &Tensor4::ones(loss.shape()))
    }

    /// Adjoints for an explicit output cotangent `seed`.
    pub fn backward_with_seed(&self, out: Var<'_, T>, seed: &Tensor4<T>) -> Result<Gradients<T>> {
        if seed.shape() != out.shape() {
            return Err(shape_err!("seed shape {:?} != output shape {:?}", seed.shape(), out.shape()));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[out.id] = Some(seed.data().to_vec());
        for id in (0..=out.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if nodes[id].requires_grad {
                propagate(&nodes, id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    id: usize,
    f: impl FnOnce(&mut [T]),
) {
    if !nodes[id].requires_grad {
        return;
    }
    let len = nodes[id].value.numel();
    let g = grads[id].get_or_insert_with(|| vec![T::zero(); len]);
    f(g);
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

/// Maps each element of `out_shape` to its (possibly broadcast) index in `b_shape`.
fn broadcast_index(out_shape: Shape4, b_shape: Shape4) -> impl Iterator<Item = usize> {
    let [n, c, h, w] = out_shape;
    let st = {
        let [_, bc, bh, bw] = b_shape;
        let full = [bc * bh * bw, bh * bw, bw, 1];
        let mut s = [0; 4];
        for i in 0..4 {
            s[i] = if b_shape[i] == 1 { 0 } else { full[i] };
        }
        s
    };
    (0..n).flat_map(move |i0| {
        (0..c).flat_map(move |i1| {
            (0..h).flat_map(move |i2| (0..w).map(move |i3| i0 * st[0] + i1 * st[1] + i2 * st[2] + i3 * st[3]))
        })
    })
}

fn broadcastable(a: Shape4, b: Shape4) -> bool {
    (0..4).all(|i| b[i] == a[i] || b[i] == 1)
}

#[allow(clippy::needless_range_loop)]
fn propagate<T: Scalar>(nodes: &[Node<T>], id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[id];
    let val = |i: usize| -> &Tensor4<T> { &nodes[i].value };
    match &node.op {
        Op::Leaf => {}
        Op::Add { a, b } | Op::Sub { a, b } => {
            let sign = if matches!(node.op, Op::Sub { .. }) { -T::one() } else { T::one() };
            accumulate(nodes, grads, *a, |d| add_into(d, g));
            let (os, bs) = (node.value.shape(), val(*b).shape());
            accumulate(nodes, grads, *b, |d| {
                if os == bs {
                    for (d, &gv) in d.iter_mut().zip(g) {
                        *d += sign * gv;
                    }
                } else {
                    for (gv, bi) in g.iter().zip(broadcast_index(os, bs)) {
                        d[bi] += sign * *gv;
                    }
                }
            });
        }
        Op::Mul { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let (os, bs) = (node.value.shape(), bv.shape());
            if os == bs {
                accumulate(nodes, grads, *a, |d| {
                    for ((d, &gv), &bx) in d.iter_mut().zip(g).zip(bv.data()) {
                        *d += gv * bx;
                    }
                });
                accumulate(nodes, grads, *b, |d| {
                    for ((d, &gv), &ax) in d.iter_mut().zip(g).zip(av.data()) {
                        *d += gv * ax;
                    }
                });
            } else {
                accumulate(nodes, grads, *a, |d| {
                    for ((d, &gv), bi) in d.iter_mut().zip(g).zip(broadcast_index(os, bs)) {
                        *d += gv * bv.data()[bi];
                    }
                });
                accumulate(nodes, grads, *b, |d| {
                    for ((&gv, &ax), bi) in g.iter().zip(av.data()).zip(broadcast_index(os, bs)) {
                        d[bi] += gv * ax;
                    }
                });
            }
        }
        Op::Scale { a, c } => accumulate(nodes, grads, *a, |d| {
            for (d, &gv) in d.iter_mut().zip(g) {
                *d += *c * gv;
            }
        }),
        Op::Unary { a, f } => {
            let x = val(*a);
            accumulate(nodes, grads, *a, |d| {
                for (((d, &gv), &xv), &yv) in d.iter_mut().zip(g).zip(x.data()).zip(node.value.data()) {
                    *d += gv * f.deriv(xv, yv);
                }
            });
        }
        Op::Conv { x, w, b, geom } => {
            let (xv, wv) = (val(*x), val(*w));
            let need_db = b.map(|b| nodes[b].requires_grad).unwrap_or(false);
            let (dx, dw, db) = kernels::conv2d_backward(
                xv.data(),
                xv.shape(),
                wv.data(),
                wv.shape(),
                g,
                *geom,
                nodes[*x].requires_grad,
                nodes[*w].requires_grad,
                need_db,
            );
            if let Some(dx) = dx {
                accumulate(nodes, grads, *x, |d| add_into(d, &dx));
            }
            if let Some(dw) = dw {
                accumulate(nodes, grads, *w, |d| add_into(d, &dw));
            }
            if let (Some(b), Some(db)) = (b, db) {
                accumulate(nodes, grads, *b, |d| add_into(d, &db));
            }
        }
        Op::AvgPool2 { x } => {
            let dx = kernels::avg_pool2_backward(g, val(*x).shape());
            accumulate(nodes, grads, *x, |d| add_into(d, &dx));
        }
        Op::Bilinear { x, factor } => {
            let dx = kernels::bilinear_backward(g, val(*x).shape(), *factor);
            accumulate(nodes, grads, *x, |d| add_into(d, &dx));
        }
        Op::Nearest { x, factor } => {
            let dx = kernels::nearest_backward(g, val(*x).shape(), *factor);
            accumulate(nodes, grads, *x, |d| add_into(d, &dx));
        }
        Op::LayerNorm { x, w, b, xhat, rstd } => {
            let [n, c, h, wd] = node.value.shape();
            let hw = h * wd;
            let wv = w.map(|w| val(w).data().to_vec());
            if nodes[*x].requires_grad {
                let mut dx = vec![T::zero(); g.len()];
                let cn = T::lit(c as f64);
                for bi in 0..n {
                    for p in 0..hw {
                        let idx = |ch: usize| (bi * c + ch) * hw + p;
                        let (mut m1, mut m2) = (T::zero(), T::zero());
                        for ch in 0..c {
                            let dxh = g[idx(ch)] * wv.as_ref().map_or(T::one(), |w| w[ch]);
                            m1 += dxh;
                            m2 += dxh * xhat[idx(ch)];
                        }
                        m1 /= cn;
                        m2 /= cn;
                        let r = rstd[bi * hw + p];
                        for ch in 0..c {
                            let dxh = g[idx(ch)] * wv.as_ref().map_or(T::one(), |w| w[ch]);
                            dx[idx(ch)] = r * (dxh - m1 - xhat[idx(ch)] * m2);
                        }
                    }
                }
                accumulate(nodes, grads, *x, |d| add_into(d, &dx));
            }
            if let Some(w) = w {
                accumulate(nodes, grads, *w, |d| {
                    for (i, (&gv, &xh)) in g.iter().zip(xhat).enumerate() {
                        d[(i / hw) % c] += gv * xh;
                    }
                });
            }
            if let Some(b) = b {
                accumulate(nodes, grads, *b, |d| {
                    for (i, &gv) in g.iter().enumerate() {
                        d[(i / hw) % c] += gv;
                    }
                });
            }
        }
        Op::Concat { parts } => {
            let [n, c, h, w] = node.value.shape();
            let hw = h * w;
            let mut offset = 0;
            for &p in parts {
                let pc = val(p).shape()[1];
                accumulate(nodes, grads, p, |d| {
                    for bi in 0..n {
                        let src = &g[(bi * c + offset) * hw..(bi * c + offset + pc) * hw];
                        add_into(&mut d[bi * pc * hw..(bi + 1) * pc * hw], src);
                    }
                });
                offset += pc;
            }
        }
        Op::Narrow { x, start } => {
            let [n, c, h, w] = val(*x).shape();
            let len = node.value.shape()[1];
            let hw = h * w;
            accumulate(nodes, grads, *x, |d| {
                for bi in 0..n {
                    let dst = &mut d[(bi * c + start) * hw..(bi * c + start + len) * hw];
                    add_into(dst, &g[bi * len * hw..(bi + 1) * len * hw]);
                }
            });
        }
        Op::Gather { x, index } => {
            let [n, c, h, w] = val(*x).shape();
            let src_hw = h * w;
            let out_hw = index.len();
            accumulate(nodes, grads, *x, |d| {
                for p in 0..n * c {
                    let gp = &g[p * out_hw..(p + 1) * out_hw];
                    let dp = &mut d[p * src_hw..(p + 1) * src_hw];
                    for (&gv, &i) in gp.iter().zip(index.iter()) {
                        if i != GATHER_ZERO {
                            dp[i as usize] += gv;
                        }
                    }
                }
            });
        }
        Op::Dct2 { x, inverse } => {
            // orthonormal: the adjoint is the opposite transform
            let dx = kernels::dct2_planes(g, node.value.shape(), !inverse);
            accumulate(nodes, grads, *x, |d| add_into(d, &dx));
        }
        Op::SelectiveScan { u, delta, a, b, c, states, abar, coef } => {
            selective_scan_backward(nodes, grads, g, [*u, *delta, *a, *b, *c], [states, abar, coef]);
        }
        Op::Sum { x } => {
            let gv = g[0];
            accumulate(nodes, grads, *x, |d| d.iter_mut().for_each(|d| *d += gv));
        }
        Op::Focal { logits, targets, alpha, gamma } => {
            let x = val(*logits);
            let gv = g[0];
            accumulate(nodes, grads, *logits, |d| {
                for ((d, &xv), &t) in d.iter_mut().zip(x.data()).zip(targets.iter()) {
                    *d += gv * focal_term(xv, t, *alpha, *gamma).1;
                }
            });
        }
        Op::IouLoss { pred, target, mask } => {
            let p = val(*pred);
            let gv = g[0];
            let [n, _, h, w] = p.shape();
            let hw = h * w;
            accumulate(nodes, grads, *pred, |d| {
                for bi in 0..n {
                    for q in 0..hw {
                        if !mask[bi * hw + q] {
                            continue;
                        }
                        let at = |k: usize| (bi * 4 + k) * hw + q;
                        let pr = [p.data()[at(0)], p.data()[at(1)], p.data()[at(2)], p.data()[at(3)]];
                        let tg = [target[at(0)], target[at(1)], target[at(2)], target[at(3)]];
                        let (_, dp) = iou_loss_ltrb(pr, tg);
                        for k in 0..4 {
                            d[at(k)] += gv * dp[k];
                        }
                    }
                }
            });
        }
        Op::BceLogits { logits, target, mask } => {
            let x = val(*logits);
            let gv = g[0];
            accumulate(nodes, grads, *logits, |d| {
                for (i, d) in d.iter_mut().enumerate() {
                    if mask[i] {
                        *d += gv * (sigmoid(x.data()[i]) - target[i]);
                    }
                }
            });
        }
    }
}

const PROB_CLAMP: f64 = 1e-7;

/// Sigmoid focal loss of one logit and its derivative with respect to the logit.
pub(crate) fn focal_term<T: Scalar>(x: T, target: T, alpha: T, gamma: T) -> (T, T) {
    let p = sigmoid(x);
    let eps = T::lit(PROB_CLAMP);
    let one = T::one();
    let dp_dx = p * (one - p);
    // positive part: -alpha (1-p)^g ln p ; negative part: -(1-alpha) p^g ln(1-p)
    let (mut loss, mut grad) = (T::zero(), T::zero());
    if target > T::zero() {
        let pc = p.max(eps).min(one - eps);
        let q = one - p;
        let lnp = pc.ln();
        let l = -alpha * q.powf(gamma) * lnp;
        let dlnp = if p > eps && p < one - eps { one / p } else { T::zero() };
        let dl_dp = alpha * gamma * q.powf(gamma - one) * lnp - alpha * q.powf(gamma) * dlnp;
        loss += target * l;
        grad += target * dl_dp * dp_dx;
    }
    if target < one {
        let qc = (one - p).max(eps).min(one - eps);
        let ln1p = qc.ln();
        let l = -(one - alpha) * p.powf(gamma) * ln1p;
        let dln = if p > eps && p < one - eps { -one / (one - p) } else { T::zero() };
        let dl_dp = -(one - alpha) * (gamma * p.powf(gamma - one) * ln1p + p.powf(gamma) * dln);
        loss += (one - target) * l;
        grad += (one - target) * dl_dp * dp_dx;
    }
    (loss, grad)
}

/// `-ln IoU` of two boxes given as (left, top, right, bottom) distances from
/// a shared location, with its gradient with respect to the prediction.
pub fn iou_loss_ltrb<T: Scalar>(p: [T; 4], t: [T; 4]) -> (T, [T; 4]) {
    let [l, tp, r, b] = p;
    let [lt, tt, rt, bt] = t;
    let wi = l.min(lt) + r.min(rt);
    let hi = tp.min(tt) + b.min(bt);
    let inter = wi * hi;
    let area_p = (l + r) * (tp + b);
    let area_t = (lt + rt) * (tt + bt);
    let union = area_p + area_t - inter;
    let tiny = T::lit(PROB_CLAMP);
    let iou = (inter / union).max(tiny);
    let loss = -iou.ln();
    // L = -ln I + ln U, U = Ap + At - I
    let dl_di = -T::one() / inter.max(tiny) - T::one() / union;
    let dl_dap = T::one() / union;
    let ind = |a: T, b: T| if a < b { T::one() } else { T::zero() };
    let grad = [
        dl_dap * (tp + b) + dl_di * hi * ind(l, lt),
        dl_dap * (l + r) + dl_di * wi * ind(tp, tt),
        dl_dap * (tp + b) + dl_di * hi * ind(r, rt),
        dl_dap * (l + r) + dl_di * wi * ind(b, bt),
    ];
    (loss, grad)
}

/// `(e^z - 1)/z · Δ` with the exact limit `Δ` for |z| below 1e-8.
#[inline]
pub(crate) fn zoh_input_coef<T: Scalar>(delta: T, a: T) -> T {
    let z = delta * a;
    if z.abs() < T::lit(1e-8) {
        delta
    } else {
        z.exp_m1() / a
    }
}

/// Series for `(z e^z - (e^z - 1)) / z²` near zero, the `a`-derivative
/// factor of [`zoh_input_coef`].
#[inline]
fn zoh_coef_da_factor<T: Scalar>(z: T) -> T {
    T::lit(0.5) + z / T::lit(3.0) + z * z / T::lit(8.0) + z * z * z / T::lit(30.0)
}

fn selective_scan_backward<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    gy: &[T],
    [u, delta, a, b, c]: [usize; 5],
    [states, abars, coefs]: [&[T]; 3],
) {
    let uv = &nodes[u].value;
    let dv = &nodes[delta].value;
    let av = &nodes[a].value;
    let bv = &nodes[b].value;
    let cv = &nodes[c].value;
    let [nb, d, _, l] = uv.shape();
    let ns = bv.shape()[1];
    let mut du = vec![T::zero(); uv.numel()];
    let mut dd = vec![T::zero(); dv.numel()];
    let mut da = vec![T::zero(); av.numel()];
    let mut db = vec![T::zero(); bv.numel()];
    let mut dc = vec![T::zero(); cv.numel()];
    let mut dh = vec![T::zero(); ns];
    for bi in 0..nb {
        for ch in 0..d {
            dh.iter_mut().for_each(|v| *v = T::zero());
            let row = (bi * d + ch) * l;
            for t in (0..l).rev() {
                let gv = gy[row + t];
                let uu = uv.data()[row + t];
                let dt = dv.data()[row + t];
                let mut du_acc = T::zero();
                let mut dd_acc = T::zero();
                for n in 0..ns {
                    let an = av.data()[ch * ns + n];
                    let bidx = (bi * ns + n) * l + t;
                    let bn = bv.data()[bidx];
                    let cn = cv.data()[bidx];
                    let hidx = (row + t) * ns + n;
                    let h_t = states[hidx];
                    let h_prev = if t > 0 { states[hidx - ns] } else { T::zero() };
                    dc[bidx] += gv * h_t;
                    let g_h = dh[n] + gv * cn;
                    let z = dt * an;
                    let abar = abars[hidx];
                    let coef = coefs[hidx];
                    du_acc += g_h * coef * bn;
                    db[bidx] += g_h * coef * uu;
                    let d_coef = g_h * bn * uu;
                    let d_abar = g_h * h_prev;
                    let small = z.abs() < T::lit(1e-8);
                    dd_acc += d_abar * abar * an + d_coef * if small { T::one() } else { abar };
                    let factor = if z.abs() < T::lit(1e-3) {
                        zoh_coef_da_factor(z)
                    } else {
                        (z * abar - coef * an) / (z * z)
                    };
                    da[ch * ns + n] += d_abar * abar * dt + d_coef * dt * dt * factor;
                    dh[n] = g_h * abar;
                }
                du[row + t] += du_acc;
                dd[row + t] += dd_acc;
            }
        }
    }
    accumulate(nodes, grads, u, |g| add_into(g, &du));
    accumulate(nodes, grads, delta, |g| add_into(g, &dd));
    accumulate(nodes, grads, a, |g| add_into(g, &da));
    accumulate(nodes, grads, b, |g| add_into(g, &db));
    accumulate(nodes, grads, c, |g| add_into(g, &dc));
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor4<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Shape4 {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    fn rg(&self) -> bool {
        self.tape.requires(self.id)
    }

    fn binary(self, other: Var<'t, T>, kind: u8) -> Result<Var<'t, T>> {
        let (av, bv) = (self.value(), other.value());
        let (sa, sb) = (av.shape(), bv.shape());
        if !broadcastable(sa, sb) {
            return Err(shape_err!("operand {:?} does not broadcast to {:?}", sb, sa));
        }
        let f = |x: T, y: T| match kind {
            0 => x + y,
            1 => x - y,
            _ => x * y,
        };
        let data: Vec<T> = if sa == sb {
            av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            av.data().iter().zip(broadcast_index(sa, sb)).map(|(&x, bi)| f(x, bv.data()[bi])).collect()
        };
        let op = match kind {
            0 => Op::Add { a: self.id, b: other.id },
            1 => Op::Sub { a: self.id, b: other.id },
            _ => Op::Mul { a: self.id, b: other.id },
        };
        let rg = self.rg() || other.rg();
        Ok(self.tape.push(Tensor4::from_vec(sa, data)?, op, rg))
    }

    /// `self + other`, where `other` may broadcast along unit extents.
    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, 0)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, 1)
    }

    /// Elementwise product; `other` may broadcast along unit extents.
    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, 2)
    }

    pub fn scale(self, c: T) -> Var<'t, T> {
        let v = self.value().map(|x| x * c);
        self.tape.push(v, Op::Scale { a: self.id, c }, self.rg())
    }

    pub fn unary(self, f: Unary) -> Var<'t, T> {
        let v = self.value().map(|x| f.apply(x));
        self.tape.push(v, Op::Unary { a: self.id, f }, self.rg())
    }

    pub fn relu(self) -> Var<'t, T> {
        self.unary(Unary::Relu)
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.unary(Unary::Sigmoid)
    }

    pub fn silu(self) -> Var<'t, T> {
        self.unary(Unary::Silu)
    }

    /// Tanh-form GELU.
    pub fn gelu(self) -> Var<'t, T> {
        self.unary(Unary::Gelu)
    }

    pub fn softplus(self) -> Var<'t, T> {
        self.unary(Unary::Softplus)
    }

    pub fn exp(self) -> Var<'t, T> {
        self.unary(Unary::Exp)
    }

    /// 2D convolution with zero padding; `weight` is `[out, in/groups, kh, kw]`,
    /// `bias` has `out` elements.
    pub fn conv2d(self, weight: Var<'t, T>, bias: Option<Var<'t, T>>, geom: ConvGeom) -> Result<Var<'t, T>> {
        let (xv, wv) = (self.value(), weight.value());
        let [_, cin, h, w] = xv.shape();
        let [cout, cin_g, kh, kw] = wv.shape();
        if geom.groups == 0 || geom.stride == 0 || cin % geom.groups != 0 || cout % geom.groups != 0 {
            return Err(shape_err!(
                "conv2d: {} input / {} output channels not divisible into {} groups",
                cin,
                cout,
                geom.groups
            ));
        }
        if cin / geom.groups != cin_g {
            return Err(shape_err!(
                "conv2d: input has {} channels but weight {:?} expects {} per group x {} groups",
                cin,
                wv.shape(),
                cin_g,
                geom.groups
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(shape_err!("conv2d: kernel {}x{} must have odd extents", kh, kw));
        }
        if h + 2 * geom.pad < kh || w + 2 * geom.pad < kw {
            return Err(shape_err!("conv2d: kernel {}x{} larger than padded input {}x{}", kh, kw, h, w));
        }
        let bv = match bias {
            Some(b) => {
                let bv = b.value();
                if bv.numel() != cout {
                    return Err(shape_err!("conv2d: bias has {} elements, expected {}", bv.numel(), cout));
                }
                Some(bv)
            }
            None => None,
        };
        let (out, shape) =
            kernels::conv2d_forward(xv.data(), xv.shape(), wv.data(), wv.shape(), bv.as_ref().map(|b| b.data()), geom);
        let rg = self.rg() || weight.rg() || bias.map(|b| b.rg()).unwrap_or(false);
        let op = Op::Conv { x: self.id, w: weight.id, b: bias.map(|b| b.id), geom };
        Ok(self.tape.push(Tensor4::from_vec(shape, out)?, op, rg))
    }

    /// 2×2 mean pooling with stride 2.
    pub fn avg_pool2(self) -> Result<Var<'t, T>> {
        let xv = self.value();
        let [n, c, h, w] = xv.shape();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err!("avg_pool2d: extents {}x{} must be even", h, w));
        }
        let out = kernels::avg_pool2_forward(xv.data(), xv.shape());
        Ok(self.tape.push(Tensor4::from_vec([n, c, h / 2, w / 2], out)?, Op::AvgPool2 { x: self.id }, self.rg()))
    }

    /// Bilinear upsampling by an integer factor, half-pixel centres.
    pub fn upsample_bilinear(self, factor: usize) -> Result<Var<'t, T>> {
        if factor == 0 {
            return Err(invalid!("upsample factor must be >= 1"));
        }
        let xv = self.value();
        let [n, c, h, w] = xv.shape();
        let out = kernels::bilinear_forward(xv.data(), xv.shape(), factor);
        let t = Tensor4::from_vec([n, c, h * factor, w * factor], out)?;
        Ok(self.tape.push(t, Op::Bilinear { x: self.id, factor }, self.rg()))
    }

    pub fn upsample_nearest(self, factor: usize) -> Result<Var<'t, T>> {
        if factor == 0 {
            return Err(invalid!("upsample factor must be >= 1"));
        }
        let xv = self.value();
        let [n, c, h, w] = xv.shape();
        let out = kernels::nearest_forward(xv.data(), xv.shape(), factor);
        let t = Tensor4::from_vec([n, c, h * factor, w * factor], out)?;
        Ok(self.tape.push(t, Op::Nearest { x: self.id, factor }, self.rg()))
    }

    /// Normalizes over the channel axis at every (batch, y, x) position, then
    /// applies the optional per-channel affine `weight`, `bias`.
    pub fn layer_norm(self, weight: Option<Var<'t, T>>, bias: Option<Var<'t, T>>, eps: T) -> Result<Var<'t, T>> {
        if eps <= T::zero() {
            return Err(invalid!("layer_norm eps must be positive"));
        }
        let xv = self.value();
        let [n, c, h, w] = xv.shape();
        let hw = h * w;
        for p in [weight, bias].into_iter().flatten() {
            if p.value().numel() != c {
                return Err(shape_err!("layer_norm affine has {} elements, expected {}", p.value().numel(), c));
            }
        }
        let wv = weight.map(|w| w.value());
        let bv = bias.map(|b| b.value());
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut rstd = vec![T::zero(); n * hw];
        let mut out = vec![T::zero(); xv.numel()];
        let cn = T::lit(c as f64);
        let x = xv.data();
        for bi in 0..n {
            for p in 0..hw {
                let idx = |ch: usize| (bi * c + ch) * hw + p;
                let mean = (0..c).map(|ch| x[idx(ch)]).sum::<T>() / cn;
                let var = (0..c).map(|ch| (x[idx(ch)] - mean).powi(2)).sum::<T>() / cn;
                let r = T::one() / (var + eps).sqrt();
                rstd[bi * hw + p] = r;
                for ch in 0..c {
                    let xh = (x[idx(ch)] - mean) * r;
                    xhat[idx(ch)] = xh;
                    let mut y = xh;
                    if let Some(w) = &wv {
                        y *= w.data()[ch];
                    }
                    if let Some(b) = &bv {
                        y += b.data()[ch];
                    }
                    out[idx(ch)] = y;
                }
            }
        }
        let rg = self.rg() || weight.map_or(false, |w| w.rg()) || bias.map_or(false, |b| b.rg());
        let op = Op::LayerNorm { x: self.id, w: weight.map(|w| w.id), b: bias.map(|b| b.id), xhat, rstd };
        Ok(self.tape.push(Tensor4::from_vec(xv.shape(), out)?, op, rg))
    }

    /// Channels `start..start + len`.
    pub fn narrow_channels(self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let xv = self.value();
        let [n, c, h, w] = xv.shape();
        if start + len > c {
            return Err(shape_err!("narrow {}..{} out of {} channels", start, start + len, c));
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * len * hw);
        for bi in 0..n {
            out.extend_from_slice(&xv.data()[(bi * c + start) * hw..(bi * c + start + len) * hw]);
        }
        let t = Tensor4::from_vec([n, len, h, w], out)?;
        Ok(self.tape.push(t, Op::Narrow { x: self.id, start }, self.rg()))
    }

    /// Re-indexes the spatial plane: output position `k` of an `out_h × out_w`
    /// plane takes input position `index[k]` (row-major), or zero for
    /// [`GATHER_ZERO`].
    pub fn gather_spatial(self, index: Rc<[u32]>, out_h: usize, out_w: usize) -> Result<Var<'t, T>> {
        let xv = self.value();
        let [n, c, h, w] = xv.shape();
        if index.len() != out_h * out_w {
            return Err(shape_err!("gather index has {} entries for a {}x{} output", index.len(), out_h, out_w));
        }
        if let Some(&bad) = index.iter().find(|&&i| i != GATHER_ZERO && i as usize >= h * w) {
            return Err(shape_err!("gather index {} outside {}x{} plane", bad, h, w));
        }
        let src_hw = h * w;
        let mut out = Vec::with_capacity(n * c * index.len());
        for p in 0..n * c {
            let xp = &xv.data()[p * src_hw..(p + 1) * src_hw];
            out.extend(index.iter().map(|&i| if i == GATHER_ZERO { T::zero() } else { xp[i as usize] }));
        }
        let t = Tensor4::from_vec([n, c, out_h, out_w], out)?;
        Ok(self.tape.push(t, Op::Gather { x: self.id, index }, self.rg()))
    }

    fn dct(self, inverse: bool) -> Var<'t, T> {
        let xv = self.value();
        let out = kernels::dct2_planes(xv.data(), xv.shape(), inverse);
        let t = Tensor4::from_vec(xv.shape(), out).expect("dct preserves shape");
        self.tape.push(t, Op::Dct2 { x: self.id, inverse }, self.rg())
    }

    /// Orthonormal 2D DCT-II of every (height, width) plane.
    pub fn dct2(self) -> Var<'t, T> {
        self.dct(false)
    }

    /// Inverse of [`Var::dct2`] (orthonormal DCT-III).
    pub fn idct2(self) -> Var<'t, T> {
        self.dct(true)
    }

    /// Diagonal selective state-space scan along the width axis.
    ///
    /// `self` is the input `u` of shape `(B, D, 1, L)`, `delta` matches it,
    /// `a` holds the `D × N` diagonal evolution entries, `b` and `c` are
    /// `(B, N, 1, L)`. Per channel `d` and state `n`:
    /// `h_t = exp(Δ_t a) h_{t-1} + (exp(Δ_t a) - 1)/a · b_t u_t`,
    /// `y_t = Σ_n c_t h_t`, with `h_0 = 0`.
    pub fn selective_scan(
        self,
        delta: Var<'t, T>,
        a: Var<'t, T>,
        b: Var<'t, T>,
        c: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let (uv, dv, av, bv, cv) = (self.value(), delta.value(), a.value(), b.value(), c.value());
        let [nb, d, one, l] = uv.shape();
        if one != 1 {
            return Err(shape_err!("selective_scan expects (B, D, 1, L) input, got {:?}", uv.shape()));
        }
        if dv.shape() != uv.shape() {
            return Err(shape_err!("delta {:?} != input {:?}", dv.shape(), uv.shape()));
        }
        let ns = bv.shape()[1];
        if bv.shape() != [nb, ns, 1, l] || cv.shape() != [nb, ns, 1, l] {
            return Err(shape_err!(
                "B {:?} and C {:?} must both be ({}, N, 1, {})",
                bv.shape(),
                cv.shape(),
                nb,
                l
            ));
        }
        if av.numel() != d * ns {
            return Err(shape_err!("A has {} entries, expected {} x {}", av.numel(), d, ns));
        }
        for (name, t) in [("input", &uv), ("delta", &dv), ("A", &av), ("B", &bv), ("C", &cv)] {
            if !t.is_finite() {
                return Err(Error::Numeric(format!("selective_scan: non-finite value in {name}")));
            }
        }
        if dv.data().iter().any(|&x| x <= T::zero()) {
            return Err(invalid!("selective_scan: timescale must be positive"));
        }
        let mut states = vec![T::zero(); nb * d * l * ns];
        let mut abars = vec![T::zero(); nb * d * l * ns];
        let mut coefs = vec![T::zero(); nb * d * l * ns];
        let mut y = vec![T::zero(); uv.numel()];
        let mut h = vec![T::zero(); ns];
        for bi in 0..nb {
            for ch in 0..d {
                h.iter_mut().for_each(|v| *v = T::zero());
                let row = (bi * d + ch) * l;
                let arow = &av.data()[ch * ns..(ch + 1) * ns];
                for t in 0..l {
                    let uu = uv.data()[row + t];
                    let dt = dv.data()[row + t];
                    let mut acc = T::zero();
                    let base = (row + t) * ns;
                    for n in 0..ns {
                        let an = arow[n];
                        let bidx = (bi * ns + n) * l + t;
                        let z = dt * an;
                        let em1 = z.exp_m1();
                        let abar = em1 + T::one();
                        let coef = if z.abs() < T::lit(1e-8) { dt } else { em1 / an };
                        let hn = abar * h[n] + coef * bv.data()[bidx] * uu;
                        h[n] = hn;
                        abars[base + n] = abar;
                        coefs[base + n] = coef;
                        acc += cv.data()[bidx] * hn;
                    }
                    states[(row + t) * ns..(row + t + 1) * ns].copy_from_slice(&h);
                    y[row + t] = acc;
                }
            }
        }
        let rg = self.rg() || delta.rg() || a.rg() || b.rg() || c.rg();
        let op = Op::SelectiveScan {
            u: self.id,
            delta: delta.id,
            a: a.id,
            b: b.id,
            c: c.id,
            states,
            abar: abars,
            coef: coefs,
        };
        Ok(self.tape.push(Tensor4::from_vec(uv.shape(), y)?, op, rg))
    }

    pub fn sum(self) -> Var<'t, T> {
        let s = self.value().sum();
        self.tape.push(Tensor4::scalar(s), Op::Sum { x: self.id }, self.rg())
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.value().numel();
        self.sum().scale(T::one() / T::lit(n as f64))
    }

    /// Summed sigmoid focal loss of `self` (logits) against 0/1 `targets`.
    pub fn focal_loss_sum(self, targets: Rc<[T]>, alpha: T, gamma: T) -> Result<Var<'t, T>> {
        let x = self.value();
        if targets.len() != x.numel() {
            return Err(shape_err!("focal targets {} != logits {}", targets.len(), x.numel()));
        }
        let s = x.data().iter().zip(targets.iter()).map(|(&xv, &t)| focal_term(xv, t, alpha, gamma).0).sum();
        let op = Op::Focal { logits: self.id, targets, alpha, gamma };
        Ok(self.tape.push(Tensor4::scalar(s), op, self.rg()))
    }

    /// Summed `-ln IoU` over masked positions; `self` and `target` are
    /// `(B, 4, H, W)` left/top/right/bottom distances, `mask` is `(B, H, W)`.
    pub fn iou_loss_sum(self, target: Rc<[T]>, mask: Rc<[bool]>) -> Result<Var<'t, T>> {
        let p = self.value();
        let [n, four, h, w] = p.shape();
        if four != 4 || target.len() != p.numel() || mask.len() != n * h * w {
            return Err(shape_err!("iou loss: pred {:?}, target {}, mask {}", p.shape(), target.len(), mask.len()));
        }
        let hw = h * w;
        let mut s = T::zero();
        for bi in 0..n {
            for q in 0..hw {
                if mask[bi * hw + q] {
                    let at = |k: usize| (bi * 4 + k) * hw + q;
                    let pr = [p.data()[at(0)], p.data()[at(1)], p.data()[at(2)], p.data()[at(3)]];
                    let tg = [target[at(0)], target[at(1)], target[at(2)], target[at(3)]];
                    s += iou_loss_ltrb(pr, tg).0;
                }
            }
        }
        let op = Op::IouLoss { pred: self.id, target, mask };
        Ok(self.tape.push(Tensor4::scalar(s), op, self.rg()))
    }

    /// Summed binary cross-entropy of `self` (logits) against soft targets over masked entries.
    pub fn bce_logits_sum(self, target: Rc<[T]>, mask: Rc<[bool]>) -> Result<Var<'t, T>> {
        let x = self.value();
        if target.len() != x.numel() || mask.len() != x.numel() {
            return Err(shape_err!("bce: logits {}, target {}, mask {}", x.numel(), target.len(), mask.len()));
        }
        let s = (0..x.numel())
            .filter(|&i| mask[i])
            .map(|i| {
                let xv = x.data()[i];
                softplus(xv) - target[i] * xv
            })
            .sum();
        let op = Op::BceLogits { logits: self.id, target, mask };
        Ok(self.tape.push(Tensor4::scalar(s), op, self.rg()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor4::from_fn([1, 2, 3, 3], |[_, c, y, x]| (c + y * x) as f64 - 1.5));
        let g = tape.backward(x.sum()).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn half_square_gradient_is_input() {
        let tape = Tape::<f64>::new();
        let t = Tensor4::from_fn([1, 1, 2, 3], |[_, _, y, x]| y as f64 * 0.7 - x as f64);
        let x = tape.leaf(t.clone());
        let loss = x.mul(x).unwrap().sum().scale(0.5);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), t);
    }

    #[test]
    fn backward_rejects_multi_element_output() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor4::ones([1, 1, 2, 2]));
        let err = tape.backward(x.relu()).err().unwrap();
        assert!(matches!(err, Error::InvalidArgument(_)));
        assert!(tape.backward_with_seed(x.relu(), &Tensor4::ones([1, 1, 2, 2])).is_ok());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor4::ones([1, 1, 1, 2]));
        let k = tape.constant(Tensor4::full([1, 1, 1, 2], 3.0));
        let g = tape.backward(x.mul(k).unwrap().sum()).unwrap();
        assert!(g.get(k).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn broadcast_shapes_checked() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor4::ones([1, 2, 2, 2]));
        let bad = tape.leaf(Tensor4::ones([1, 3, 1, 1]));
        assert!(matches!(x.add(bad), Err(Error::Shape(_))));
    }

    #[test]
    fn activation_reference_values() {
        assert_eq!(Unary::Sigmoid.apply(0.0f64), 0.5);
        assert_eq!(Unary::Gelu.apply(0.0f64), 0.0);
        assert!((Unary::Softplus.apply(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(sigmoid(-30.0f64) > 0.0 && sigmoid(30.0f64) < 1.0);
        assert!(softplus(-30.0f64) > 0.0);
    }
}
