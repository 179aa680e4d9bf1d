//! Central finite-difference check of tape gradients.
//!
//! The numeric side never calls [`Tape::backward`]: every perturbed
//! evaluation runs on a fresh tape whose inputs are constants.

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Result};
use crate::nn::{Binder, ParamStore};
use crate::tensor::Tensor4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Largest numeric gradient magnitude seen.
    pub scale: f64,
    pub checked: usize,
    /// Input holding the entry with the largest relative error.
    pub worst_input: usize,
}

/// Denominator floor relative to the largest gradient entry, so entries that
/// are zero up to truncation error do not dominate the relative error.
pub const REL_FLOOR: f64 = 1e-3;

/// Compares tape gradients of `f` at `inputs` against the fourth-order
/// central difference `(8(f₊₁ − f₋₁) − (f₊₂ − f₋₂)) / 12h` with `h = step`.
pub fn check_gradients<F>(inputs: &[Tensor4<f64>], step: f64, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    if step <= 0.0 {
        return Err(invalid!("finite-difference step must be positive"));
    }
    let analytic: Vec<Tensor4<f64>> = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let grads = tape.backward(out)?;
        vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    };
    let eval = |args: &[Tensor4<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = args.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let v = out.value();
        if v.numel() != 1 {
            return Err(invalid!("gradient check needs a scalar output"));
        }
        Ok(v.data()[0])
    };
    let mut numeric = Vec::with_capacity(inputs.len());
    let mut args: Vec<Tensor4<f64>> = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].numel()];
        for (j, gj) in g.iter_mut().enumerate() {
            let orig = inputs[i].data()[j];
            let mut at = |k: f64| -> Result<f64> {
                args[i].data_mut()[j] = orig + k * step;
                eval(&args)
            };
            let (p1, m1, p2, m2) = (at(1.0)?, at(-1.0)?, at(2.0)?, at(-2.0)?);
            args[i].data_mut()[j] = orig;
            *gj = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step);
        }
        numeric.push(g);
    }
    let scale = numeric.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (REL_FLOOR * scale).max(1e-12);
    let (mut max_rel, mut max_abs, mut checked, mut worst_input) = (0.0f64, 0.0f64, 0, 0);
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        for (&av, &nv) in a.data().iter().zip(n) {
            let abs = (av - nv).abs();
            max_abs = max_abs.max(abs);
            let rel = abs / av.abs().max(nv.abs()).max(floor);
            if rel > max_rel {
                (max_rel, worst_input) = (rel, i);
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport { max_rel_err: max_rel, max_abs_err: max_abs, scale, checked, worst_input })
}

/// [`check_gradients`] over `inputs` and every parameter of `store`. `f`
/// receives a binder whose parameters are the perturbed copies.
pub fn check_block_gradients<F>(
    store: &ParamStore<f64>,
    inputs: &[Tensor4<f64>],
    step: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&Binder<'t, '_, f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let names: Vec<String> = store.names().map(String::from).collect();
    let mut all = inputs.to_vec();
    all.extend(store.iter().map(|(_, t)| t.clone()));
    let k = inputs.len();
    check_gradients(&all, step, |tape, vars| {
        let bind = Binder::new(tape, store);
        for (n, &v) in names.iter().zip(&vars[k..]) {
            bind.bind_var(n, v);
        }
        f(&bind, &vars[..k])
    })
}
