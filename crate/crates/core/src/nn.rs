//! Named parameters, their binding onto a tape, initializers, and Adam.

use std::cell::RefCell;

use indexmap::IndexMap;
use rand::Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{invalid, shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor4};

/// Ordered map of parameter name to tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: IndexMap<String, Tensor4<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor4<T>) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor4<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor4<T>> {
        self.params.get_mut(name)
    }

    /// Overwrites an existing parameter, keeping its shape.
    pub fn set(&mut self, name: &str, t: Tensor4<T>) -> Result<()> {
        let slot = self.params.get_mut(name).ok_or_else(|| invalid!("no parameter named `{}`", name))?;
        if slot.shape() != t.shape() {
            return Err(shape_err!("parameter `{}` has shape {:?}, got {:?}", name, slot.shape(), t.shape()));
        }
        *slot = t;
        Ok(())
    }

    pub fn fill(&mut self, name: &str, v: T) -> Result<()> {
        let slot = self.params.get_mut(name).ok_or_else(|| invalid!("no parameter named `{}`", name))?;
        slot.data_mut().iter_mut().for_each(|x| *x = v);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor4<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count.
    pub fn num_elements(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    pub fn num_elements_with_prefix(&self, prefix: &str) -> usize {
        self.params.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }
}

/// Lazily registers parameters from a [`ParamStore`] as tape leaves.
pub struct Binder<'t, 's, T> {
    tape: &'t Tape<T>,
    store: &'s ParamStore<T>,
    bound: RefCell<IndexMap<String, Var<'t, T>>>,
    trainable: bool,
}

impl<'t, 's, T: Scalar> Binder<'t, 's, T> {
    pub fn new(tape: &'t Tape<T>, store: &'s ParamStore<T>) -> Self {
        Self { tape, store, bound: RefCell::new(IndexMap::new()), trainable: true }
    }

    /// Binder whose parameters are tape constants (inference only).
    pub fn frozen(tape: &'t Tape<T>, store: &'s ParamStore<T>) -> Self {
        Self { trainable: false, ..Self::new(tape, store) }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn param(&self, name: &str) -> Result<Var<'t, T>> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(*v);
        }
        let t = self.store.get(name).ok_or_else(|| invalid!("missing parameter `{}`", name))?.clone();
        let v = if self.trainable { self.tape.leaf(t) } else { self.tape.constant(t) };
        self.bound.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Uses `var` for `name` instead of a fresh tensor from the store.
    pub fn bind_var(&self, name: &str, var: Var<'t, T>) {
        self.bound.borrow_mut().insert(name.to_string(), var);
    }

    /// Names bound so far, in first-use order.
    pub fn bound_names(&self) -> Vec<String> {
        self.bound.borrow().keys().cloned().collect()
    }

    /// Collects the gradient of every bound parameter.
    pub fn collect(&self, grads: &Gradients<T>) -> GradStore<T> {
        let bound = self.bound.borrow();
        GradStore { grads: bound.iter().map(|(k, v)| (k.clone(), grads.get_or_zeros(*v))).collect() }
    }
}

/// Parameter gradients keyed by name.
#[derive(Clone, Debug, Default)]
pub struct GradStore<T> {
    grads: IndexMap<String, Tensor4<T>>,
}

impl<T: Scalar> GradStore<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor4<T>> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor4<T>)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Adds `other` in, entry by entry.
    pub fn accumulate(&mut self, other: &GradStore<T>) {
        for (k, g) in &other.grads {
            match self.grads.get_mut(k) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += *b;
                    }
                }
                None => {
                    self.grads.insert(k.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, c: T) {
        for g in self.grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(|g| g.is_finite())
    }

    pub fn global_norm(&self) -> T {
        self.grads.values().flat_map(|g| g.data().iter()).map(|&v| v * v).sum::<T>().sqrt()
    }
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn fan_in_uniform<T: Scalar>(shape: Shape4, fan_in: usize, rng: &mut impl Rng) -> Tensor4<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor4::uniform(shape, -bound, bound, rng)
}

/// Convolution weight `[out, in/groups, k, k]` with fan-in scaling.
pub fn conv_weight<T: Scalar>(out: usize, in_per_group: usize, k: usize, rng: &mut impl Rng) -> Tensor4<T> {
    fan_in_uniform([out, in_per_group, k, k], in_per_group * k * k, rng)
}

/// Per-channel vector stored as `(1, C, 1, 1)`.
pub fn channel_vec<T: Scalar>(c: usize, v: f64) -> Tensor4<T> {
    Tensor4::full([1, c, 1, 1], T::lit(v))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-5 }
    }
}

/// Adam with coupled L2 weight decay.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    moments: IndexMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, moments: IndexMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &GradStore<T>, lr: f64) -> Result<()> {
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
        let (lr, eps, wd) = (T::lit(lr), T::lit(c.eps), T::lit(c.weight_decay));
        let one = T::one();
        for (name, g) in grads.iter() {
            let p = store.get_mut(name).ok_or_else(|| invalid!("gradient for unknown parameter `{}`", name))?;
            if p.shape() != g.shape() {
                return Err(shape_err!("gradient shape {:?} != parameter `{}` {:?}", g.shape(), name, p.shape()));
            }
            let n = p.numel();
            let (m, v) =
                self.moments.entry(name.to_string()).or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            for i in 0..n {
                let gi = g.data()[i] + wd * p.data()[i];
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p.data_mut()[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Cosine decay from `base` to zero over `total` steps.
pub fn cosine_lr(base: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total) as f64) / total as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor4::from_vec([1, 1, 1, 2], vec![3.0, -2.0]).unwrap());
        let mut opt = Adam::new(AdamConfig { weight_decay: 0.0, ..Default::default() });
        for _ in 0..2000 {
            let tape = Tape::new();
            let bind = Binder::new(&tape, &store);
            let w = bind.param("w").unwrap();
            let loss = w.mul(w).unwrap().sum();
            let g = bind.collect(&tape.backward(loss).unwrap());
            opt.step(&mut store, &g, 0.05).unwrap();
        }
        assert!(store.get("w").unwrap().max_abs() < 1e-2);
    }

    #[test]
    fn binder_reuses_leaf_and_reports_missing() {
        let mut store = ParamStore::<f64>::new();
        store.insert("a", Tensor4::ones([1, 1, 1, 1]));
        let tape = Tape::new();
        let bind = Binder::new(&tape, &store);
        assert_eq!(bind.param("a").unwrap().id(), bind.param("a").unwrap().id());
        assert!(bind.param("b").is_err());
    }

    #[test]
    fn fan_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w: Tensor4<f64> = conv_weight(4, 9, 3, &mut rng);
        assert!(w.max_abs() <= 1.0 / 9.0);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0, 100), 1e-3);
        assert!(cosine_lr(1e-3, 100, 100).abs() < 1e-18);
    }
}
