use std::collections::BTreeMap;

use super::{Elem, ParamId, Tensor};
use crate::error::{Error, Result};

/// A named trainable tensor and its pending gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

/// Ordered parameter set of a model; `ParamId(i)` indexes position `i`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Elem> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            grad: None,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Adds gradients from a backward pass to the pending gradients.
    pub fn accumulate_grads(&mut self, grads: BTreeMap<ParamId, Tensor<T>>) {
        for (id, g) in grads {
            let p = &mut self.params[id.0];
            match p.grad.as_mut() {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += *b;
                    }
                }
                None => p.grad = Some(g),
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn total_elements(&self, ids: impl IntoIterator<Item = ParamId>) -> usize {
        ids.into_iter().map(|id| self.params[id.0].value.len()).sum()
    }
}

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v ← μ·v + g + λ·θ`, `θ ← θ − η·v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<ParamId, Vec<T>>,
}

impl<T: Elem> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    pub fn reset(&mut self) {
        self.velocity.clear();
    }

    /// Updates the listed parameters in place and clears their gradients.
    pub fn step(&mut self, store: &mut ParamStore<T>, ids: &[ParamId], lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Optim(format!("learning rate must be positive, got {lr}")));
        }
        if let Some(missing) = ids.iter().find(|id| store.get(**id).grad.is_none()) {
            return Err(Error::Optim(format!(
                "parameter `{}` has no gradient",
                store.get(*missing).name
            )));
        }
        let (mu, wd, eta) = (T::of(self.momentum), T::of(self.weight_decay), T::of(lr));
        for &id in ids {
            let p = store.get_mut(id);
            let grad = p.grad.take().expect("checked above");
            let v = self.velocity.entry(id).or_insert_with(|| vec![T::zero(); grad.len()]);
            for ((theta, g), vel) in p.value.data_mut().iter_mut().zip(grad.data()).zip(v.iter_mut()) {
                *vel = mu * *vel + *g + wd * *theta;
                *theta -= eta * *vel;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(value: f64, grad: f64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.push("w", Tensor::scalar(value));
        s.get_mut(id).grad = Some(Tensor::scalar(grad));
        (s, id)
    }

    #[test]
    fn plain_step_subtracts_scaled_gradient() {
        let (mut s, id) = store_with(2.0, 0.5);
        Sgd::new(0.0, 0.0).step(&mut s, &[id], 0.1).unwrap();
        assert!((s.get(id).value.item() - 1.95).abs() < 1e-15);
        assert!(s.get(id).grad.is_none());
    }

    #[test]
    fn weight_decay_only() {
        let (mut s, id) = store_with(1.0, 0.0);
        Sgd::new(0.0, 0.0002).step(&mut s, &[id], 0.05).unwrap();
        assert!((s.get(id).value.item() - 0.99999).abs() < 1e-12);
    }

    #[test]
    fn momentum_unrolls_to_one_point_nine() {
        let (g, lr) = (0.3, 0.01);
        let (mut s, id) = store_with(0.0, g);
        let mut opt = Sgd::new(0.9, 0.0);
        opt.step(&mut s, &[id], lr).unwrap();
        s.get_mut(id).grad = Some(Tensor::scalar(g));
        opt.step(&mut s, &[id], lr).unwrap();
        assert!((s.get(id).value.item() - (-lr * g * 2.9)).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut s = ParamStore::<f64>::new();
        let id = s.push("w", Tensor::scalar(1.0));
        assert!(matches!(
            Sgd::new(0.9, 0.0).step(&mut s, &[id], 0.1),
            Err(Error::Optim(_))
        ));
    }
}
