use std::collections::BTreeMap;

use super::network::{NetworkState, ParamGrads};
use crate::error::{Error, Result};
use crate::tensor::Real;

/// SGD with momentum and L2 weight decay:
/// `v ← μ·v − lr·(g + λ·w)`, `w ← w + v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T> {
    pub learning_rate: T,
    pub momentum: T,
    pub weight_decay: T,
    velocity: BTreeMap<String, Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(learning_rate: T, momentum: T, weight_decay: T) -> Result<Self> {
        if !(learning_rate >= T::zero()) || !(momentum >= T::zero()) || !(weight_decay >= T::zero()) {
            return Err(Error::InvalidArgument(format!(
                "sgd coefficients must be non-negative: lr={learning_rate} momentum={momentum} decay={weight_decay}"
            )));
        }
        Ok(Sgd {
            learning_rate,
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        })
    }

    pub fn velocity(&self, name: &str) -> Option<&[T]> {
        self.velocity.get(name).map(Vec::as_slice)
    }

    pub fn velocities(&self) -> &BTreeMap<String, Vec<T>> {
        &self.velocity
    }

    pub fn set_velocity(&mut self, name: String, v: Vec<T>) {
        self.velocity.insert(name, v);
    }

    /// Updates every unfrozen parameter; each must have a gradient of
    /// matching shape. Frozen parameters are left untouched.
    pub fn step(&mut self, state: &mut NetworkState<T>, grads: &ParamGrads<T>) -> Result<()> {
        for p in state.params.iter().filter(|p| !p.frozen) {
            let g = grads
                .get(&p.name)
                .ok_or_else(|| Error::Missing(format!("gradient for trainable parameter {}", p.name)))?;
            if g.shape() != p.value.shape() {
                return Err(Error::shape(
                    "sgd_step",
                    format!("gradient {:?} for {} of shape {:?}", g.shape(), p.name, p.value.shape()),
                ));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", p.name)));
            }
        }

        let (lr, mu, decay) = (self.learning_rate, self.momentum, self.weight_decay);
        for p in state.params.iter_mut().filter(|p| !p.frozen) {
            let g = &grads[&p.name];
            let v = self
                .velocity
                .entry(p.name.clone())
                .or_insert_with(|| vec![T::zero(); g.numel()]);
            let w = p.value.data_mut();
            for ((wi, vi), &gi) in w.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *vi = mu * *vi - lr * (gi + decay * *wi);
                *wi += *vi;
            }
            if !p.value.all_finite() {
                return Err(Error::NonFinite(format!("parameter {} after sgd step", p.name)));
            }
        }
        Ok(())
    }
}
