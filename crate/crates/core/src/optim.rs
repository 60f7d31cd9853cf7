//! Stochastic gradient descent with momentum and decoupled weight buffers.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;

/// SGD state for one [`ParamStore`]: one velocity buffer per weight.
///
/// A step computes `v = momentum * v + grad + wd * w` then `w = w - lr * v`
/// in `f64` and clears the gradient.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be > 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::invalid(format!("weight decay must be >= 0, got {weight_decay}")));
        }
        Ok(Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        })
    }

    pub fn velocity(&self, index: usize) -> Option<&[f64]> {
        self.velocity.get(index).and_then(|v| v.as_deref())
    }

    /// Update every weight that carries a gradient. Returns the names of
    /// trainable weights that were skipped because no gradient was present.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>) -> Result<Vec<String>> {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        let mut skipped = Vec::new();
        for (i, w) in store.weights_mut().iter_mut().enumerate() {
            let t = &mut w.tensor;
            let Some(grad) = t.grad().map(|g| g.iter().map(|v| v.widen()).collect::<Vec<f64>>()) else {
                if t.requires_grad() {
                    skipped.push(w.name.clone());
                }
                continue;
            };
            let vel = self.velocity[i].get_or_insert_with(|| vec![0.0; grad.len()]);
            if vel.len() != grad.len() {
                return Err(Error::shape(format!(
                    "velocity of '{}' has {} entries, weight has {}",
                    w.name,
                    vel.len(),
                    grad.len()
                )));
            }
            for ((x, v), g) in t.data_mut().iter_mut().zip(vel.iter_mut()).zip(grad) {
                let wx = x.widen();
                *v = self.momentum * *v + g + self.weight_decay * wx;
                *x = T::narrow(wx - self.lr * *v);
            }
            t.clear_grad();
        }
        Ok(skipped)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(w: f64, g: Option<f64>) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::from_f64(&[1], &[w]).unwrap()).unwrap();
        if let Some(g) = g {
            s.get_mut(id).tensor.accumulate_grad(&[g]).unwrap();
        }
        s
    }

    #[test]
    fn plain_step_subtracts_gradient() {
        let mut s = store_with(1.5, Some(0.25));
        Sgd::new(1.0, 0.0, 0.0).unwrap().step(&mut s).unwrap();
        assert_eq!(s.weights()[0].tensor.data()[0], 1.25);
        assert!(s.weights()[0].tensor.grad().is_none());
    }

    #[test]
    fn momentum_recurrence() {
        let mut s = store_with(0.0, Some(1.0));
        let mut opt = Sgd::new(1.0, 0.95, 0.0).unwrap();
        opt.step(&mut s).unwrap();
        s.weights_mut()[0].tensor.accumulate_grad(&[1.0]).unwrap();
        opt.step(&mut s).unwrap();
        assert!((s.weights()[0].tensor.data()[0] + 2.95).abs() < 1e-12);
    }

    #[test]
    fn decay_only() {
        let mut s = store_with(2.0, Some(0.0));
        Sgd::new(0.1, 0.0, 0.5).unwrap().step(&mut s).unwrap();
        assert!((s.weights()[0].tensor.data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn missing_grad_is_reported() {
        let mut s = store_with(1.0, None);
        let skipped = Sgd::new(0.1, 0.9, 0.0).unwrap().step(&mut s).unwrap();
        assert_eq!(skipped, vec!["w".to_string()]);
        assert_eq!(s.weights()[0].tensor.data()[0], 1.0);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(Sgd::new(0.0, 0.9, 0.0).is_err());
        assert!(Sgd::new(0.1, 1.0, 0.0).is_err());
        assert!(Sgd::new(0.1, 0.9, -1.0).is_err());
    }
}
