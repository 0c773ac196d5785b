use serde::{Deserialize, Serialize};

use super::{Gradients, NdArray, ParamSet, Real, TensorError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// AdamW with bias correction and decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    step: u64,
    first: Vec<Option<NdArray<T>>>,
    second: Vec<Option<NdArray<T>>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter that has a gradient.
    /// Refuses the whole step when any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &Gradients<T>) -> Result<(), TensorError> {
        for (id, g) in grads.params() {
            if !g.is_finite() {
                return Err(TensorError::NonFinite(format!("gradient of `{}`", params.name(*id))));
            }
            if g.shape() != params.get(*id).shape() {
                return Err(TensorError::shape(
                    "adamw_step",
                    format!("gradient {:?} for `{}` {:?}", g.shape(), params.name(*id), params.get(*id).shape()),
                ));
            }
        }
        if self.first.len() < params.len() {
            self.first.resize(params.len(), None);
            self.second.resize(params.len(), None);
        }
        self.step += 1;
        let c = &self.cfg;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::of(1.0 - c.beta2.powi(self.step as i32));
        let lr = T::of(c.lr);
        let decay = T::of(c.lr * c.weight_decay);
        let eps = T::of(c.eps);
        for (&id, g) in grads.params() {
            if !params.trainable(id) {
                continue;
            }
            let i = id.index();
            let m = self.first[i].get_or_insert_with(|| NdArray::zeros(g.shape()));
            let v = self.second[i].get_or_insert_with(|| NdArray::zeros(g.shape()));
            let w = params.get_mut(id);
            for (((wi, mi), vi), &gi) in w.iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *wi = *wi - decay * *wi - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    fn one_step(w0: f64, grad_scale: f64, cfg: AdamWConfig) -> f64 {
        let mut ps = ParamSet::<f64>::new();
        let id = ps.insert("w", NdArray::scalar(w0), true).unwrap();
        let grads = {
            let mut g = Graph::with_params(&ps);
            let w = g.param(id);
            let l = g.scale(w, grad_scale);
            g.backward(l).unwrap()
        };
        let mut opt = AdamW::new(cfg);
        opt.step(&mut ps, &grads).unwrap();
        ps.get(id).item() - w0
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamWConfig { lr: 1e-3, eps: 1e-12, ..Default::default() };
        let dw = one_step(0.5, 1.0, cfg);
        assert!((dw + 1e-3).abs() < 1e-12, "{dw}");
    }

    #[test]
    fn zero_gradient_isolates_decay() {
        let cfg = AdamWConfig { lr: 1e-2, weight_decay: 0.1, ..Default::default() };
        let dw = one_step(2.0, 0.0, cfg);
        assert!((dw - (-1e-2 * 0.1 * 2.0)).abs() < 1e-15, "{dw}");
    }

    #[test]
    fn no_decay_is_plain_adam() {
        let cfg = AdamWConfig { lr: 1e-3, ..Default::default() };
        let a = one_step(0.3, 0.7, cfg.clone());
        // plain Adam, first step: m̂ = g, v̂ = g²
        let plain = -1e-3 * 0.7 / (0.7f64 + 1e-8);
        assert!((a - plain).abs() < 1e-15);
    }

    #[test]
    fn refuses_non_finite_gradient() {
        let mut ps = ParamSet::<f64>::new();
        let id = ps.insert("w", NdArray::scalar(1.0), true).unwrap();
        let grads = {
            let mut g = Graph::with_params(&ps);
            let w = g.param(id);
            let l = g.scale(w, f64::INFINITY);
            g.backward(l).unwrap()
        };
        let mut opt = AdamW::new(AdamWConfig::default());
        assert!(opt.step(&mut ps, &grads).is_err());
        assert_eq!(ps.get(id).item(), 1.0);
        assert_eq!(opt.steps(), 0);
    }
}
