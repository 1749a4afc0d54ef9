//! AdamW: Adam with weight decay decoupled from the adaptive update.

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
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
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Moment buffers and step count for one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    step: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &ParamStore<T>) -> Result<Self> {
        if config.lr.is_nan() || config.lr <= 0.0 {
            return Err(Error::InvalidLearningRate(config.lr));
        }
        let zeros = || {
            params
                .iter()
                .map(|(_, _, t)| vec![T::zero(); t.numel()])
                .collect::<Vec<_>>()
        };
        Ok(Self {
            config,
            first: zeros(),
            second: zeros(),
            step: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter that has a gradient. Parameters that
    /// did not take part in the loss are left untouched, decay included.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        let c = self.config;
        if c.lr.is_nan() || c.lr <= 0.0 {
            return Err(Error::InvalidLearningRate(c.lr));
        }
        if params.len() != self.first.len() {
            return Err(Error::StateMismatch(format!(
                "{} parameters, state for {}",
                params.len(),
                self.first.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let (one_b1, one_b2) = (T::from_f64_lossy(1.0 - c.beta1), T::from_f64_lossy(1.0 - c.beta2));
        let decay = T::from_f64_lossy(1.0 - c.lr * c.weight_decay);
        let step_size = T::from_f64_lossy(c.lr / bc1);
        let bc2_sqrt = T::from_f64_lossy(bc2.sqrt());
        let eps = T::from_f64_lossy(c.eps);

        for id in params.ids().collect::<Vec<_>>() {
            let Some(g) = grads.param(id) else { continue };
            let i = id.index();
            let theta = params.get_mut(id);
            if g.numel() != theta.numel() || self.first[i].len() != theta.numel() {
                return Err(Error::StateMismatch(format!(
                    "parameter {i}: {} values, gradient {}, state {}",
                    theta.numel(),
                    g.numel(),
                    self.first[i].len()
                )));
            }
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (((p, &g), m), v) in theta
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *p *= decay;
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let denom = v.sqrt() / bc2_sqrt + eps;
                *p -= step_size * *m / denom;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Graph, Tensor};

    fn single(value: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(vec![1], vec![value]).unwrap());
        s
    }

    fn grads_for(store: &ParamStore<f64>, coef: f64) -> crate::Gradients<f64> {
        // loss = coef * w, so dloss/dw = coef
        let mut g = Graph::new();
        let id = store.ids().next().unwrap();
        let w = g.param(store, id);
        let y = g.scale(w, coef);
        let l = g.mean(y);
        g.backward(l).unwrap()
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut s = single(1.5);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::with_lr(0.1)
        };
        let mut opt = AdamW::new(cfg, &s).unwrap();
        let grads = grads_for(&s, 0.0);
        opt.step(&mut s, &grads).unwrap();
        assert_eq!(s.get(s.ids().next().unwrap()).data(), &[1.5]);
    }

    #[test]
    fn first_step_matches_hand_computed_adam() {
        let mut s = single(1.0);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::with_lr(0.1)
        };
        let mut opt = AdamW::new(cfg, &s).unwrap();
        let grads = grads_for(&s, 0.5);
        opt.step(&mut s, &grads).unwrap();
        // m = 0.1 * 0.5 = 0.05, m_hat = 0.05 / 0.1 = 0.5
        // v = 0.001 * 0.25 = 0.00025, v_hat = 0.00025 / 0.001 = 0.25
        let expected = 1.0 - 0.1 * 0.5 / (0.25f64.sqrt() + 1e-8);
        let got = s.get(s.ids().next().unwrap()).data()[0];
        assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
    }

    #[test]
    fn decay_with_zero_gradient_shrinks_by_lr_times_wd() {
        let mut s = single(2.0);
        let cfg = AdamWConfig {
            weight_decay: 0.5,
            ..AdamWConfig::with_lr(0.1)
        };
        let mut opt = AdamW::new(cfg, &s).unwrap();
        let grads = grads_for(&s, 0.0);
        opt.step(&mut s, &grads).unwrap();
        let got = s.get(s.ids().next().unwrap()).data()[0];
        assert!((got - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn non_positive_lr_is_rejected() {
        let s = single(1.0);
        assert!(matches!(
            AdamW::new(AdamWConfig::with_lr(0.0), &s),
            Err(Error::InvalidLearningRate(_))
        ));
        assert!(AdamW::new(AdamWConfig::with_lr(-1e-3), &s).is_err());
    }
}
