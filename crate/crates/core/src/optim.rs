//! Adam with the inverse-square-root warmup schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    /// Multiplier on the schedule below.
    pub lr_scale: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup: u64,
    pub d_model: usize,
}

impl AdamConfig {
    pub fn new(d_model: usize) -> Self {
        AdamConfig {
            lr_scale: 1.0,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            warmup: 400,
            d_model,
        }
    }

    /// `scale · d^-0.5 · min(s^-0.5, s · warmup^-1.5)` for 1-based step `s`.
    pub fn lr(&self, step: u64) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup.max(1) as f64;
        self.lr_scale * (self.d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    /// Updates applied so far.
    pub step: u64,
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
}

impl<T: Float> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros = || {
            let mut s = ParamStore::new();
            for (k, t) in params.iter() {
                s.insert(k, Tensor::zeros(t.shape().to_vec())).expect("names are unique");
            }
            s
        };
        Adam {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update; returns the learning rate used.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>) -> Result<f64> {
        self.step += 1;
        let t = self.step as f64;
        let lr = self.config.lr(self.step);
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let c1 = T::of(1.0 - b1.powf(t));
        let c2 = T::of(1.0 - b2.powf(t));
        let (tb1, tb2, eps, tlr) = (T::of(b1), T::of(b2), T::of(self.config.eps), T::of(lr));
        for (name, p) in params.iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Config(format!("no gradient for '{name}'")))?;
            let m = self.m.get_mut(name)?;
            let v = self.v.get_mut(name)?;
            if g.shape() != p.shape() {
                return Err(Error::shape("adam", p.shape(), g.shape()));
            }
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (k, &gk) in g.data().iter().enumerate() {
                md[k] = tb1 * md[k] + (T::one() - tb1) * gk;
                vd[k] = tb2 * vd[k] + (T::one() - tb2) * gk * gk;
                let mhat = md[k] / c1;
                let vhat = vd[k] / c2;
                pd[k] -= tlr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(lr)
    }
}
