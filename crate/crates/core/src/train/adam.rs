use crate::error::{Error, Result};
use crate::param::{ParamGroup, ParamStore};
use crate::tensor::{lit, Element, Tensor};

use super::plan::AdamConfig;

/// Adam moments for every parameter of one store.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub cfg: AdamConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Element> AdamState<T> {
    pub fn new(store: &ParamStore<T>, cfg: AdamConfig) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamState { cfg, m: zeros(), v: zeros(), step: 0 }
    }

    /// One bias-corrected update with per-group rates; zeroes all gradients afterwards.
    /// Frozen parameters are left alone.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr_main: f64, lr_att: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::invalid("optimizer state was built for a different parameter store"));
        }
        for p in store.iter().filter(|p| p.trainable) {
            if !p.grad.all_finite() {
                let bad = p.grad.data().iter().position(|g| !g.is_finite()).unwrap_or(0);
                return Err(Error::NonFinite(format!("gradient of {} at index {bad}", p.name)));
            }
        }
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let (b1t, b2t, eps) = (lit::<T>(b1), lit::<T>(b2), lit::<T>(self.cfg.eps));
        let (one_b1, one_b2) = (lit::<T>(1.0 - b1), lit::<T>(1.0 - b2));
        let inv_c2 = lit::<T>(1.0 / c2);
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let lr = match p.group {
                ParamGroup::Main => lr_main,
                ParamGroup::Att => lr_att,
            };
            let step = lit::<T>(lr / c1);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let (w, g) = (p.value.data_mut(), p.grad.data());
            for j in 0..w.len() {
                m[j] = b1t * m[j] + one_b1 * g[j];
                v[j] = b2t * v[j] + one_b2 * g[j] * g[j];
                w[j] -= step * m[j] / ((v[j] * inv_c2).sqrt() + eps);
            }
        }
        store.zero_grads();
        Ok(())
    }
}
