use super::{Gradients, ParamKind, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Adam hyperparameters. `weight_decay` is an L2 coefficient added to the
/// gradient before the moment updates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 10f64.powf(-4.5) }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0;
        if !ok || !(self.lr >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AdamState<T = f32> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Option<Tensor<T>>>,
    second: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState { config, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, idx: usize) -> Option<&Tensor<T>> {
        self.first.get(idx).and_then(|m| m.as_ref())
    }

    /// Apply one Adam update to every trainable parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        for (id, g) in grads.params() {
            let p = store.get(id);
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient {:?} for parameter {} of shape {:?}",
                    g.shape(),
                    store.entry(id).name,
                    p.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", store.entry(id).name)));
            }
        }
        if self.first.len() < store.len() {
            self.first.resize(store.len(), None);
            self.second.resize(store.len(), None);
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as f64;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (wd, lr, eps) = (T::lit(c.weight_decay), T::lit(c.lr), T::lit(c.eps));
        let (bc1, bc2) = (T::lit(bc1), T::lit(bc2));
        for (id, g) in grads.params() {
            if store.entry(id).kind != ParamKind::Trainable {
                continue;
            }
            let shape = g.shape().to_vec();
            let m = self.first[id.0].get_or_insert_with(|| Tensor::zeros(&shape));
            let v = self.second[id.0].get_or_insert_with(|| Tensor::zeros(&shape));
            let p = store.get_mut(id);
            let pd = p.data_mut();
            for (((pv, &gv), mv), vv) in pd
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                let gt = gv + wd * *pv;
                *mv = b1 * *mv + (T::one() - b1) * gt;
                *vv = b2 * *vv + (T::one() - b2) * gt * gt;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv = *pv - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
