use crate::nn::Parameters;
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// AdamW with bias-corrected moments and decoupled weight decay, applied
/// to every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub(crate) keys: Vec<String>,
    pub(crate) m: Vec<Tensor<T>>,
    pub(crate) v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new<P: Parameters<T>>(params: &P, config: AdamWConfig) -> Self {
        let named = params.named();
        Self {
            config,
            step: 0,
            keys: named.iter().map(|(k, _)| k.clone()).collect(),
            m: named
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape()))
                .collect(),
            v: named
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape()))
                .collect(),
        }
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn moments(&self, i: usize) -> (&Tensor<T>, &Tensor<T>) {
        (&self.m[i], &self.v[i])
    }

    /// One update at learning rate `lr`.
    pub fn update<P: Parameters<T>>(&mut self, params: &mut P, grads: &P, lr: f64) -> Result<()> {
        let grads = grads.named();
        if grads.len() != self.keys.len() || grads.iter().zip(&self.keys).any(|((k, _), s)| k != s)
        {
            return Err(Error::contract(
                "adamw_step",
                "gradient keys do not match optimizer state",
            ));
        }
        let mut mismatch = None;
        let mut i = 0;
        params.visit_mut("", &mut |k, p| {
            if mismatch.is_some() {
                return;
            }
            if i >= self.keys.len() || k != self.keys[i] || p.shape() != grads[i].1.shape() {
                mismatch = Some(k);
            }
            i += 1;
        });
        if let Some(k) = mismatch.or_else(|| (i != self.keys.len()).then(String::new)) {
            return Err(Error::contract(
                "adamw_step",
                format!("parameter `{k}` does not match optimizer state"),
            ));
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let (b1, b2) = (T::c(c.beta1), T::c(c.beta2));
        let (one_b1, one_b2) = (T::c(1.0 - c.beta1), T::c(1.0 - c.beta2));
        let bc1 = T::c(1.0 - c.beta1.powi(t));
        let bc2 = T::c(1.0 - c.beta2.powi(t));
        let lr_t = T::c(lr);
        let decay = T::c(lr * c.weight_decay);
        let eps = T::c(c.eps);
        let mut i = 0;
        let (m, v) = (&mut self.m, &mut self.v);
        params.visit_mut("", &mut |_, p| {
            let g = grads[i].1.data();
            let (mi, vi) = (m[i].data_mut(), v[i].data_mut());
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                mi[j] = b1 * mi[j] + one_b1 * g[j];
                vi[j] = b2 * vi[j] + one_b2 * g[j] * g[j];
                let m_hat = mi[j] / bc1;
                let v_hat = vi[j] / bc2;
                *w = *w - decay * *w - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
            i += 1;
        });
        Ok(())
    }
}
