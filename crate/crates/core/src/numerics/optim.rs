//! Adam and AdamW.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Gradients, ParamId, ParamStore, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Weight decay, if any, is added to the gradient (L2 penalty).
    Adam,
    /// Weight decay is applied directly to the parameters, decoupled from the moments.
    AdamW,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr,
            weight_decay: 0.0,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            weight_decay,
            ..Self::adam(lr)
        }
    }
}

/// Moment accumulators for a fixed set of parameters.
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    config: OptimizerConfig,
    ids: Vec<ParamId>,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(config: OptimizerConfig, store: &ParamStore<T>, ids: Vec<ParamId>) -> Self {
        let first = ids.iter().map(|&id| Tensor::zeros(store.get(id).shape())).collect();
        let second = ids.iter().map(|&id| Tensor::zeros(store.get(id).shape())).collect();
        Self {
            config,
            ids,
            first,
            second,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    /// Applies one update from tape gradients; untouched parameters see a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        let gs: Vec<Tensor<T>> = self.ids.iter().map(|&id| grads.param_or_zero(id, store)).collect();
        self.step_with(store, &gs)
    }

    /// Applies one update with explicit gradients aligned to [`Self::ids`].
    pub fn step_with(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != self.ids.len() {
            return Err(Error::shape(
                "optimizer_step",
                format!("{} gradients for {} parameters", grads.len(), self.ids.len()),
            ));
        }
        for (i, (&id, g)) in self.ids.iter().zip(grads).enumerate() {
            let p = store.get(id);
            if p.shape() != g.shape() || self.first[i].shape() != p.shape() {
                return Err(Error::shape(
                    "optimizer_step",
                    format!(
                        "{}: parameter {:?}, gradient {:?}",
                        store.name(id),
                        p.shape(),
                        g.shape()
                    ),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", store.name(id))));
            }
        }

        self.step += 1;
        let c = &self.config;
        let lr = T::lit(c.lr);
        let wd = T::lit(c.weight_decay);
        let b1 = T::lit(c.beta1);
        let b2 = T::lit(c.beta2);
        let eps = T::lit(c.eps);
        let t = i32::try_from(self.step).unwrap_or(i32::MAX);
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);

        for (i, (&id, g)) in self.ids.iter().zip(grads).enumerate() {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                let mut gj = g.data()[j];
                if c.kind == OptimizerKind::Adam {
                    gj += wd * p[j];
                }
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                if c.kind == OptimizerKind::AdamW {
                    p[j] -= lr * wd * p[j];
                }
                p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
