use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    /// Pretraining and finetuning defaults.
    pub fn pretrain() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }

    /// Padding adaptation: larger step, no decay.
    pub fn padding() -> Self {
        AdamWConfig {
            lr: 1e-2,
            weight_decay: 0.0,
            ..Self::pretrain()
        }
    }
}

/// Moment estimates for one parameter list.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimState {
    pub fn new(config: AdamWConfig, params: &[&Tensor]) -> Self {
        OptimState {
            config,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    /// One decoupled-weight-decay Adam update. `None` gradients leave the parameter untouched.
    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[Option<&Tensor>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            let Some(g) = g else { continue };
            if g.shape() != p.shape() {
                return Err(Error::Shape(format!(
                    "gradient {:?} for parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let pd = p.data_mut();
            let moments = m.data_mut().iter_mut().zip(v.data_mut().iter_mut());
            for ((x, &gi), (mi, vi)) in pd.iter_mut().zip(g.data()).zip(moments) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *x -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *x);
            }
            if !pd.iter().all(|x| x.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite parameter after step {}",
                    self.step
                )));
            }
        }
        Ok(())
    }
}
