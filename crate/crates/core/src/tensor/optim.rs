//! Adam and exponential-moving-average updates.

use super::{ParamSet, Scalar, Tensor};
use crate::{Error, Result};

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam with per-parameter first/second moment buffers.
pub struct Adam<S: Scalar> {
    cfg: AdamConfig,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
    step: u64,
}

impl<S: Scalar> Adam<S> {
    pub fn new(params: &ParamSet<S>, cfg: AdamConfig) -> Self {
        let m = (0..params.len()).map(|i| Tensor::zeros(params.tensor_at(i).shape())).collect();
        let v = (0..params.len()).map(|i| Tensor::zeros(params.tensor_at(i).shape())).collect();
        Self { cfg, m, v, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update; `grads[i]` pairs with parameter `i`, `None` meaning a
    /// zero gradient.
    pub fn step(&mut self, params: &mut ParamSet<S>, grads: &[Option<Tensor<S>>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                detail: format!("{} gradients for {} parameters", grads.len(), params.len()),
            });
        }
        self.step += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.step as i32);
        let b1 = S::from_f64(self.cfg.beta1);
        let b2 = S::from_f64(self.cfg.beta2);
        let one_m_b1 = S::from_f64(1.0 - self.cfg.beta1);
        let one_m_b2 = S::from_f64(1.0 - self.cfg.beta2);
        let lr = S::from_f64(self.cfg.lr);
        let eps = S::from_f64(self.cfg.eps);
        let inv_bc1 = S::from_f64(1.0 / bc1);
        let inv_bc2 = S::from_f64(1.0 / bc2);
        for i in 0..params.len() {
            if let Some(g) = grads[i].as_ref() {
                if g.shape() != params.tensor_at(i).shape() {
                    return Err(Error::ShapeMismatch {
                        op: "adam_step",
                        detail: format!(
                            "{}: gradient {:?} vs parameter {:?}",
                            params.name_at(i),
                            g.shape(),
                            params.tensor_at(i).shape()
                        ),
                    });
                }
            }
            let md = self.m[i].data_mut();
            let vd = self.v[i].data_mut();
            let pd = params.tensor_at_mut(i).data_mut();
            for j in 0..pd.len() {
                let gj = match grads[i].as_ref() {
                    Some(g) => g.data()[j],
                    None => S::zero(),
                };
                md[j] = b1 * md[j] + one_m_b1 * gj;
                vd[j] = b2 * vd[j] + one_m_b2 * gj * gj;
                let mhat = md[j] * inv_bc1;
                let vhat = vd[j] * inv_bc2;
                pd[j] = pd[j] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// `shadow <- decay * shadow + (1 - decay) * params`, elementwise.
#[allow(clippy::needless_range_loop)]
pub fn ema_update<S: Scalar>(
    shadow: &mut ParamSet<S>,
    params: &ParamSet<S>,
    decay: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::DecayOutOfRange { decay });
    }
    if shadow.len() != params.len() {
        return Err(Error::ShapeMismatch {
            op: "ema_update",
            detail: format!("{} shadow vs {} params", shadow.len(), params.len()),
        });
    }
    let d = S::from_f64(decay);
    let one_m_d = S::from_f64(1.0 - decay);
    for i in 0..params.len() {
        let src = params.tensor_at(i);
        if shadow.tensor_at(i).shape() != src.shape() {
            return Err(Error::ShapeMismatch {
                op: "ema_update",
                detail: format!(
                    "{}: {:?} vs {:?}",
                    params.name_at(i),
                    shadow.tensor_at(i).shape(),
                    src.shape()
                ),
            });
        }
        let dst = shadow.tensor_at_mut(i).data_mut();
        for (s, &p) in dst.iter_mut().zip(src.data()) {
            *s = d * *s + one_m_d * p;
        }
    }
    Ok(())
}
