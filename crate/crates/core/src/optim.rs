//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            weight_decay: 1e-2,
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }
}

/// One AdamW update of a single tensor. `step` is the 1-based step count
/// used for bias correction.
pub fn adamw_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    m: &mut [T],
    v: &mut [T],
    step: u64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if cfg.lr.is_nan() || cfg.lr <= 0.0 {
        return Err(Error::invalid(format!("learning rate must be > 0, got {}", cfg.lr)));
    }
    if params.len() != grads.len() || m.len() != params.len() || v.len() != params.len() {
        return Err(Error::shape(
            "adamw",
            format!("{} params vs {} grads", params.len(), grads.len()),
        ));
    }
    if step == 0 {
        return Err(Error::invalid("adamw step count starts at 1"));
    }
    let (b1, b2) = cfg.betas;
    let bc1 = 1.0 - b1.powi(step as i32);
    let bc2 = 1.0 - b2.powi(step as i32);
    let decay = T::lit(1.0 - cfg.lr * cfg.weight_decay);
    let (b1, b2) = (T::lit(b1), T::lit(b2));
    let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
    let (bc1, bc2) = (T::lit(bc1), T::lit(bc2));
    for i in 0..params.len() {
        let g = grads[i];
        params[i] *= decay;
        m[i] = b1 * m[i] + (T::one() - b1) * g;
        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Optimizer state for every parameter in a store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, store: &ParamStore<T>) -> Self {
        let zeros = || store.ids().map(|id| vec![T::zero(); store.get(id).numel()]).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update. Parameters without a gradient are treated as
    /// having a zero gradient (they still decay).
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Vec<T>>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::shape(
                "adamw",
                format!("{} gradients for {} parameters", grads.len(), store.len()),
            ));
        }
        self.step += 1;
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let n = store.get(id).numel();
            let zero;
            let g = match &grads[i] {
                Some(g) => g.as_slice(),
                None => {
                    zero = vec![T::zero(); n];
                    &zero
                }
            };
            adamw_step(
                store.get_mut(id).data_mut(),
                g,
                &mut self.m[i],
                &mut self.v[i],
                self.step,
                &self.config,
            )?;
        }
        Ok(())
    }
}
