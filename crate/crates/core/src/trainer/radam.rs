//! Rectified Adam.

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::diffcore::{ParamSet, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RadamConfig {
    pub betas: (f64, f64),
    pub eps: f64,
}

impl Default for RadamConfig {
    fn default() -> Self {
        Self { betas: (0.9, 0.999), eps: 1e-8 }
    }
}

/// Moment accumulators, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
    pub step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros: ParamSet<T> = params
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape().to_vec())))
            .collect();
        Self { m: zeros.clone(), v: zeros, step: 0 }
    }
}

/// Length of the approximated simple moving average after `t` steps.
pub fn rho(beta2: f64, t: u64) -> f64 {
    let rho_inf = 2.0 / (1.0 - beta2) - 1.0;
    let bt = beta2.powi(t as i32);
    rho_inf - 2.0 * t as f64 * bt / (1.0 - bt)
}

/// Which update a step applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RadamBranch {
    Momentum,
    Rectified,
}

/// One in-place update. Every gradient is checked for finiteness before
/// any parameter is touched.
pub fn radam_step<T: Real>(
    params: &mut ParamSet<T>,
    grads: &ParamSet<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
    config: &RadamConfig,
) -> Result<RadamBranch, TrainError> {
    for (name, p) in params.iter() {
        let g = grads.get(name).ok_or_else(|| TrainError::Optimizer(format!("no gradient for `{name}`")))?;
        if g.shape() != p.shape() {
            return Err(TrainError::Optimizer(format!("gradient shape {:?} for `{name}` {:?}", g.shape(), p.shape())));
        }
        if !g.is_finite() {
            return Err(TrainError::NonFiniteGradient(name.clone()));
        }
    }
    let (b1, b2) = config.betas;
    state.step += 1;
    let t = state.step;
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    let rho_inf = 2.0 / (1.0 - b2) - 1.0;
    let rho_t = rho(b2, t);
    let rect = (rho_t > 4.0).then(|| {
        ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt()
    });
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).expect("checked above");
        let m = state.m.get_mut(name).ok_or_else(|| TrainError::Optimizer(format!("no state for `{name}`")))?;
        let v = state.v.get_mut(name).ok_or_else(|| TrainError::Optimizer(format!("no state for `{name}`")))?;
        for i in 0..p.len() {
            let gi = g[i].to_f64().unwrap_or(0.0);
            let mi = b1 * m[i].to_f64().unwrap_or(0.0) + (1.0 - b1) * gi;
            let vi = b2 * v[i].to_f64().unwrap_or(0.0) + (1.0 - b2) * gi * gi;
            m[i] = T::c(mi);
            v[i] = T::c(vi);
            let m_hat = mi / bc1;
            let delta = match rect {
                Some(r) => r * m_hat * bc2.sqrt() / (vi.sqrt() + config.eps),
                None => m_hat,
            };
            p[i] = T::c(p[i].to_f64().unwrap_or(0.0) - lr * delta);
        }
    }
    Ok(if rect.is_some() { RadamBranch::Rectified } else { RadamBranch::Momentum })
}
