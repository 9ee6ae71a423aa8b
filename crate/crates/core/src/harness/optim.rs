//! AdamW with decoupled weight decay.

use crate::error::{ensure, Result};
use crate::params::{ParamGrads, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment buffers of one parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// One AdamW update of a flat parameter. `step` is the 1-based count of
/// updates including this one.
pub fn adamw_update(theta: &mut [f64], grad: &[f64], state: &mut Moments, step: u64, lr: f64, wd: f64, cfg: &AdamConfig) -> Result<()> {
    ensure!(theta.len() == grad.len(), "optimizer: parameter has {} values, gradient {}", theta.len(), grad.len());
    ensure!(step >= 1, "optimizer: step counter starts at 1");
    if state.m.len() != theta.len() {
        ensure!(state.m.is_empty(), "optimizer: moment buffers have {} values, parameter {}", state.m.len(), theta.len());
        state.m = vec![0.0; theta.len()];
        state.v = vec![0.0; theta.len()];
    }
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    let decay = 1.0 - lr * wd;
    for (((t, &g), m), v) in theta.iter_mut().zip(grad).zip(&mut state.m).zip(&mut state.v) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *t = *t * decay - lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Optimizer state for a whole parameter store.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamConfig,
    pub weight_decay: f64,
    step: u64,
    state: Vec<Moments>,
}

impl AdamW {
    pub fn new(config: AdamConfig, weight_decay: f64) -> Self {
        Self {
            config,
            weight_decay,
            step: 0,
            state: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every parameter; parameters without a gradient get a zero
    /// gradient (moment decay and weight decay still apply).
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamGrads, lr: f64) -> Result<()> {
        self.state.resize_with(params.len(), Moments::default);
        self.step += 1;
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let theta = params.get_mut(id);
            let n = theta.len();
            let zero;
            let g = match grads.get(id) {
                Some(g) => {
                    ensure!(g.shape() == theta.shape(), "optimizer: gradient shape {:?} vs parameter {:?}", g.shape(), theta.shape());
                    g.data()
                }
                None => {
                    zero = vec![0.0; n];
                    &zero[..]
                }
            };
            adamw_update(theta.data_mut(), g, &mut self.state[id.index()], self.step, lr, self.weight_decay, &self.config)?;
        }
        Ok(())
    }
}
