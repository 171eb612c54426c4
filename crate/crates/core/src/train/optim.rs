//! Adam with the inverse-sqrt warmup schedule.

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::Tensor;

/// lr = d_model^-1/2 * min(step^-1/2, step * warmup^-3/2); linear warmup to
/// the peak at `step == warmup`, then inverse-sqrt decay.
pub fn lr_schedule(step: u64, d_model: usize, warmup: usize) -> f64 {
    assert!(step >= 1, "schedule is defined for step >= 1");
    assert!(warmup >= 1, "warmup must be at least 1");
    let s = step as f64;
    let w = warmup as f64;
    (d_model as f64).powf(-0.5) * f64::min(s.powf(-0.5), s * w.powf(-1.5))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { beta1: 0.9, beta2: 0.98, eps: 1e-9 }
    }
}

/// First and second moments per parameter, in canonical parameter order,
/// plus the global step count.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl OptimState {
    pub fn new(params: &ModelParams<Tensor<f64>>) -> OptimState {
        let mut m = Vec::new();
        params.for_each(&mut |_, t| m.push(vec![0.0; t.numel()]));
        OptimState { v: m.clone(), m, t: 0 }
    }
}

/// One bias-corrected Adam update. `grads` is aligned with the canonical
/// parameter order. A non-finite gradient aborts, naming the parameter.
pub fn adam_step(
    params: &mut ModelParams<Tensor<f64>>,
    grads: &[Vec<f64>],
    state: &mut OptimState,
    lr: f64,
    hp: &AdamHyper,
) -> Result<()> {
    let names = params.names();
    assert_eq!(grads.len(), names.len(), "gradient count vs parameter count");
    for (i, g) in grads.iter().enumerate() {
        if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
            return Err(Error::train(format!(
                "non-finite gradient {} in parameter '{}'",
                bad, names[i]
            )));
        }
    }
    state.t += 1;
    let t = state.t;
    let bc1 = 1.0 - hp.beta1.powi(t as i32);
    let bc2 = 1.0 - hp.beta2.powi(t as i32);

    let mut idx = 0usize;
    let updated = params.map_named(&mut |_, p: &Tensor<f64>| {
        let g = &grads[idx];
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        idx += 1;
        let mut values = Vec::with_capacity(p.numel());
        for k in 0..p.numel() {
            m[k] = hp.beta1 * m[k] + (1.0 - hp.beta1) * g[k];
            v[k] = hp.beta2 * v[k] + (1.0 - hp.beta2) * g[k] * g[k];
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            values.push(p.values[k] - lr * m_hat / (v_hat.sqrt() + hp.eps));
        }
        Tensor::new(p.shape.clone(), values)
    });
    *params = updated;
    Ok(())
}
