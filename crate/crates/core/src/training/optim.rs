use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};

use crate::error::Result;
use crate::nn::ParamStore;

/// Adam with decoupled weight decay.
///
/// Moments are keyed by parameter name so they can be checkpointed. A
/// parameter without a gradient in a step is left untouched.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, ps: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, var) in ps.trainable() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let (m, v) = match self.moments.get(name) {
                Some((m, v)) => (m.clone(), v.clone()),
                None => (g.zeros_like()?, g.zeros_like()?),
            };
            let m = ((m * self.beta1)? + (g * (1.0 - self.beta1))?)?;
            let v = ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let denom = ((&v / bc2)?.sqrt()? + self.eps)?;
            let update = ((&m / bc1)? / denom)?;
            let theta = var.as_tensor();
            let decayed = (theta * (1.0 - lr * self.weight_decay))?;
            var.set(&(decayed - (update * lr)?)?)?;
            self.moments.insert(name.clone(), (m, v));
        }
        Ok(())
    }
}

/// Global L2 norm over all trainable gradients, accumulated in f64 in name order.
pub fn global_grad_norm(ps: &ParamStore, grads: &GradStore) -> Result<f64> {
    let mut sum = 0.0f64;
    for (_, var) in ps.trainable() {
        if let Some(g) = grads.get(var.as_tensor()) {
            sum += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
        }
    }
    Ok(sum.sqrt())
}

/// Rescales gradients in place so their global norm is at most `max_norm`.
/// Returns `(norm_before, norm_after)`.
pub fn clip_grad_norm(ps: &ParamStore, grads: &mut GradStore, max_norm: f64) -> Result<(f64, f64)> {
    let before = global_grad_norm(ps, grads)?;
    if before > max_norm && before.is_finite() {
        let scale = max_norm / before;
        for (_, var) in ps.trainable() {
            if let Some(g) = grads.get(var.as_tensor()) {
                let scaled = (g * scale)?;
                grads.insert(var.as_tensor(), scaled);
            }
        }
        let after = global_grad_norm(ps, grads)?;
        return Ok((before, after));
    }
    Ok((before, before))
}
