use super::{ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter slot.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|(_, v)| Tensor::zeros(v.shape())).collect();
        Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn first_moment(&self, id: usize) -> &Tensor<T> {
        &self.first[id]
    }

    pub fn second_moment(&self, id: usize) -> &Tensor<T> {
        &self.second[id]
    }
}

/// One bias-corrected Adam update.
///
/// Every gradient is checked before anything is written, so a non-finite
/// gradient leaves both parameters and state untouched.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Dimension {
            op: "adam_step",
            left: vec![params.len()],
            right: vec![grads.len()],
        });
    }
    for (id, g) in grads.iter().enumerate() {
        params.by_id(id).same_shape(g, "adam_step")?;
        if !g.is_finite() {
            return Err(Error::numeric(format!("gradient of '{}'", params.name(id))));
        }
    }
    let AdamConfig { beta1, beta2, eps } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (id, g) in grads.iter().enumerate() {
        let m = state.first[id].data_mut();
        let v = state.second[id].data_mut();
        let p = params.by_id_mut(id).data_mut();
        for (((pi, mi), vi), gi) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
            let gf = gi.to_acc();
            let mf = beta1 * mi.to_acc() + (1.0 - beta1) * gf;
            let vf = beta2 * vi.to_acc() + (1.0 - beta2) * gf * gf;
            *mi = T::of(mf);
            *vi = T::of(vf);
            let update = lr * (mf / c1) / ((vf / c2).sqrt() + eps);
            *pi = T::of(pi.to_acc() - update);
        }
    }
    Ok(())
}

/// Rescales gradients in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v.to_acc() * v.to_acc())
        .sum::<f64>()
        .sqrt();
    if norm.is_finite() && norm > max_norm && max_norm > 0.0 {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Linear warm-up to `peak` over `warmup` steps, constant afterwards.
pub fn warmup_lr(step: usize, peak: f64, warmup: usize) -> f64 {
    if warmup == 0 {
        return peak;
    }
    peak * (step.min(warmup) as f64 / warmup as f64)
}

/// [`warmup_lr`] followed by cosine decay from `peak` to `floor · peak` at
/// step `total`.
pub fn cosine_lr(step: usize, peak: f64, warmup: usize, total: usize, floor: f64) -> f64 {
    if step <= warmup || total <= warmup {
        return warmup_lr(step, peak, warmup);
    }
    let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    peak * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}
