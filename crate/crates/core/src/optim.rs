//! Adam optimizer with bias correction.

use crate::error::{GrError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment accumulators, one pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    /// Moments start at zero, matching the parameter shapes.
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

fn update_one(
    p: &mut Tensor,
    g: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    cfg: AdamConfig,
    bc1: f64,
    bc2: f64,
) -> Result<()> {
    if p.shape() != g.shape() {
        return Err(GrError::Shape(format!(
            "adam_step shape mismatch: param {}x{} vs grad {}x{}",
            p.rows(),
            p.cols(),
            g.rows(),
            g.cols()
        )));
    }
    let pd = p.data_mut();
    let gd = g.data();
    let md = m.data_mut();
    let vd = v.data_mut();
    for i in 0..pd.len() {
        md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gd[i];
        vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gd[i] * gd[i];
        let mhat = md[i] / bc1;
        let vhat = vd[i] / bc2;
        pd[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// One bias-corrected Adam update over a flat parameter list.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(GrError::Shape(format!(
            "adam_step param/grad/state counts differ: {}/{}/{}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        update_one(p, g, m, v, cfg, bc1, bc2)?;
    }
    Ok(())
}

/// Same update over borrowed parameter tensors (structured models hand
/// out `&mut Tensor` views in canonical order).
pub fn adam_step_refs(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(GrError::Shape(format!(
            "adam_step param/grad/state counts differ: {}/{}/{}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        update_one(p, g, m, v, cfg, bc1, bc2)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        let mut params = vec![Tensor::row_vector(vec![1.0, -2.0, 3.0])];
        let grads = vec![Tensor::zeros(1, 3)];
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, AdamConfig::with_lr(0.1)).unwrap();
        assert_eq!(params[0].data(), &[1.0, -2.0, 3.0]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn first_step_is_signed_lr() {
        // With bias correction at t=1, the update is -lr*g/(|g|+eps').
        let mut params = vec![Tensor::scalar(0.0)];
        let grads = vec![Tensor::scalar(2.5)];
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, AdamConfig::with_lr(0.01)).unwrap();
        assert!((params[0].item() + 0.01).abs() < 1e-6, "got {}", params[0].item());
    }

    #[test]
    fn converges_on_quadratic() {
        // 100 steps on f(w) = (w-5)^2 from w=0 with lr=0.1 gets within 0.5.
        let mut params = vec![Tensor::scalar(0.0)];
        let mut state = AdamState::new(&params);
        for _ in 0..100 {
            let w = params[0].item();
            let grads = vec![Tensor::scalar(2.0 * (w - 5.0))];
            adam_step(&mut params, &grads, &mut state, AdamConfig::with_lr(0.1)).unwrap();
        }
        let w = params[0].item();
        assert!((w - 5.0).abs() < 0.5, "w = {w}");
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = vec![Tensor::zeros(2, 2)];
        let grads = vec![Tensor::zeros(2, 3)];
        let mut state = AdamState::new(&params);
        assert!(adam_step(&mut params, &grads, &mut state, AdamConfig::with_lr(0.1)).is_err());
    }
}
