use super::{Elem, Tensor};
use crate::{Error, Result};

/// Adam hyperparameters. Betas follow the paper-scale setup; the learning
/// rate is a per-stage config value.
#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { lr: 3e-4, beta1: 0.9, beta2: 0.99, epsilon: 1e-8 }
    }
}

/// Per-parameter first/second moment accumulators plus the shared step count.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub params: AdamParams,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    /// `sizes[i]` is the element count of parameter i.
    pub fn new(params: AdamParams, sizes: &[usize]) -> Self {
        AdamState {
            params,
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update over a parameter list. Moments are kept in
/// f64 regardless of parameter precision so repeated updates stay stable.
/// `lr_scale` multiplies the base learning rate (for warmup/decay schedules).
pub fn adam_step<E: Elem>(
    params: &mut [&mut Tensor<E>],
    grads: &[&Tensor<E>],
    state: &mut AdamState,
    lr_scale: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Input(format!(
            "adam_step: {} params, {} grads, state for {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let p = state.params;
    let bc1 = 1.0 - p.beta1.powi(t);
    let bc2 = 1.0 - p.beta2.powi(t);
    let lr = p.lr * lr_scale;
    for (i, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
        if param.shape() != grad.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                detail: format!("param {:?} vs grad {:?}", param.shape(), grad.shape()),
            });
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, (x, g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
            let gf = g.to_f64();
            m[j] = p.beta1 * m[j] + (1.0 - p.beta1) * gf;
            v[j] = p.beta2 * v[j] + (1.0 - p.beta2) * gf * gf;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *x = E::from_f64(x.to_f64() - lr * mhat / (vhat.sqrt() + p.epsilon));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut w = Tensor::<f32>::from_f64_slice(vec![3], &[1.0, -2.0, 0.5]).unwrap();
        let g = Tensor::<f32>::zeros(vec![3]);
        let before = w.clone();
        let mut state = AdamState::new(AdamParams::default(), &[3]);
        adam_step(&mut [&mut w], &[&g], &mut state, 1.0).unwrap();
        assert_eq!(w, before);
    }

    #[test]
    fn single_step_moves_by_lr() {
        // Fresh state, g = 1: bias-corrected mhat = 1, vhat = 1, so the update
        // is -lr / (1 + eps).
        let lr = 0.05;
        let mut w = Tensor::<f64>::scalar(0.0);
        let g = Tensor::<f64>::scalar(1.0);
        let mut state =
            AdamState::new(AdamParams { lr, ..AdamParams::default() }, &[1]);
        adam_step(&mut [&mut w], &[&g], &mut state, 1.0).unwrap();
        assert!((w.item() + lr).abs() < 1e-6 * lr);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn converges_on_scalar_quadratic() {
        // f(x) = x^2 from x = 1 with lr = 0.1: |x| < 0.1 after 100 steps.
        let mut x = Tensor::<f64>::scalar(1.0);
        let mut state =
            AdamState::new(AdamParams { lr: 0.1, ..AdamParams::default() }, &[1]);
        for _ in 0..100 {
            let g = Tensor::<f64>::scalar(2.0 * x.item());
            adam_step(&mut [&mut x], &[&g], &mut state, 1.0).unwrap();
        }
        assert!(x.item().abs() < 0.1, "ended at {}", x.item());
    }
}
