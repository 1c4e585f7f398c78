use serde::{Deserialize, Serialize};

use super::tensor::Element;
use crate::error::{Error, Result};

/// Moment buffers and hyperparameters for bias-corrected Adam.
#[derive(Clone, Debug)]
pub struct AdamState<T = f32> {
    pub step: u64,
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<T: Element> AdamState<T> {
    pub fn new(param_count: usize) -> Self {
        Self {
            step: 0,
            m: vec![T::zero(); param_count],
            v: vec![T::zero(); param_count],
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One Adam update of `params` in place.
pub fn adam_step<T: Element>(params: &mut [T], grads: &[T], state: &mut AdamState<T>, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::invalid(format!(
            "adam_step: {} params, {} grads, {} moment entries",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::from_f64(state.beta1);
    let b2 = T::from_f64(state.beta2);
    let one = T::one();
    let bc1 = T::from_f64(1.0 - state.beta1.powi(t));
    let bc2 = T::from_f64(1.0 - state.beta2.powi(t));
    let eps = T::from_f64(state.epsilon);
    let lr = T::from_f64(lr);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Cosine decay from `lr_start` at step 0 to `lr_end` at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub lr_start: f64,
    pub lr_end: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn new(total_steps: usize) -> Self {
        Self {
            lr_start: 1e-3,
            lr_end: 1e-5,
            total_steps,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.lr_end;
        }
        let progress = step.min(self.total_steps) as f64 / self.total_steps as f64;
        self.lr_end + 0.5 * (self.lr_start - self.lr_end) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

pub fn cosine_lr(schedule: &CosineSchedule, step: usize) -> f64 {
    schedule.lr(step)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![0.3f64, -1.2, 4.0];
        let before = p.clone();
        let mut st = AdamState::new(3);
        for _ in 0..5 {
            adam_step(&mut p, &[0.0; 3], &mut st, 1e-2).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.step, 5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![1.0f64];
        let mut st = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut st, 0.01).unwrap();
        let expected = 1.0 - 0.01 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15, "{}", p[0]);
    }

    #[test]
    fn quadratic_converges() {
        let mut x = vec![1.0f64];
        let mut st = AdamState::new(1);
        for _ in 0..100 {
            let g = [2.0 * x[0]];
            adam_step(&mut x, &g, &mut st, 0.1).unwrap();
        }
        assert!(x[0].abs() < 0.1, "x = {}", x[0]);
    }

    #[test]
    fn mismatched_lengths() {
        let mut st = AdamState::<f32>::new(2);
        assert!(adam_step(&mut [0.0f32; 2], &[0.0; 3], &mut st, 0.1).is_err());
    }

    #[test]
    fn cosine_endpoints() {
        let s = CosineSchedule::new(1000);
        assert_eq!(s.lr(0), 1e-3);
        assert!((s.lr(1000) - 1e-5).abs() < 1e-18);
        assert!((s.lr(500) - 5.05e-4).abs() < 1e-15);
        assert!((s.lr(5000) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn cosine_is_non_increasing() {
        let s = CosineSchedule::new(337);
        let lrs: Vec<f64> = (0..=337).map(|i| cosine_lr(&s, i)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}
