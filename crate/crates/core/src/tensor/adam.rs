//! Adam optimizer with bias correction.

use super::{Tensor, TensorError};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Optimizer state bound to a fixed parameter list.
///
/// `step` applies the standard bias-corrected update from each parameter's
/// accumulated gradient and then zeroes that gradient.
pub struct Adam {
    params: Vec<Tensor>,
    slots: Vec<Slot>,
    lr: f64,
    t: u64,
}

impl Adam {
    pub fn new(params: Vec<Tensor>, lr: f64) -> Self {
        let slots = params
            .iter()
            .map(|p| Slot { m: vec![0.0; p.numel()], v: vec![0.0; p.numel()] })
            .collect();
        Adam { params, slots, lr, t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn step(&mut self) -> Result<(), TensorError> {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for (param, slot) in self.params.iter().zip(self.slots.iter_mut()) {
            if param.numel() != slot.m.len() {
                return Err(TensorError::OptimizerMismatch {
                    expected: slot.m.len(),
                    got: param.numel(),
                });
            }
            let lr = self.lr;
            param.apply_update(|data, grad| {
                for i in 0..data.len() {
                    let g = grad[i];
                    slot.m[i] = BETA1 * slot.m[i] + (1.0 - BETA1) * g;
                    slot.v[i] = BETA2 * slot.v[i] + (1.0 - BETA2) * g * g;
                    let m_hat = slot.m[i] / bc1;
                    let v_hat = slot.v[i] / bc2;
                    data[i] -= lr * m_hat / (v_hat.sqrt() + EPS);
                    grad[i] = 0.0;
                }
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_fresh_params_unchanged() {
        let w = Tensor::param(vec![1.5, -2.5], &[2]).unwrap();
        let mut opt = Adam::new(vec![w.clone()], 0.1);
        opt.step().unwrap();
        assert_eq!(w.data(), vec![1.5, -2.5]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // With fresh moments, m_hat/sqrt(v_hat) = g/|g|, so the first update
        // is -lr*sign(g) up to eps.
        let w = Tensor::param(vec![0.0, 0.0], &[2]).unwrap();
        let g = Tensor::from_vec(vec![3.0, -0.25], &[2]).unwrap();
        let loss = w.mul(&g).unwrap().sum();
        loss.backward().unwrap();
        let mut opt = Adam::new(vec![w.clone()], 0.01);
        opt.step().unwrap();
        let d = w.data();
        assert!((d[0] + 0.01).abs() < 1e-6);
        assert!((d[1] - 0.01).abs() < 1e-6);
        // grads were zeroed by the step
        assert_eq!(w.grad(), vec![0.0, 0.0]);
    }

    #[test]
    fn converges_on_scalar_quadratic() {
        // 200 steps on f(w) = (w-3)^2 from w=0 with lr 0.1.
        let w = Tensor::param(vec![0.0], &[1]).unwrap();
        let mut opt = Adam::new(vec![w.clone()], 0.1);
        for _ in 0..200 {
            let diff = w.add_scalar(-3.0);
            let loss = diff.mul(&diff).unwrap().sum();
            loss.backward().unwrap();
            opt.step().unwrap();
        }
        assert!((w.data()[0] - 3.0).abs() < 0.05, "w = {}", w.data()[0]);
    }

    #[test]
    fn deterministic_across_repeats() {
        let run = || {
            let w = Tensor::param(vec![0.2, -0.4, 0.6], &[3]).unwrap();
            let mut opt = Adam::new(vec![w.clone()], 0.05);
            for _ in 0..50 {
                let loss = w.mul(&w).unwrap().sum();
                loss.backward().unwrap();
                opt.step().unwrap();
            }
            w.data()
        };
        assert_eq!(run(), run());
    }
}
