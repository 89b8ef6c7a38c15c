//! AdamW with decoupled weight decay, plus the cosine learning-rate schedule.

use super::{lit, Scalar, Tensor, TensorError};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const DEFAULT_WEIGHT_DECAY: f64 = 0.01;

struct Slot<T: Scalar> {
    name: String,
    param: Tensor<T>,
    m: Vec<T>,
    v: Vec<T>,
}

/// AdamW over an explicit registry of named parameters.
///
/// The registry is the audit surface for the freeze contract: anything not
/// registered here is never touched by an optimizer step.
pub struct AdamW<T: Scalar> {
    slots: Vec<Slot<T>>,
    step: u64,
    pub base_lr: f64,
    pub weight_decay: f64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: Vec<(String, Tensor<T>)>, base_lr: f64, weight_decay: f64) -> Self {
        let slots = params
            .into_iter()
            .map(|(name, param)| {
                let n = param.len();
                Slot {
                    name,
                    param,
                    m: vec![T::zero(); n],
                    v: vec![T::zero(); n],
                }
            })
            .collect();
        AdamW {
            slots,
            step: 0,
            base_lr,
            weight_decay,
        }
    }

    /// Names of the registered parameter groups, in registration order.
    pub fn param_names(&self) -> Vec<String> {
        self.slots.iter().map(|s| s.name.clone()).collect()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One decoupled-weight-decay update. Gradients are left untouched;
    /// the caller zeroes them between steps.
    pub fn step(&mut self, lr: f64) -> Result<(), TensorError> {
        self.step += 1;
        let t = self.step as i32;
        let b1 = lit::<T>(ADAM_BETA1);
        let b2 = lit::<T>(ADAM_BETA2);
        let one_m_b1 = lit::<T>(1.0 - ADAM_BETA1);
        let one_m_b2 = lit::<T>(1.0 - ADAM_BETA2);
        let bc1 = lit::<T>(1.0 - ADAM_BETA1.powi(t));
        let bc2 = lit::<T>(1.0 - ADAM_BETA2.powi(t));
        let eps = lit::<T>(ADAM_EPS);
        let lr_t = lit::<T>(lr);
        let decay = lit::<T>(1.0 - lr * self.weight_decay);

        for slot in &mut self.slots {
            let grad = slot.param.grad().ok_or_else(|| TensorError::MissingGrad {
                name: slot.name.clone(),
            })?;
            let mut data = slot.param.to_vec();
            for i in 0..data.len() {
                let g = grad[i];
                slot.m[i] = b1 * slot.m[i] + one_m_b1 * g;
                slot.v[i] = b2 * slot.v[i] + one_m_b2 * g * g;
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                data[i] = data[i] * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
            slot.param.set_data(data);
        }
        Ok(())
    }

    pub fn zero_grads(&self) {
        for slot in &self.slots {
            slot.param.zero_grad();
        }
    }
}

/// Cosine decay from `base_lr` to zero over `total_steps`. Steps beyond the
/// end clamp to the final value.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    assert!(total_steps > 0, "cosine_lr: total_steps must be positive");
    let step = step.min(total_steps);
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints_and_midpoint() {
        let base = 1e-4;
        assert_eq!(cosine_lr(0, 100, base), base);
        assert!(cosine_lr(100, 100, base).abs() < 1e-20);
        assert!((cosine_lr(50, 100, base) - base / 2.0).abs() < 1e-12);
        // clamp past the end
        assert_eq!(cosine_lr(150, 100, base), cosine_lr(100, 100, base));
    }

    #[test]
    fn cosine_is_non_increasing() {
        let mut prev = f64::INFINITY;
        for s in 0..=200 {
            let lr = cosine_lr(s, 200, 1e-4);
            assert!(lr <= prev + 1e-18);
            prev = lr;
        }
    }

    #[test]
    fn single_step_matches_hand_computation() {
        // fresh state, grad g: update = -lr * m_hat / (sqrt(v_hat) + eps),
        // m_hat = g, v_hat = g^2 after bias correction at t=1
        let g = 0.37f64;
        let lr = 0.01;
        let p = Tensor::<f64>::param(vec![1], vec![1.0]);
        // produce grad = g through an actual backward pass
        let tape = crate::tensor::Tape::<f64>::new();
        let c = Tensor::new(vec![1], vec![g]);
        let prod = tape.mul(&p, &c).unwrap();
        let loss = tape.sum(&prod);
        tape.backward(&loss).unwrap();
        assert!((p.grad().unwrap()[0] - g).abs() < 1e-15);

        let mut opt = AdamW::new(vec![("p".into(), p.clone())], lr, 0.0);
        opt.step(lr).unwrap();
        let expected = 1.0 - lr * g / (g.abs() + ADAM_EPS);
        assert!((p.to_vec()[0] - expected).abs() < 1e-9);
    }

    #[test]
    fn zero_grad_zero_decay_leaves_param_unchanged() {
        let p = Tensor::<f64>::param(vec![2], vec![0.5, -0.5]);
        let mut opt = AdamW::new(vec![("p".into(), p.clone())], 0.01, 0.0);
        opt.step(0.01).unwrap();
        assert_eq!(p.to_vec(), vec![0.5, -0.5]);
    }

    #[test]
    fn decoupled_decay_shrinks_param_with_zero_grad() {
        let lr = 0.1;
        let wd = 0.01;
        let p = Tensor::<f64>::param(vec![1], vec![2.0]);
        let mut opt = AdamW::new(vec![("p".into(), p.clone())], lr, wd);
        opt.step(lr).unwrap();
        assert!((p.to_vec()[0] - 2.0 * (1.0 - lr * wd)).abs() < 1e-12);
    }

    #[test]
    fn missing_grad_names_parameter() {
        let p = Tensor::<f64>::new(vec![1], vec![1.0]); // not tracked
        let mut opt = AdamW::new(vec![("w_out".into(), p)], 0.01, 0.0);
        let err = opt.step(0.01).unwrap_err();
        assert!(err.to_string().contains("w_out"));
    }
}
