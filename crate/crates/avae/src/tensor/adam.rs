//! Adam with bias correction. State is keyed by parameter name so it can be
//! carried across checkpoint save/load without identity tricks.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-parameter optimizer state.
#[derive(Clone, Debug)]
pub struct AdamSlot<T> {
    pub step: u64,
    pub first_moment: Vec<T>,
    pub second_moment: Vec<T>,
}

pub struct Adam<T: Scalar> {
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    slots: BTreeMap<String, AdamSlot<T>>,
}

impl<T: Scalar> Adam<T> {
    /// Adam with the customary betas (0.9, 0.999) and eps 1e-8.
    pub fn new(lr: T) -> Self {
        Adam {
            lr,
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            eps: T::from_f64(1e-8),
            slots: BTreeMap::new(),
        }
    }

    pub fn learning_rate(&self) -> T {
        self.lr
    }

    /// Applies one update to `param` from its accumulated gradient, then
    /// clears the gradient. The slot for `name` is created on first use.
    pub fn step(&mut self, name: &str, param: &mut Tensor<T>) -> Result<()> {
        let grad = param.take_grad().ok_or_else(|| {
            Error::Usage(format!("parameter '{name}' has no gradient to step on"))
        })?;
        let n = param.numel();
        debug_assert_eq!(grad.len(), n);
        let slot = self.slots.entry(name.to_string()).or_insert_with(|| AdamSlot {
            step: 0,
            first_moment: vec![T::zero(); n],
            second_moment: vec![T::zero(); n],
        });
        if slot.first_moment.len() != n {
            return Err(Error::Usage(format!(
                "optimizer state for '{name}' holds {} elements but the parameter has {n}",
                slot.first_moment.len()
            )));
        }
        slot.step += 1;
        let one = T::one();
        let bias1 = one - self.beta1.powi(slot.step as i32);
        let bias2 = one - self.beta2.powi(slot.step as i32);
        let data = param.data_mut();
        for i in 0..n {
            let g = grad[i];
            let m = self.beta1 * slot.first_moment[i] + (one - self.beta1) * g;
            let v = self.beta2 * slot.second_moment[i] + (one - self.beta2) * g * g;
            slot.first_moment[i] = m;
            slot.second_moment[i] = v;
            let m_hat = m / bias1;
            let v_hat = v / bias2;
            data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }

    pub fn slot(&self, name: &str) -> Option<&AdamSlot<T>> {
        self.slots.get(name)
    }

    /// Iterates slots in name order (used by checkpointing).
    pub fn slots(&self) -> impl Iterator<Item = (&str, &AdamSlot<T>)> {
        self.slots.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Reinstalls a slot verbatim (used by checkpoint restore).
    pub fn restore(&mut self, name: String, slot: AdamSlot<T>) {
        self.slots.insert(name, slot);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> Tensor<f64> {
        Tensor::scalar(v).with_requires_grad(true)
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut p = scalar_param(1.25);
        p.set_grad(vec![0.0]).unwrap();
        let mut opt = Adam::new(5e-5);
        opt.step("p", &mut p).unwrap();
        assert_eq!(p.data(), &[1.25]);
        assert_eq!(opt.slot("p").unwrap().step, 1);
    }

    #[test]
    fn first_step_moves_by_roughly_the_learning_rate() {
        let mut p = scalar_param(1.0);
        p.set_grad(vec![1.0]).unwrap();
        let mut opt = Adam::new(5e-5);
        opt.step("p", &mut p).unwrap();
        // Bias correction makes the first update lr·g/(|g|+eps).
        assert!((p.data()[0] - (1.0 - 5e-5)).abs() < 1e-10);
        assert!(p.grad().is_none(), "step consumes the gradient");
    }

    #[test]
    fn second_step_advances_counter_and_moments() {
        let mut p = scalar_param(0.0);
        let mut opt = Adam::new(1e-3);
        for _ in 0..2 {
            p.set_grad(vec![2.0]).unwrap();
            opt.step("p", &mut p).unwrap();
        }
        let slot = opt.slot("p").unwrap();
        assert_eq!(slot.step, 2);
        assert!(slot.second_moment[0] > 0.0);
    }

    #[test]
    fn missing_gradient_is_a_usage_error() {
        let mut p = scalar_param(1.0);
        let mut opt = Adam::new(1e-3);
        let err = opt.step("p", &mut p).unwrap_err();
        assert!(matches!(err, Error::Usage(_)), "got {err:?}");
    }

    #[test]
    fn descends_a_quadratic() {
        // Minimize (x-3)² from 0; a few hundred steps should close most of
        // the gap even with Adam's normalized step size.
        let mut p = scalar_param(0.0);
        let mut opt = Adam::new(0.05);
        for _ in 0..400 {
            let x = p.data()[0];
            p.set_grad(vec![2.0 * (x - 3.0)]).unwrap();
            opt.step("p", &mut p).unwrap();
        }
        assert!((p.data()[0] - 3.0).abs() < 0.1, "ended at {}", p.data()[0]);
    }
}
