use serde::{Deserialize, Serialize};

use super::Parameterized;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment estimates aligned with the model's parameter visit order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new<M: Parameterized + ?Sized>(model: &M, config: AdamConfig) -> Self {
        let mut first = Vec::new();
        model.visit(&mut |p| first.push(Tensor::zeros(p.value.shape())));
        let second = first.clone();
        AdamState {
            config,
            step: 0,
            first,
            second,
        }
    }

    /// Applies one bias-corrected update. Nothing is modified if any gradient is non-finite.
    pub fn step<M: Parameterized + ?Sized>(&mut self, model: &mut M) -> Result<()> {
        let mut bad = None;
        let mut count = 0;
        model.visit(&mut |p| {
            count += 1;
            if bad.is_none() && !p.grad.all_finite() {
                bad = Some(p.name.clone());
            }
        });
        if let Some(name) = bad {
            return Err(Error::Training(format!("non-finite gradient in parameter `{name}`")));
        }
        if count != self.first.len() {
            return Err(Error::State(format!(
                "optimizer tracks {} parameters, model has {count}",
                self.first.len()
            )));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, epsilon } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let mut idx = 0;
        let (first, second) = (&mut self.first, &mut self.second);
        model.visit_mut(&mut |p| {
            let m = first[idx].data_mut();
            let v = second[idx].data_mut();
            let values = p.value.data_mut();
            for (i, &g) in p.grad.data().iter().enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                values[i] -= lr * mhat / (vhat.sqrt() + epsilon);
            }
            idx += 1;
        });
        Ok(())
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_grad_norm<M: Parameterized + ?Sized>(model: &mut M, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    model.visit(&mut |p| sq += p.grad.data().iter().map(|g| g * g).sum::<f64>());
    let norm = sq.sqrt();
    if norm.is_finite() && norm > max_norm {
        let s = max_norm / norm;
        model.visit_mut(&mut |p| p.grad.scale(s));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Param;

    struct Scalar(Param);

    impl Parameterized for Scalar {
        fn visit(&self, f: &mut dyn FnMut(&Param)) {
            f(&self.0)
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
            f(&mut self.0)
        }
    }

    fn scalar(v: f64) -> Scalar {
        Scalar(Param::new("theta", Tensor::full(&[1], v)))
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = scalar(0.0);
        s.0.grad.fill(2.0);
        let mut adam = AdamState::new(&s, AdamConfig { lr: 0.1, ..Default::default() });
        adam.step(&mut s).unwrap();
        assert!((s.0.value.data()[0] + 0.1).abs() < 1e-9);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut s = scalar(1.25);
        let mut adam = AdamState::new(&s, AdamConfig::default());
        adam.step(&mut s).unwrap();
        assert_eq!(s.0.value.data()[0], 1.25);
    }

    #[test]
    fn two_steps_on_quadratic_match_hand_computation_and_descend() {
        // loss = (theta - 3)^2, grad = 2 (theta - 3)
        let cfg = AdamConfig { lr: 0.5, ..Default::default() };
        let mut s = scalar(0.0);
        let mut adam = AdamState::new(&s, cfg);
        let loss = |t: f64| (t - 3.0) * (t - 3.0);
        let mut losses = vec![loss(0.0)];

        // hand-rolled reference
        let (mut theta, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for k in 1..=2 {
            let g = 2.0 * (theta - 3.0);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mhat = m / (1.0 - 0.9f64.powi(k));
            let vhat = v / (1.0 - 0.999f64.powi(k));
            theta -= 0.5 * mhat / (vhat.sqrt() + 1e-8);

            let cur = s.0.value.data()[0];
            s.0.grad.fill(2.0 * (cur - 3.0));
            adam.step(&mut s).unwrap();
            assert!((s.0.value.data()[0] - theta).abs() < 1e-12);
            losses.push(loss(s.0.value.data()[0]));
        }
        assert!(losses[1] < losses[0] && losses[2] < losses[1]);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = scalar(0.0);
        s.0.grad.fill(f64::NAN);
        let mut adam = AdamState::new(&s, AdamConfig::default());
        match adam.step(&mut s) {
            Err(Error::Training(msg)) => assert!(msg.contains("theta")),
            other => panic!("{other:?}"),
        }
        assert_eq!(adam.step, 0);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut s = scalar(0.0);
        s.0.grad.fill(10.0);
        let n = clip_grad_norm(&mut s, 5.0);
        assert_eq!(n, 10.0);
        assert!((s.0.grad.data()[0] - 5.0).abs() < 1e-12);
    }
}
