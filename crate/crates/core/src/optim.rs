use ndarray::{ArrayD, Zip};

use crate::nn::Module;
use crate::tensor::Real;

/// Adam with per-parameter step counters. Parameters that are inactive in a
/// step keep their value and moments, and their gradient is discarded.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    slots: Vec<Slot<F>>,
}

#[derive(Clone, Debug)]
struct Slot<F> {
    name: String,
    m: ArrayD<F>,
    v: ArrayD<F>,
    steps: i32,
}

impl<F: Real> Adam<F> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr: F::lit(lr),
            beta1: F::lit(beta1),
            beta2: F::lit(beta2),
            eps: F::lit(1e-8),
            slots: Vec::new(),
        }
    }

    /// Steps taken so far by the named parameter.
    pub fn steps_of(&self, name: &str) -> Option<i32> {
        self.slots.iter().find(|s| s.name == name).map(|s| s.steps)
    }

    pub fn step<M: Module<F>>(&mut self, model: &mut M, active: &dyn Fn(&str) -> bool) {
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let slots = &mut self.slots;
        let mut index = 0usize;
        model.visit_params_mut("", &mut |name, param| {
            if index == slots.len() {
                slots.push(Slot {
                    name: name.clone(),
                    m: ArrayD::zeros(param.value.raw_dim()),
                    v: ArrayD::zeros(param.value.raw_dim()),
                    steps: 0,
                });
            }
            let slot = &mut slots[index];
            debug_assert_eq!(slot.name, name, "parameter order changed between steps");
            index += 1;
            if active(&name) {
                slot.steps += 1;
                let c1 = F::one() - b1.powi(slot.steps);
                let c2 = F::one() - b2.powi(slot.steps);
                Zip::from(&mut param.value)
                    .and(&param.grad)
                    .and(&mut slot.m)
                    .and(&mut slot.v)
                    .for_each(|p, &g, m, v| {
                        *m = b1 * *m + (F::one() - b1) * g;
                        *v = b2 * *v + (F::one() - b2) * g * g;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *p -= lr * m_hat / (v_hat.sqrt() + eps);
                    });
            }
            param.zero_grad();
        });
    }
}
