//! Adam with bias correction.

use crate::error::{NnError, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    /// Applies one update to every trainable parameter using its stored
    /// gradient. Fails without touching anything if a gradient is missing.
    pub fn step<F: Scalar>(&self, store: &mut ParamStore<F>) -> Result<()> {
        if let Some(p) = store.iter().find(|p| p.trainable && p.grad.is_none()) {
            return Err(NnError::State(format!("no gradient for {}", p.name)));
        }
        let (b1, b2) = (F::lit(self.beta1), F::lit(self.beta2));
        let eps = F::lit(self.eps);
        for p in store.iter_mut().filter(|p| p.trainable) {
            p.step_count += 1;
            let t = p.step_count as i32;
            let c1 = F::lit(1.0 - self.beta1.powi(t));
            let c2 = F::lit(1.0 - self.beta2.powi(t));
            let lr = F::lit(self.lr);
            let grad = p.grad.as_ref().expect("checked above");
            for (((w, m), v), &g) in p
                .value
                .iter_mut()
                .zip(p.adam_m.iter_mut())
                .zip(p.adam_v.iter_mut())
                .zip(grad)
            {
                *m = b1 * *m + (F::one() - b1) * g;
                *v = b2 * *v + (F::one() - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
