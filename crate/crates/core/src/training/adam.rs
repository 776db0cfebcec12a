use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Bias-corrected Adam with one `(m, v)` pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>, lr: f64) -> Self {
        Self {
            lr,
            beta1: BETA1,
            beta2: BETA2,
            epsilon: EPSILON,
            step: 0,
            m: store.zeros_like(),
            v: store.zeros_like(),
        }
    }

    /// One update of every parameter. A gradient that is zero everywhere
    /// leaves parameters and state untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<(), TensorError> {
        if grads.len() != store.len() || grads.len() != self.m.len() {
            return Err(TensorError::Contract {
                op: "adam_step",
                reason: format!("{} gradients for {} parameters", grads.len(), store.len()),
            });
        }
        for (g, p) in grads.iter().zip(store.tensors()) {
            if g.shape() != p.shape() {
                return Err(TensorError::Shape {
                    op: "adam_step",
                    left: p.shape(),
                    right: g.shape(),
                });
            }
        }
        if grads.iter().all(|g| g.data().iter().all(|&x| x == T::zero())) {
            return Ok(());
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::one() - T::of(self.beta1.powi(t));
        let c2 = T::one() - T::of(self.beta2.powi(t));
        let (lr, eps) = (T::of(self.lr), T::of(self.epsilon));
        for ((param, grad), (m, v)) in store
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((p, &g), mi), vi) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * g;
                *vi = b2 * *vi + (T::one() - b2) * g * g;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
