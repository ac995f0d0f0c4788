//! Adam optimizer with global-norm gradient clipping.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Adam hyper-parameters and per-parameter moment buffers.
///
/// Moment buffers are allocated lazily on the first step that touches a
/// parameter; `step_count` increments once per [`AdamState::step`] call.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step_count: u64,
    moments: Vec<Option<Moments>>,
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

impl AdamState {
    /// Defaults follow the original Adam paper: beta1=0.9, beta2=0.999,
    /// eps=1e-8. Only the learning rate is taken from configuration.
    pub fn new(learning_rate: f64, num_params: usize) -> Self {
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            moments: vec![None; num_params],
        }
    }

    pub fn has_moments(&self, index: usize) -> bool {
        self.moments[index].is_some()
    }

    /// One bias-corrected Adam update over `params`, consuming `grads`
    /// positionally. `names` are used only for diagnostics.
    pub fn step(
        &mut self,
        names: &[String],
        params: &mut [&mut Tensor<f32>],
        grads: &[Tensor<f32>],
    ) -> Result<()> {
        assert_eq!(params.len(), self.moments.len(), "adam: parameter count");
        assert_eq!(params.len(), grads.len(), "adam: gradient count");
        for (i, g) in grads.iter().enumerate() {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(names[i].clone()));
            }
        }
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);

        for (i, (param, grad)) in params.iter_mut().zip(grads.iter()).enumerate() {
            let n = grad.len();
            let slot = self.moments[i].get_or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            let data = param.data_mut();
            for j in 0..n {
                let g = grad.data()[j];
                slot.m[j] = b1 * slot.m[j] + (1.0 - b1) * g;
                slot.v[j] = b2 * slot.v[j] + (1.0 - b2) * g * g;
                let m_hat = slot.m[j] as f64 / bc1;
                let v_hat = slot.v[j] as f64 / bc2;
                data[j] -= (self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon)) as f32;
            }
        }
        Ok(())
    }
}

/// Scale all gradients by `max_norm / norm` when the global L2 norm
/// exceeds `max_norm`; otherwise leave them unchanged. Returns the
/// pre-clip global norm.
pub fn clip_gradients_l2<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "clip_gradients_l2: max_norm must be positive");
    let sq_sum: f64 = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| {
            let x = v.to_f64();
            x * x
        })
        .sum();
    let norm = sq_sum.sqrt();
    if norm > max_norm {
        let scale = T::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v = *v * scale;
            }
        }
    }
    norm
}
