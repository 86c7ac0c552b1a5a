use std::collections::BTreeMap;

use crate::tensor::Tensor;

/// Adaptive-moment optimizer with a constant learning rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of completed steps.
    pub t: u64,
    /// First and second moments per parameter name.
    pub moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Starts a new step; call once before the per-parameter updates.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &Tensor) {
        debug_assert_eq!(param.shape(), grad.shape());
        let (m, v) = self.moments.entry(name.to_string()).or_insert_with(|| {
            (
                Tensor::zeros(param.shape().to_vec()),
                Tensor::zeros(param.shape().to_vec()),
            )
        });
        let t = self.t.max(1) as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), mk), vk) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mk = self.beta1 * *mk + (1.0 - self.beta1) * g;
            *vk = self.beta2 * *vk + (1.0 - self.beta2) * g * g;
            let m_hat = *mk / c1;
            let v_hat = *vk / c2;
            *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}
