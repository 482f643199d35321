use super::{NnError, ParamStore, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;
pub const BASE_LR: f64 = 1e-3;

/// `base_lr * 0.5^floor(epoch / 15)`.
pub fn lr_schedule(epoch: usize, base_lr: f64) -> f64 {
    base_lr * 0.5f64.powi((epoch / 15) as i32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub base_lr: f64,
}

impl AdamState {
    pub fn new(store: &ParamStore, base_lr: f64) -> Self {
        let zeros = || -> Vec<Tensor> {
            store
                .iter()
                .map(|p| Tensor::zeros(p.value.rows(), p.value.cols()))
                .collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPSILON,
            base_lr,
        }
    }

    /// Bias-corrected Adam update using the gradients held in `store`.
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<(), NnError> {
        if let Some(p) = store.iter().find(|p| !p.grad.all_finite()) {
            return Err(NnError::NanGradient {
                name: p.name.clone(),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, p) in store.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for e in 0..p.value.data.len() {
                let g = p.grad.data[e];
                m.data[e] = self.beta1 * m.data[e] + (1.0 - self.beta1) * g;
                v.data[e] = self.beta2 * v.data[e] + (1.0 - self.beta2) * g * g;
                let m_hat = m.data[e] / c1;
                let v_hat = v.data[e] / c2;
                p.value.data[e] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
