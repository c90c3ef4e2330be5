//! Adam optimizer with bias correction.

use super::{Params, Scalar};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first/second moment buffers plus the step counter.
pub struct AdamState {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new<T: Scalar>(params: &Params<T>, cfg: AdamConfig) -> Self {
        let m = params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        let v = params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        AdamState {
            cfg,
            m,
            v,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update from the gradients stored on the parameters; gradients are
    /// zeroed afterwards. Moment arithmetic runs in f64 so f32 models see
    /// the same trajectory shape as f64 ones.
    pub fn step<T: Scalar>(&mut self, params: &mut Params<T>) {
        self.step += 1;
        let t = self.step as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for i in 0..params.len() {
            let tensor = params.get_mut(super::ParamId(i));
            let n = tensor.numel();
            // split borrows: copy grad out, then write values
            let grad: Vec<f64> = match tensor.grad() {
                Some(g) => g.iter().map(|x| x.as_f64()).collect(),
                None => continue,
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let vals = tensor.values_mut();
            for j in 0..n {
                let g = grad[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                let upd = c.lr * m_hat / (v_hat.sqrt() + c.eps);
                vals[j] = T::from_f64(vals[j].as_f64() - upd);
            }
            tensor.zero_grad();
        }
    }
}
