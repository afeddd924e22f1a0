use crate::error::{FdctError, Result};
use crate::model::OptimizerState;
use crate::params::{Gradients, ParamStore};

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0f32; p.numel()]).collect();
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// `p -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = (1.0 - self.beta1.powi(t)) as f32;
        let c2 = (1.0 - self.beta2.powi(t)) as f32;
        let (lr, eps, wd) = (lr as f32, self.eps as f32, self.weight_decay as f32);
        for (k, p) in params.iter_mut().enumerate() {
            let g = &grads.grads[k];
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.data.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + eps) + wd * p.data[i];
                p.data[i] -= lr * update;
            }
        }
    }

    pub fn state(&self) -> OptimizerState {
        OptimizerState {
            step: self.step,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            m: self.m.clone(),
            v: self.v.clone(),
        }
    }

    pub fn from_state(params: &ParamStore, s: &OptimizerState) -> Result<Self> {
        let sizes: Vec<usize> = params.iter().map(|p| p.numel()).collect();
        let fits = |x: &[Vec<f32>]| {
            x.len() == sizes.len() && x.iter().zip(&sizes).all(|(a, n)| a.len() == *n)
        };
        if !fits(&s.m) || !fits(&s.v) {
            return Err(FdctError::Checkpoint(
                "optimizer moments do not match the parameters".into(),
            ));
        }
        Ok(Self {
            beta1: s.beta1,
            beta2: s.beta2,
            eps: s.eps,
            weight_decay: s.weight_decay,
            step: s.step,
            m: s.m.clone(),
            v: s.v.clone(),
        })
    }
}
