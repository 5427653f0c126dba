//! Adaptive moment estimation.

use crate::autograd::{Gradients, ParamId, ParamSet};
use crate::tensor::Mat;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first: Vec<Mat>,
    pub second: Vec<Mat>,
    pub steps: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros = || {
            params
                .values()
                .iter()
                .map(|m| Mat::zeros(m.rows(), m.cols()))
                .collect::<Vec<_>>()
        };
        Self {
            first: zeros(),
            second: zeros(),
            steps: 0,
        }
    }

    /// One update with a constant learning rate. Parameters without a
    /// gradient are treated as having a zero gradient.
    pub fn update(&mut self, params: &mut ParamSet, grads: &Gradients, lr: f64) {
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for i in 0..params.len() {
            let id = ParamId(i);
            let g = grads.get(id);
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            let p = params.get_mut(id);
            for k in 0..p.len() {
                let gk = g.map_or(0.0, |g| g.data()[k]);
                let mk = BETA1 * m.data()[k] + (1.0 - BETA1) * gk;
                let vk = BETA2 * v.data()[k] + (1.0 - BETA2) * gk * gk;
                m.data_mut()[k] = mk;
                v.data_mut()[k] = vk;
                p.data_mut()[k] -= lr * (mk / c1) / ((vk / c2).sqrt() + EPSILON);
            }
        }
    }
}
