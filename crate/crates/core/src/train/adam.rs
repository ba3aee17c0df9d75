use serde::{Deserialize, Serialize};

use crate::model::{Gradients, ModelParams, TensorGrad};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moments per tensor. Embedding tables are updated lazily:
/// only rows present in the gradient have their moments and values touched.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let sizes: Vec<usize> = params.tensors().iter().map(|(_, _, d)| d.len()).collect();
        AdamState {
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One bias-corrected Adam update.
    pub fn apply(&mut self, params: &mut ModelParams, grads: &Gradients, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        };
        let tensors = params.tensors_mut();
        for (((_, _, data), g), (m, v)) in tensors
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            match g {
                TensorGrad::Dense(g) => {
                    for i in 0..data.len() {
                        update(&mut data[i], &mut m[i], &mut v[i], g[i]);
                    }
                }
                TensorGrad::Rows(rows) => {
                    let w = rows.width;
                    for (&r, gr) in &rows.rows {
                        for (j, &gj) in gr.iter().enumerate() {
                            let i = r * w + j;
                            update(&mut data[i], &mut m[i], &mut v[i], gj);
                        }
                    }
                }
            }
        }
    }
}

/// Functional form of [`AdamState::apply`].
pub fn adam_step(params: &mut ModelParams, grads: &Gradients, state: &mut AdamState, cfg: &AdamConfig) {
    state.apply(params, grads, cfg);
}
