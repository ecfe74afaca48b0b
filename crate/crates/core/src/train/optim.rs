use crate::params::{Group, ParamStore};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with decoupled weight decay and one learning rate per parameter group.
///
/// Decay applies to matrices and kernels (rank >= 2) only. Parameters that got
/// no gradient in a step are left untouched, including their moment estimates.
#[derive(Debug, Clone)]
pub struct AdamW {
    lr: [f64; 3],
    weight_decay: [f64; 3],
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    steps: Vec<u64>,
}

fn slot(g: Group) -> usize {
    match g {
        Group::Base => 0,
        Group::Personality => 1,
        Group::Emotion => 2,
    }
}

impl AdamW {
    pub fn new(store: &ParamStore<f32>, weight_decay: [f64; 3]) -> Self {
        let n = store.len();
        Self {
            lr: [0.0; 3],
            weight_decay,
            m: store.entries().iter().map(|e| vec![0.0; e.tensor.len()]).collect(),
            v: store.entries().iter().map(|e| vec![0.0; e.tensor.len()]).collect(),
            steps: vec![0; n],
        }
    }

    pub fn set_lr(&mut self, g: Group, lr: f64) {
        self.lr[slot(g)] = lr;
    }

    pub fn lr(&self, g: Group) -> f64 {
        self.lr[slot(g)]
    }

    /// Applies one update. `grads[i]` belongs to store entry `i`.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[Option<Vec<f32>>]) {
        assert_eq!(grads.len(), store.len(), "one gradient slot per parameter");
        for (i, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            let entry = store.entry(i);
            if !entry.trainable {
                continue;
            }
            let k = slot(entry.group);
            let lr = self.lr[k];
            let decay = if entry.tensor.rank() >= 2 {
                1.0 - lr * self.weight_decay[k]
            } else {
                1.0
            };
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let c1 = 1.0 - BETA1.powi(t);
            let c2 = 1.0 - BETA2.powi(t);
            let step = (lr / c1) as f32;
            let c2 = c2 as f32;
            let (b1, b2, eps, decay) = (BETA1 as f32, BETA2 as f32, ADAM_EPS as f32, decay as f32);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let w = store.get_mut(i).data_mut();
            for j in 0..w.len() {
                let g = grad[j];
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let denom = (v[j] / c2).sqrt() + eps;
                w[j] = w[j] * decay - step * m[j] / denom;
            }
        }
    }
}
