//! AdamW with decoupled weight decay and linear warmup.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::numeric::{Gradients, ParamId, ParamSet, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup: usize,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, warmup: 0 }
    }
}

impl AdamWConfig {
    /// Learning rate at 1-based update `s`.
    pub fn lr_at(&self, s: usize) -> f64 {
        if s < self.warmup {
            self.lr * s as f64 / self.warmup as f64
        } else {
            self.lr
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    steps: usize,
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    state: HashMap<ParamId, Moments>,
    step: usize,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW { cfg, state: HashMap::new(), step: 0 }
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    pub fn moment_shapes_match<T: Scalar>(&self, ps: &ParamSet<T>) -> bool {
        self.state.iter().all(|(id, s)| s.m.len() == ps.get(*id).len() && s.v.len() == ps.get(*id).len())
    }

    /// Applies one update to every trainable parameter that received a gradient.
    pub fn step<T: Scalar>(&mut self, ps: &mut ParamSet<T>, grads: &Gradients<T>) {
        let list: Vec<_> = grads.param_ids().into_iter().map(|id| (id, grads.param(id).expect("listed gradient").clone())).collect();
        self.step_with(ps, &list);
    }

    /// One update from explicit `(parameter, gradient)` pairs.
    pub fn step_with<T: Scalar>(&mut self, ps: &mut ParamSet<T>, grads: &[(ParamId, Tensor<T>)]) {
        self.step += 1;
        let lr = self.cfg.lr_at(self.step);
        for (id, g) in grads {
            if !ps.is_frozen(*id) {
                self.update(ps, *id, g, lr);
            }
        }
    }

    pub fn update<T: Scalar>(&mut self, ps: &mut ParamSet<T>, id: ParamId, g: &Tensor<T>, lr: f64) {
        let c = &self.cfg;
        let w = ps.get_mut(id);
        let st = self.state.entry(id).or_insert_with(|| Moments { m: vec![0.0; g.len()], v: vec![0.0; g.len()], steps: 0 });
        st.steps += 1;
        let bc1 = 1.0 - c.beta1.powi(st.steps as i32);
        let bc2 = 1.0 - c.beta2.powi(st.steps as i32);
        for (((wi, gi), m), v) in w.data_mut().iter_mut().zip(g.data()).zip(&mut st.m).zip(&mut st.v) {
            let gi = gi.as_f64();
            *m = c.beta1 * *m + (1.0 - c.beta1) * gi;
            *v = c.beta2 * *v + (1.0 - c.beta2) * gi * gi;
            let (mh, vh) = (*m / bc1, *v / bc2);
            let x = wi.as_f64();
            *wi = T::from_f64(x * (1.0 - lr * c.weight_decay) - lr * mh / (vh.sqrt() + c.eps));
        }
    }
}
