use std::collections::BTreeMap;

use super::graph::Gradients;
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    m: BTreeMap<ParamId, Tensor>,
    v: BTreeMap<ParamId, Tensor>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads.params() {
            let m = self.m.entry(id).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let v = self.v.entry(id).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let p = store.value_mut(id);
            let (b1, b2) = (self.beta1, self.beta2);
            for (((pv, &gv), mv), vv) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let mh = *mv / c1;
                let vh = *vv / c2;
                *pv -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }

    /// Moment tensors keyed `adam.m.<name>` / `adam.v.<name>` for checkpointing.
    pub fn export(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (id, t) in &self.m {
            out.push((format!("adam.m.{}", store.name(*id)), t.clone()));
        }
        for (id, t) in &self.v {
            out.push((format!("adam.v.{}", store.name(*id)), t.clone()));
        }
        out
    }

    pub fn import(&mut self, store: &ParamStore, tensors: &BTreeMap<String, Tensor>, step: u64) {
        self.step = step;
        self.m.clear();
        self.v.clear();
        for (name, t) in tensors {
            if let Some(rest) = name.strip_prefix("adam.m.") {
                if let Some(id) = store.id(rest) {
                    self.m.insert(id, t.clone());
                }
            } else if let Some(rest) = name.strip_prefix("adam.v.") {
                if let Some(id) = store.id(rest) {
                    self.v.insert(id, t.clone());
                }
            }
        }
    }
}
