//! Adam over one parameter group of a [`ParamStore`].

use crate::nn::{Group, ParamStore};
use crate::tape::Mat;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam state for the parameters of a single [`Group`].
#[derive(Debug, Clone)]
pub struct Adam {
    group: Group,
    config: AdamConfig,
    step: u64,
    m: Vec<Option<Mat>>,
    v: Vec<Option<Mat>>,
}

impl Adam {
    pub fn new(group: Group, params: &ParamStore) -> Self {
        Self::with_config(group, params, AdamConfig::default())
    }

    pub fn with_config(group: Group, params: &ParamStore, config: AdamConfig) -> Self {
        Self { group, config, step: 0, m: vec![None; params.len()], v: vec![None; params.len()] }
    }

    pub fn group(&self) -> Group {
        self.group
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update with learning rate `lr`. Gradients for parameters outside
    /// this optimiser's group are ignored; a missing gradient counts as zero.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Mat>], lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<_> = params.ids().filter(|&id| params.group(id) == self.group).collect();
        for id in ids {
            let i = id.index();
            let shape = params.get(id).raw_dim();
            let m = self.m[i].get_or_insert_with(|| Mat::zeros(shape));
            let v = self.v[i].get_or_insert_with(|| Mat::zeros(shape));
            match grads.get(i).and_then(|g| g.as_ref()) {
                Some(g) => {
                    m.zip_mut_with(g, |m, &g| *m = beta1 * *m + (1.0 - beta1) * g);
                    v.zip_mut_with(g, |v, &g| *v = beta2 * *v + (1.0 - beta2) * g * g);
                }
                None => {
                    m.mapv_inplace(|m| beta1 * m);
                    v.mapv_inplace(|v| beta2 * v);
                }
            }
            let p = params.get_mut(id);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
            });
        }
    }
}
