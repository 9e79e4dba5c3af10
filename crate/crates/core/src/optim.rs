use std::collections::BTreeMap;

use crate::autograd::{Tensor, Var};
use crate::nn::Module;

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64, betas: (f64, f64)) -> Self {
        Adam {
            lr,
            betas,
            eps: 1e-8,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters without an entry in `grads` are left
    /// untouched.
    pub fn step(&mut self, module: &mut dyn Module, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let (lr, eps) = (self.lr, self.eps);
        let first = &mut self.first;
        let second = &mut self.second;
        module.visit_mut("", &mut |name, p| {
            let Some(g) = grads.get(&name) else { return };
            let m = first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.raw_dim()));
            m.zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            let v = second.entry(name).or_insert_with(|| Tensor::zeros(g.raw_dim()));
            v.zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let mut next = p.value().clone();
            ndarray::Zip::from(&mut next).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
            });
            *p = Var::param(next);
        });
    }
}
