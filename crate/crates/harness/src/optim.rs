//! AdamW with a cosine learning-rate schedule.

use dualscan_core::params::Parameterized;
use dualscan_core::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. Weight decay is decoupled and applied only to tensors of
    /// rank ≥ 2 (kernels and projection matrices), not to biases or scalars.
    pub fn step<T: Real, P: Parameterized<T>>(&mut self, params: &mut P, grads: &P, lr: f64) {
        let mut g: Vec<Tensor<T>> = Vec::new();
        grads.visit(&mut |_, t| g.push(t.clone()));
        if self.m.is_empty() {
            self.m = g.iter().map(|t| vec![0.0; t.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let (eps, wd) = (self.eps, self.weight_decay);
        let mut idx = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        params.visit_mut(&mut |_, p| {
            let (m, v, gt) = (&mut ms[idx], &mut vs[idx], &g[idx]);
            let decay = if p.rank() >= 2 { wd } else { 0.0 };
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = gt.data()[i].as_f64();
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let upd = (m[i] / c1) / ((v[i] / c2).sqrt() + eps) + decay * w.as_f64();
                *w -= T::lit(lr * upd);
            }
            idx += 1;
        });
    }
}

/// `lr_min + (lr_max - lr_min)(1 + cos(π t / T)) / 2`.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr_max;
    }
    let t = (step as f64 / total as f64).min(1.0);
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}
