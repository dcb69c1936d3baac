use serde::{Deserialize, Serialize};

use super::{Mat, ParamId, ParamStore, Real};

/// Per-parameter gradient accumulator.
#[derive(Debug, Clone)]
pub struct Grads<T> {
    slots: Vec<Option<Mat<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn new(n_params: usize) -> Self {
        Grads {
            slots: vec![None; n_params],
        }
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Mat<T>) {
        match &mut self.slots[id.0] {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat<T>> {
        self.slots[id.0].as_ref()
    }

    pub fn clear(&mut self) {
        self.slots.iter_mut().for_each(|s| *s = None);
    }

    pub fn scale(&mut self, s: T) {
        for g in self.slots.iter_mut().flatten() {
            g.scale(s);
        }
    }

    pub fn norm(&self) -> T {
        self.slots
            .iter()
            .flatten()
            .map(Mat::sum_sq)
            .sum::<T>()
            .sqrt()
    }
}

/// Rescale so the global norm is at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut Grads<T>, max_norm: T) -> T {
    let norm = grads.norm();
    if norm > max_norm && norm > T::zero() {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Decay weights directly (AdamW) instead of through the gradient.
    pub decoupled_weight_decay: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            decoupled_weight_decay: false,
        }
    }
}

/// Adam / AdamW restricted to a set of trainable parameters. Parameters
/// outside the set are never written.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    trainable: Vec<ParamId>,
    m: Vec<Mat<T>>,
    v: Vec<Mat<T>>,
    step: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig, store: &ParamStore<T>, trainable: Vec<ParamId>) -> Self {
        let m = trainable
            .iter()
            .map(|&id| {
                let (r, c) = store.get(id).shape();
                Mat::zeros(r, c)
            })
            .collect::<Vec<_>>();
        Adam {
            cfg,
            v: m.clone(),
            m,
            trainable,
            step: 0,
        }
    }

    pub fn trainable(&self) -> &[ParamId] {
        &self.trainable
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>, lr_scale: f64) {
        self.step += 1;
        let c = self.cfg;
        let lr = c.lr * lr_scale;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let step_size = T::from_f64(lr / bc1);
        let inv_sqrt_bc2 = T::from_f64(1.0 / bc2.sqrt());
        let eps = T::from_f64(c.eps);
        let wd = T::from_f64(c.weight_decay);
        let decay = T::from_f64(1.0 - lr * c.weight_decay);

        for (slot, &id) in self.trainable.iter().enumerate() {
            let Some(g) = grads.get(id) else { continue };
            let p = store.get_mut(id);
            if c.decoupled_weight_decay && c.weight_decay != 0.0 {
                p.scale(decay);
            }
            let m = self.m[slot].as_mut_slice();
            let v = self.v[slot].as_mut_slice();
            for (((pi, &gi), mi), vi) in p
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let gi = if !c.decoupled_weight_decay && c.weight_decay != 0.0 {
                    gi + wd * *pi
                } else {
                    gi
                };
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                *pi -= step_size * *mi / ((*vi).sqrt() * inv_sqrt_bc2 + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_a_quadratic_and_respects_the_trainable_set() {
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", Mat::from_vec(1, 2, vec![3.0, -2.0]));
        let frozen = store.add("frozen", Mat::from_vec(1, 1, vec![5.0]));
        let cfg = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        let mut opt = Adam::new(cfg, &store, vec![x]);
        for _ in 0..500 {
            let mut g = Grads::new(store.len());
            g.accumulate(x, &store.get(x).map(|v| 2.0 * v));
            g.accumulate(frozen, &Mat::from_vec(1, 1, vec![1.0]));
            opt.step(&mut store, &g, 1.0);
        }
        assert!(store.get(x).as_slice().iter().all(|v| v.abs() < 1e-2));
        assert_eq!(store.get(frozen).as_slice(), &[5.0]);
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut g = Grads::<f64>::new(2);
        g.accumulate(ParamId(0), &Mat::from_vec(1, 2, vec![3.0, 4.0]));
        let before = clip_grad_norm(&mut g, 1.0);
        assert_eq!(before, 5.0);
        assert!((g.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient_signal() {
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", Mat::from_vec(1, 1, vec![1.0]));
        let cfg = AdamConfig {
            lr: 0.1,
            weight_decay: 0.5,
            decoupled_weight_decay: true,
            ..Default::default()
        };
        let mut opt = Adam::new(cfg, &store, vec![x]);
        let mut g = Grads::new(1);
        g.accumulate(x, &Mat::from_vec(1, 1, vec![0.0]));
        opt.step(&mut store, &g, 1.0);
        assert!((store.get(x).get(0, 0) - 0.95).abs() < 1e-12);
    }
}
