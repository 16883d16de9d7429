//! Adaptive-moment optimizer with decoupled weight decay.

use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip, if any.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter that has a gradient.
    /// Returns the global gradient norm before clipping.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Tensor>]) -> f64 {
        assert_eq!(grads.len(), params.len(), "one gradient slot per parameter");
        self.m.resize(params.len(), None);
        self.v.resize(params.len(), None);
        self.step += 1;
        let c = self.cfg;
        let norm = grads
            .iter()
            .flatten()
            .flat_map(|g| g.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        let clip = match c.clip_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for id in params.ids().collect::<Vec<_>>() {
            let i = id.index();
            let Some(g) = &grads[i] else { continue };
            if !params.is_trainable(id) {
                continue;
            }
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let p = params.get_mut(id);
            for (((pp, &gg), mm), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gg = gg * clip;
                *mm = c.beta1 * *mm + (1.0 - c.beta1) * gg;
                *vv = c.beta2 * *vv + (1.0 - c.beta2) * gg * gg;
                let mhat = *mm / bc1;
                let vhat = *vv / bc2;
                *pp -= c.lr * c.weight_decay * *pp;
                *pp -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    #[test]
    fn minimizes_a_quadratic() {
        let mut ps = ParamSet::new();
        let id = ps.add("x", Tensor::from_vec(vec![3.0, -2.0]), true);
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.05,
            ..Default::default()
        });
        for _ in 0..2000 {
            let mut tape = Tape::new();
            let b = ps.bind(&mut tape);
            let sq = tape.square(b[id]);
            let l = tape.sum(sq);
            let mut g = tape.backward(l).unwrap();
            let grads = b.collect(&mut g);
            opt.step(&mut ps, &grads);
        }
        assert!(ps.get(id).data().iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn frozen_parameters_are_untouched() {
        let mut ps = ParamSet::new();
        let a = ps.add("a", Tensor::from_vec(vec![1.0]), false);
        let b = ps.add("b", Tensor::from_vec(vec![1.0]), true);
        let before = ps.get(a).clone();
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.1,
            ..Default::default()
        });
        let grads = vec![Some(Tensor::from_vec(vec![1.0])), Some(Tensor::from_vec(vec![1.0]))];
        opt.step(&mut ps, &grads);
        assert!(ps.get(a).bit_eq(&before));
        assert!(ps.get(b).item() < 1.0);
    }
}
