//! AdamW with decoupled weight decay and a warmup + cosine schedule.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Moments;
use crate::error::{CovarError, Result};
use crate::params::{Gradients, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub moments: Moments,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore<f32>) -> Self {
        let zeros = || params.iter().map(|(_, p)| Tensor::zeros(p.value.shape().to_vec())).collect();
        Self {
            config,
            moments: Moments {
                step: 0,
                m: zeros(),
                v: zeros(),
            },
        }
    }

    pub fn with_moments(config: AdamWConfig, moments: Moments, params: &ParamStore<f32>) -> Result<Self> {
        let ok = moments.m.len() == params.len()
            && params
                .iter()
                .zip(moments.m.iter().zip(&moments.v))
                .all(|((_, p), (m, v))| m.shape() == p.value.shape() && v.shape() == p.value.shape());
        if !ok {
            return Err(CovarError::Checkpoint("optimizer state does not match parameters".into()));
        }
        Ok(Self { config, moments })
    }

    /// One update with learning rate `lr`. Parameters without a gradient are
    /// left untouched (their moments do not advance either).
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &Gradients<f32>, lr: f64) {
        let c = self.config;
        self.moments.step += 1;
        let t = self.moments.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let step_size = (lr / bc1) as f32;
        let inv_bc2_sqrt = (1.0 / bc2.sqrt()) as f32;
        let (eps, lr32) = (c.eps as f32, lr as f32);
        let ids: Vec<_> = params.iter().map(|(id, p)| (id, p.decay)).collect();
        for (id, decay) in ids {
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            let (m, v) = (&mut self.moments.m[i], &mut self.moments.v[i]);
            let p = params.get_mut(id);
            let wd = if decay { lr32 * c.weight_decay as f32 } else { 0.0 };
            for (((x, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *x -= wd * *x;
                *x -= step_size * *m / (v.sqrt() * inv_bc2_sqrt + eps);
            }
        }
    }
}

/// Linear warmup to `peak` over `warmup` steps, then cosine decay to zero at
/// `total`.
pub fn learning_rate(step: u64, peak: f64, warmup: u64, total: u64) -> f64 {
    if step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Scales gradients so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients<f32>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale((max_norm / (norm + 1e-12)) as f32);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_shape() {
        assert!((learning_rate(0, 1.0, 10, 100) - 0.1).abs() < 1e-12);
        assert!((learning_rate(9, 1.0, 10, 100) - 1.0).abs() < 1e-12);
        assert!((learning_rate(10, 1.0, 10, 100) - 1.0).abs() < 1e-12);
        assert!((learning_rate(55, 1.0, 10, 100) - 0.5).abs() < 1e-12);
        assert!(learning_rate(100, 1.0, 10, 100).abs() < 1e-12);
    }

    /// Scalar reference implementation of one AdamW step.
    #[test]
    fn matches_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let w = store.add("w", &[2, 2], crate::params::Init::TruncNormal(1.0), &mut rng);
        let b = store.add("b", &[2], crate::params::Init::Ones, &mut rng);
        let before: Vec<f32> = store.get(w).data().to_vec();
        let cfg = AdamWConfig::default();
        let mut opt = AdamW::new(cfg, &store);
        let grads = {
            let mut g = Graph::new(&store);
            let (wv, bv) = (g.param(w), g.param(b));
            let s = g.mul(wv, wv).unwrap();
            let s = g.add(s, bv).unwrap();
            let l = g.sum(s);
            g.backward(l).unwrap().params
        };
        opt.step(&mut store, &grads, 0.1);
        for (i, &x) in before.iter().enumerate() {
            let gr = 2.0 * x as f64;
            let m = 0.1 * gr / (1.0 - 0.9);
            let v = 0.05 * gr * gr / (1.0 - 0.95);
            let mut want = x as f64 * (1.0 - 0.1 * 0.01);
            want -= 0.1 * m / (v.sqrt() + 1e-8);
            assert!((store.get(w).data()[i] as f64 - want).abs() < 1e-5);
        }
        // biases: no decay, gradient 1 → moves by lr
        for &v in store.get(b).data() {
            assert!((v as f64 - 0.9).abs() < 1e-5);
        }
    }
}
