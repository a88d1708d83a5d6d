use super::{Bound, Gradients, ParamSet, Tensor};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};

/// Adam with decoupled weight decay.
///
/// Decay applies to parameters of rank two or more; biases, norms and
/// other vectors are left undecayed.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(params: &ParamSet, weight_decay: f32) -> Self {
        let zeros = || params.ids().map(|id| vec![0.0; params.get(id).numel()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn with_betas(mut self, beta1: f32, beta2: f32) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update. Parameters without a gradient only decay.
    pub fn step(&mut self, params: &mut ParamSet, bound: &Bound, grads: &Gradients, lr: f32) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let i = id.index();
            let p = params.get_mut(id);
            let decay = if p.rank() >= 2 {
                1.0 - lr * self.weight_decay
            } else {
                1.0
            };
            let data = p.data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            match grads.get(bound[id]) {
                Some(g) => {
                    for (((w, m), v), &g) in data.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                        *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                        *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                        let update = (*m / c1) / ((*v / c2).sqrt() + self.eps);
                        *w = *w * decay - lr * update;
                    }
                }
                None => {
                    for ((w, m), v) in data.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m *= self.beta1;
                        *v *= self.beta2;
                        let update = (*m / c1) / ((*v / c2).sqrt() + self.eps);
                        *w = *w * decay - lr * update;
                    }
                }
            }
        }
    }

    pub fn save_into(&self, ckpt: &mut Checkpoint, prefix: &str) {
        ckpt.insert_scalar(format!("{prefix}step"), self.step as f32);
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            ckpt.insert(format!("{prefix}m.{i}"), Tensor::from_fn(&[m.len()], |j| m[j]));
            ckpt.insert(format!("{prefix}v.{i}"), Tensor::from_fn(&[v.len()], |j| v[j]));
        }
    }

    pub fn load_from(&mut self, ckpt: &Checkpoint, prefix: &str) -> Result<()> {
        self.step = ckpt.count(&format!("{prefix}step"))? as u64;
        for (i, (m, v)) in self.m.iter_mut().zip(self.v.iter_mut()).enumerate() {
            for (buf, tag) in [(m, "m"), (v, "v")] {
                let key = format!("{prefix}{tag}.{i}");
                let t = ckpt.require(&key)?;
                if t.numel() != buf.len() {
                    return Err(Error::Config(format!("optimizer state `{key}` has wrong size")));
                }
                buf.copy_from_slice(t.data());
            }
        }
        Ok(())
    }
}

/// Multiply the base rate by `gamma` once every `period` steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLr {
    pub base: f32,
    pub period: u64,
    pub gamma: f32,
}

impl StepLr {
    /// Rate for the zero-based step index `step`.
    pub fn at(&self, step: u64) -> f32 {
        self.base * self.gamma.powi((step / self.period.max(1)) as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    #[test]
    fn step_lr_decays_on_period_boundaries() {
        let s = StepLr {
            base: 1e-4,
            period: 1000,
            gamma: 0.8,
        };
        assert_eq!(s.at(0), 1e-4);
        assert_eq!(s.at(999), 1e-4);
        assert!((s.at(1000) - 0.8e-4).abs() < 1e-12);
        assert!((s.at(9999) - 1e-4 * 0.8f32.powi(9)).abs() < 1e-12);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut ps = ParamSet::new();
        let id = ps.add("w", Tensor::new(&[1, 2], vec![1.0, -1.0]).unwrap());
        let mut opt = AdamW::new(&ps, 0.0);
        let mut g = Graph::new();
        let b = ps.bind(&mut g, true);
        let y = g.sum(b[id]);
        let grads = g.backward(y).unwrap();
        opt.step(&mut ps, &b, &grads, 0.1);
        let w = ps.get(id).data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 1.1).abs() < 1e-6);
    }

    #[test]
    fn decay_is_decoupled_and_skips_vectors() {
        let mut ps = ParamSet::new();
        let w = ps.add("w", Tensor::full(&[2, 2], 1.0));
        let b = ps.add("b", Tensor::full(&[2], 1.0));
        let mut opt = AdamW::new(&ps, 0.5);
        let mut g = Graph::new();
        let bound = ps.bind(&mut g, true);
        let zero = g.scale(bound[w], 0.0);
        let y = g.sum(zero);
        let grads = g.backward(y).unwrap();
        opt.step(&mut ps, &bound, &grads, 0.1);
        assert!(ps.get(w).data().iter().all(|&v| (v - 0.95).abs() < 1e-7));
        assert!(ps.get(b).data().iter().all(|&v| v == 1.0));
    }
}
