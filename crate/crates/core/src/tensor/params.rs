use rand::RngExt;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// A [`ParamSet`] inserted into one graph.
pub struct Bound {
    vars: Vec<Var>,
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Insert every parameter into `g`, tracked or as constants.
    pub fn bind(&self, g: &mut Graph, track: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if track {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    pub fn save_into(&self, ckpt: &mut Checkpoint, prefix: &str) {
        for (name, t) in self.names.iter().zip(&self.tensors) {
            ckpt.insert(format!("{prefix}{name}"), t.clone());
        }
    }

    /// Overwrite every parameter from `ckpt`; shapes must match exactly.
    pub fn load_from(&mut self, ckpt: &Checkpoint, prefix: &str) -> Result<()> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let key = format!("{prefix}{name}");
            let stored = ckpt.require(&key)?;
            if stored.shape() != t.shape() {
                return Err(Error::Config(format!(
                    "checkpoint entry `{key}` has shape {:?}, model expects {:?}",
                    stored.shape(),
                    t.shape()
                )));
            }
            *t = stored.clone();
        }
        Ok(())
    }
}

/// Gaussian tensor with standard deviation `std` (Box-Muller).
pub fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f32) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let u1: f32 = rng.random_range(f32::EPSILON..1.0);
        let u2: f32 = rng.random_range(0.0..1.0);
        std * (-2.0 * u1.ln()).sqrt() * (std::f32::consts::TAU * u2).cos()
    })
}

/// He-style initialisation for a conv kernel `[out, in, kh, kw]`.
pub fn conv_kernel(rng: &mut ChaCha8Rng, out: usize, inp: usize, k: usize) -> Tensor {
    let fan_in = (inp * k * k) as f32;
    normal(rng, &[out, inp, k, k], (2.0 / fan_in).sqrt())
}

/// Dirac kernel: the convolution returns its input unchanged.
pub fn identity_kernel(channels: usize, k: usize) -> Tensor {
    let mut t = Tensor::zeros(&[channels, channels, k, k]);
    let centre = k / 2;
    for c in 0..channels {
        t.data_mut()[((c * channels + c) * k + centre) * k + centre] = 1.0;
    }
    t
}
