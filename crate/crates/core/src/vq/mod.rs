//! Multi-scale residual vector quantisation.
//!
//! Features `f[C, hK, wK]` are split into `K` token maps by repeatedly
//! quantising the downsampled residual `r_k = f - Σ_{i<k} η(x_i)`.

pub(crate) mod model;
mod train;

pub use model::{Recursion, VqConfig, VqModel};
pub use train::{codebook_usage, train_vqvae, VqTrainConfig, VqTrainReport};

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered token-map resolutions `s_1..s_K`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScaleSchedule {
    scales: Vec<(usize, usize)>,
}

impl ScaleSchedule {
    pub fn new(scales: Vec<(usize, usize)>) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::Schedule("schedule has no scales".into()));
        }
        if scales.iter().any(|&(h, w)| h == 0 || w == 0) {
            return Err(Error::Schedule(format!("zero extent in {scales:?}")));
        }
        if scales.windows(2).any(|p| p[1].0 < p[0].0 || p[1].1 < p[0].1) {
            return Err(Error::Schedule(format!("scales decrease in {scales:?}")));
        }
        Ok(Self { scales })
    }

    /// Powers of two from 1x1 up to `side`x`side`.
    pub fn geometric(side: usize) -> Result<Self> {
        if !side.is_power_of_two() {
            return Err(Error::Schedule(format!("{side} is not a power of two")));
        }
        let mut scales = vec![];
        let mut s = 1;
        while s <= side {
            scales.push((s, s));
            s *= 2;
        }
        Self::new(scales)
    }

    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }

    pub fn scale(&self, k: usize) -> (usize, usize) {
        self.scales[k]
    }

    pub fn scales(&self) -> &[(usize, usize)] {
        &self.scales
    }

    pub fn last(&self) -> (usize, usize) {
        *self.scales.last().expect("schedule is non-empty")
    }

    pub fn tokens(&self, k: usize) -> usize {
        self.scales[k].0 * self.scales[k].1
    }

    pub fn total_tokens(&self) -> usize {
        (0..self.len()).map(|k| self.tokens(k)).sum()
    }

    /// Position of scale `k`'s first token in the concatenated sequence.
    pub fn offset(&self, k: usize) -> usize {
        (0..k).map(|i| self.tokens(i)).sum()
    }

    /// Error unless `maps` has one conforming map per scale (or a prefix if `prefix`).
    pub fn check_maps(&self, maps: &[TokenMap], prefix: bool) -> Result<()> {
        if maps.len() > self.len() || (!prefix && maps.len() != self.len()) {
            return Err(Error::Schedule(format!(
                "{} token maps for schedule {self}",
                maps.len()
            )));
        }
        for (k, m) in maps.iter().enumerate() {
            if m.scale != k || (m.height, m.width) != self.scales[k] {
                return Err(Error::Schedule(format!(
                    "map {} is {}x{} at scale {}, schedule {self} expects {}x{}",
                    k + 1,
                    m.height,
                    m.width,
                    m.scale + 1,
                    self.scales[k].0,
                    self.scales[k].1
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for ScaleSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.scales.iter().map(|(h, w)| format!("{h}x{w}")).collect();
        write!(f, "[{}]", parts.join(","))
    }
}

/// Grid of codebook indices at one scale (zero-based `scale`).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenMap {
    pub scale: usize,
    pub height: usize,
    pub width: usize,
    pub indices: Vec<usize>,
}

impl TokenMap {
    pub fn new(scale: usize, height: usize, width: usize, indices: Vec<usize>) -> Result<Self> {
        if indices.len() != height * width {
            return Err(Error::shape(
                "token_map",
                format!("{} indices for {height}x{width}", indices.len()),
            ));
        }
        Ok(Self {
            scale,
            height,
            width,
            indices,
        })
    }

    pub fn filled(scale: usize, height: usize, width: usize, index: usize) -> Self {
        Self {
            scale,
            height,
            width,
            indices: vec![index; height * width],
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// `V` embedding vectors of dimension `C`, shared by every scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    vectors: Tensor,
}

impl Codebook {
    /// Rejects anything but `[V, C]` with pairwise distinct rows.
    pub fn new(vectors: Tensor) -> Result<Self> {
        if vectors.rank() != 2 || vectors.shape()[0] == 0 || vectors.shape()[1] == 0 {
            return Err(Error::shape(
                "codebook",
                format!("expected [V, C], got {:?}", vectors.shape()),
            ));
        }
        let cb = Self { vectors };
        if let Some((a, b)) = cb.duplicate_pair() {
            return Err(Error::Config(format!("codebook entries {a} and {b} coincide")));
        }
        Ok(cb)
    }

    pub fn size(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn entry(&self, j: usize) -> &[f32] {
        let c = self.dim();
        &self.vectors.data()[j * c..(j + 1) * c]
    }

    /// First pair of identical entries, if any.
    pub fn duplicate_pair(&self) -> Option<(usize, usize)> {
        (0..self.size()).find_map(|a| {
            (a + 1..self.size())
                .find(|&b| self.entry(a) == self.entry(b))
                .map(|b| (a, b))
        })
    }

    /// Index of the L2-nearest entry; the lowest index wins ties.
    pub fn nearest(&self, v: &[f32]) -> usize {
        let mut best = (0, f32::INFINITY);
        for j in 0..self.size() {
            let d: f32 = self.entry(j).iter().zip(v).map(|(e, x)| (e - x) * (e - x)).sum();
            if d < best.1 {
                best = (j, d);
            }
        }
        best.0
    }

    /// Embeddings of `map` as `[C, h, w]`.
    pub fn embed(&self, map: &TokenMap) -> Result<Tensor> {
        let (c, n) = (self.dim(), map.len());
        let mut out = vec![0.0; c * n];
        for (p, &j) in map.indices.iter().enumerate() {
            if j >= self.size() {
                return Err(Error::Index {
                    op: "embed",
                    index: j,
                    extent: self.size(),
                });
            }
            for (ch, &v) in self.entry(j).iter().enumerate() {
                out[ch * n + p] = v;
            }
        }
        Tensor::new(&[c, map.height, map.width], out)
    }
}

/// Nearest-entry index at every location of `features[C, h, w]`.
pub fn quantize(features: &Tensor, codebook: &Codebook, scale: usize) -> Result<TokenMap> {
    let (c, h, w) = match *features.shape() {
        [c, h, w] if c == codebook.dim() => (c, h, w),
        ref s => {
            return Err(Error::shape(
                "quantize",
                format!("features {s:?} for codebook dimension {}", codebook.dim()),
            ))
        }
    };
    let n = h * w;
    let data = features.data();
    let mut v = vec![0.0; c];
    let indices = (0..n)
        .map(|p| {
            for (ch, slot) in v.iter_mut().enumerate() {
                *slot = data[ch * n + p];
            }
            codebook.nearest(&v)
        })
        .collect();
    TokenMap::new(scale, h, w, indices)
}
