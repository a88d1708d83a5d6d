//! Next-scale autoregressive transformer over depth token maps,
//! conditioned on the image token maps of every scale.
//!
//! The sequence is `[image scales 1..K][depth scales 1..K]`. Image
//! positions see only image positions; depth positions at scale `k` see
//! every image position and depth positions at scales `<= k`. The input
//! for depth scale `k` is built from predictions at scales `< k` only.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::ops::Range;
use std::path::Path;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::tensor::{normal, AttentionMask, Bound, Graph, ParamId, ParamSet, Tensor, Var};
use crate::vq::{ScaleSchedule, TokenMap, VqModel};

#[derive(Clone, Debug, PartialEq)]
pub struct VarConfig {
    pub blocks: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Codebook size `V` and dimension `C` of the frozen autoencoder.
    pub vocab: usize,
    pub code_dim: usize,
    pub schedule: ScaleSchedule,
}

impl VarConfig {
    /// Desk-scale transformer sized for `vq`.
    pub fn for_vq(vq: &VqModel) -> Self {
        Self {
            blocks: 4,
            width: 128,
            heads: 4,
            mlp_ratio: 4,
            vocab: vq.config().codebook_size,
            code_dim: vq.config().channels,
            schedule: vq.schedule().clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.width == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("transformer sizes must be positive".into()));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }

    /// Length of the image prefix (all scales).
    pub fn image_len(&self) -> usize {
        self.schedule.total_tokens()
    }

    /// Depth positions covering scales `0..scales`.
    pub fn depth_len(&self, scales: usize) -> usize {
        self.schedule.offset(scales)
    }

    fn save_into(&self, ckpt: &mut Checkpoint) {
        for (key, v) in [
            ("var.blocks", self.blocks),
            ("var.width", self.width),
            ("var.heads", self.heads),
            ("var.mlp_ratio", self.mlp_ratio),
            ("var.vocab", self.vocab),
            ("var.code_dim", self.code_dim),
        ] {
            ckpt.insert_scalar(key, v as f32);
        }
        crate::vq::model::save_schedule(ckpt, "var.", &self.schedule);
    }

    fn load_from(ckpt: &Checkpoint) -> Result<Self> {
        let cfg = Self {
            blocks: ckpt.count("var.blocks")?,
            width: ckpt.count("var.width")?,
            heads: ckpt.count("var.heads")?,
            mlp_ratio: ckpt.count("var.mlp_ratio")?,
            vocab: ckpt.count("var.vocab")?,
            code_dim: ckpt.count("var.code_dim")?,
            schedule: crate::vq::model::load_schedule(ckpt, "var.")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Block-causal mask for the image prefix plus depth scales `0..scales`.
pub fn sequence_mask(schedule: &ScaleSchedule, scales: usize) -> Result<AttentionMask> {
    let image = schedule.total_tokens();
    let mut scale_of = Vec::with_capacity(image + schedule.offset(scales));
    for k in 0..scales {
        scale_of.extend(std::iter::repeat_n(k, schedule.tokens(k)));
    }
    AttentionMask::from_fn(image + scale_of.len(), |q, key| {
        if key < image {
            true
        } else if q < image {
            false
        } else {
            scale_of[key - image] <= scale_of[q - image]
        }
    })
}

/// Frozen-feature inputs for one sample: codebook vectors of every image
/// token, and the accumulated-prediction features for depth scales `1..n`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleInputs {
    /// `[image_len, C]`.
    pub image: Tensor,
    /// Entry `j` is `S(Σ_{i<=j} η(z_i), s_{j+1})` as `[tokens, C]`.
    pub depth: Vec<Tensor>,
}

impl SampleInputs {
    /// Number of depth scales this input covers.
    pub fn scales(&self) -> usize {
        self.depth.len() + 1
    }

    /// Digest of every feature bit, for exposure-alignment checks.
    pub fn digest(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for t in std::iter::once(&self.image).chain(&self.depth) {
            t.shape().hash(&mut h);
            for v in t.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

fn rows_of(x: &Tensor) -> Tensor {
    // [C, h, w] -> [h*w, C]
    let c = x.shape()[0];
    let n = x.numel() / c;
    Tensor::from_fn(&[n, c], |i| x.data()[(i % c) * n + i / c])
}

/// Inputs for predicting depth scale `prev_depth.len()` (zero-based).
pub fn build_inputs(prev_depth: &[TokenMap], image: &[TokenMap], vq: &VqModel) -> Result<SampleInputs> {
    let schedule = vq.schedule();
    schedule.check_maps(image, false)?;
    if prev_depth.len() >= schedule.len() {
        return Err(Error::Schedule(format!(
            "{} previous depth maps leave nothing to predict in {schedule}",
            prev_depth.len()
        )));
    }
    schedule.check_maps(prev_depth, true)?;
    let image_rows: Vec<Tensor> = image
        .iter()
        .map(|m| vq.codebook().embed(m).map(|e| rows_of(&e)))
        .collect::<Result<_>>()?;
    let c = vq.config().channels;
    let n: usize = image_rows.iter().map(|t| t.shape()[0]).sum();
    let image = Tensor::new(
        &[n, c],
        image_rows.iter().flat_map(|t| t.data().iter().copied()).collect(),
    )?;
    let sums = vq.partial_sums(prev_depth)?;
    let depth = (1..=prev_depth.len())
        .map(|j| rows_of(&crate::vq::model::resize(&sums[j], schedule.scale(j))))
        .collect();
    Ok(SampleInputs { image, depth })
}

type Linear = (ParamId, ParamId);
type Norm = (ParamId, ParamId);

#[derive(Clone, Debug)]
struct Block {
    ln1: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    ln2: Norm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
struct Layers {
    image_in: Linear,
    depth_in: Linear,
    start: ParamId,
    scale_emb: ParamId,
    segment_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    ln_f: Norm,
    head: Linear,
}

/// Transformer weights plus a count of forward passes taken.
#[derive(Debug)]
pub struct VarModel {
    config: VarConfig,
    params: ParamSet,
    layers: Layers,
    forwards: AtomicUsize,
}

impl Clone for VarModel {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            layers: self.layers.clone(),
            forwards: AtomicUsize::new(self.forward_count()),
        }
    }
}

/// Greedy predictions plus the inputs consumed by the final step.
#[derive(Clone, Debug)]
pub struct Inference {
    pub maps: Vec<Vec<TokenMap>>,
    pub final_inputs: Vec<SampleInputs>,
}

impl VarModel {
    pub fn new(config: VarConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let d = config.width;
        let hidden = d * config.mlp_ratio;
        let resid_std = 0.02 / (2.0 * config.blocks as f32).sqrt();
        let linear = |ps: &mut ParamSet, name: &str, i: usize, o: usize, std: f32, rng: &mut ChaCha8Rng| {
            (
                ps.add(format!("{name}.w"), normal(rng, &[i, o], std)),
                ps.add(format!("{name}.b"), Tensor::zeros(&[o])),
            )
        };
        let norm = |ps: &mut ParamSet, name: &str| {
            (
                ps.add(format!("{name}.g"), Tensor::full(&[d], 1.0)),
                ps.add(format!("{name}.b"), Tensor::zeros(&[d])),
            )
        };
        let c = config.code_dim;
        let image_in = linear(&mut params, "image_in", c, d, (1.0 / c as f32).sqrt(), &mut rng);
        let depth_in = linear(&mut params, "depth_in", c, d, (1.0 / c as f32).sqrt(), &mut rng);
        let start = params.add("start", normal(&mut rng, &[1, d], 0.02));
        let scale_emb = params.add("scale_emb", normal(&mut rng, &[config.schedule.len(), d], 0.02));
        let segment_emb = params.add("segment_emb", normal(&mut rng, &[2, d], 0.02));
        let pos_emb = params.add("pos_emb", normal(&mut rng, &[config.image_len(), d], 0.02));
        let blocks = (0..config.blocks)
            .map(|l| {
                let p = format!("block.{l}");
                Block {
                    ln1: norm(&mut params, &format!("{p}.ln1")),
                    q: linear(&mut params, &format!("{p}.q"), d, d, 0.02, &mut rng),
                    k: linear(&mut params, &format!("{p}.k"), d, d, 0.02, &mut rng),
                    v: linear(&mut params, &format!("{p}.v"), d, d, 0.02, &mut rng),
                    proj: linear(&mut params, &format!("{p}.proj"), d, d, resid_std, &mut rng),
                    ln2: norm(&mut params, &format!("{p}.ln2")),
                    fc1: linear(&mut params, &format!("{p}.fc1"), d, hidden, 0.02, &mut rng),
                    fc2: linear(&mut params, &format!("{p}.fc2"), hidden, d, resid_std, &mut rng),
                }
            })
            .collect();
        let ln_f = norm(&mut params, "ln_f");
        let head = linear(&mut params, "head", d, config.vocab, 0.02, &mut rng);
        Ok(Self {
            config,
            params,
            layers: Layers {
                image_in,
                depth_in,
                start,
                scale_emb,
                segment_emb,
                pos_emb,
                blocks,
                ln_f,
                head,
            },
            forwards: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &VarConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn start_embedding(&self) -> &Tensor {
        self.params.get(self.layers.start)
    }

    /// Forward passes run so far (any graph, any batch).
    pub fn forward_count(&self) -> usize {
        self.forwards.load(Ordering::Relaxed)
    }

    /// Error unless `vq` matches this model's vocabulary and schedule.
    pub fn check_vq(&self, vq: &VqModel) -> Result<()> {
        if vq.schedule() != &self.config.schedule {
            return Err(Error::Schedule(format!(
                "transformer schedule {} does not match autoencoder schedule {}",
                self.config.schedule,
                vq.schedule()
            )));
        }
        if vq.config().codebook_size != self.config.vocab || vq.config().channels != self.config.code_dim {
            return Err(Error::Config(format!(
                "transformer expects a [{}, {}] codebook, autoencoder has [{}, {}]",
                self.config.vocab,
                self.config.code_dim,
                vq.config().codebook_size,
                vq.config().channels
            )));
        }
        Ok(())
    }

    /// Content embeddings (before position, scale and segment terms) of one sample, `[T, D]`.
    pub fn content_on(&self, g: &mut Graph, p: &Bound, inputs: &SampleInputs) -> Result<Var> {
        let l = &self.layers;
        let img = g.constant(inputs.image.clone());
        let mut parts = vec![g.linear(img, p[l.image_in.0], p[l.image_in.1])?, p[l.start]];
        for feat in &inputs.depth {
            let x = g.constant(feat.clone());
            parts.push(g.linear(x, p[l.depth_in.0], p[l.depth_in.1])?);
        }
        g.concat_rows(&parts)
    }

    /// Position, scale and segment terms for sequence rows `rows`.
    fn extra_on(&self, g: &mut Graph, p: &Bound, rows: Range<usize>) -> Result<Var> {
        let cfg = &self.config;
        let img_len = cfg.image_len();
        let mut pos = Vec::with_capacity(rows.len());
        let mut scale_ix = Vec::with_capacity(rows.len());
        let mut segment = Vec::with_capacity(rows.len());
        for i in rows {
            let j = if i < img_len { i } else { i - img_len };
            pos.push(j);
            scale_ix.push(
                (0..cfg.schedule.len())
                    .rposition(|k| cfg.schedule.offset(k) <= j)
                    .unwrap_or(0),
            );
            segment.push(usize::from(i >= img_len));
        }
        let l = &self.layers;
        let pe = g.embedding(p[l.pos_emb], &pos)?;
        let se = g.embedding(p[l.scale_emb], &scale_ix)?;
        let ge = g.embedding(p[l.segment_emb], &segment)?;
        g.add_all(&[pe, se, ge])
    }

    /// Transformer blocks over `h`, which holds the last `n` positions of
    /// `batch` sequences of mask size. Without a cache `n` is the full
    /// length; with one, keys and values of earlier positions come from
    /// `cache` and are extended with the new rows.
    fn blocks_on(
        &self,
        g: &mut Graph,
        p: &Bound,
        mut h: Var,
        batch: usize,
        mask: &Rc<AttentionMask>,
        mut cache: Option<&mut [Option<(Var, Var)>]>,
    ) -> Result<Var> {
        let n = g.value(h).shape()[0] / batch;
        for (i, b) in self.layers.blocks.iter().enumerate() {
            let x = g.layer_norm(h, p[b.ln1.0], p[b.ln1.1])?;
            let q = g.linear(x, p[b.q.0], p[b.q.1])?;
            let mut k = g.linear(x, p[b.k.0], p[b.k.1])?;
            let mut v = g.linear(x, p[b.v.0], p[b.v.1])?;
            if let Some(cache) = cache.as_deref_mut() {
                if let Some((kc, vc)) = cache[i] {
                    k = extend_rows(g, kc, k, batch, n)?;
                    v = extend_rows(g, vc, v, batch, n)?;
                }
                cache[i] = Some((k, v));
            }
            let a = g.attention_tail(q, k, v, self.config.heads, Rc::clone(mask))?;
            let a = g.linear(a, p[b.proj.0], p[b.proj.1])?;
            h = g.add(h, a)?;
            let x = g.layer_norm(h, p[b.ln2.0], p[b.ln2.1])?;
            let x = g.linear(x, p[b.fc1.0], p[b.fc1.1])?;
            let x = g.gelu(x);
            let x = g.linear(x, p[b.fc2.0], p[b.fc2.1])?;
            h = g.add(h, x)?;
        }
        Ok(h)
    }

    /// Final norm and head over the last `n` of every `t` rows of `h`.
    fn head_on(&self, g: &mut Graph, p: &Bound, h: Var, batch: usize, t: usize, n: usize) -> Result<Var> {
        let l = &self.layers;
        let rows = (0..batch)
            .map(|i| g.slice_rows(h, (i + 1) * t - n, n))
            .collect::<Result<Vec<_>>>()?;
        let h = g.concat_rows(&rows)?;
        let h = g.layer_norm(h, p[l.ln_f.0], p[l.ln_f.1])?;
        g.linear(h, p[l.head.0], p[l.head.1])
    }

    /// Logits `[B * depth_len(scales), V]` for a batch that shares one
    /// depth-scale count, ordered sample-major then by position.
    pub fn forward_on(&self, g: &mut Graph, p: &Bound, batch: &[SampleInputs]) -> Result<Var> {
        let cfg = &self.config;
        let Some(first) = batch.first() else {
            return Err(Error::shape("forward", "empty batch".to_string()));
        };
        let scales = first.scales();
        if scales > cfg.schedule.len() || batch.iter().any(|s| s.scales() != scales) {
            return Err(Error::Schedule(format!(
                "batch inputs must share a depth-scale count within {}",
                cfg.schedule
            )));
        }
        self.forwards.fetch_add(1, Ordering::Relaxed);
        let dep_len = cfg.depth_len(scales);
        let t = cfg.image_len() + dep_len;
        let extra = self.extra_on(g, p, 0..t)?;
        let mut rows = Vec::with_capacity(batch.len());
        for s in batch {
            let content = self.content_on(g, p, s)?;
            rows.push(g.add(content, extra)?);
        }
        let h = g.concat_rows(&rows)?;
        let mask = Rc::new(sequence_mask(&cfg.schedule, scales)?);
        let h = self.blocks_on(g, p, h, batch.len(), &mask, None)?;
        self.head_on(g, p, h, batch.len(), t, dep_len)
    }

    /// Untracked logits for one batch, `[B * depth_len, V]`.
    pub fn forward(&self, batch: &[SampleInputs]) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let out = self.forward_on(&mut g, &p, batch)?;
        Ok(g.value(out).clone())
    }

    /// Greedy next-scale decoding for each sample's image maps.
    ///
    /// Each scale is one forward pass over the new positions only; keys and
    /// values of earlier positions are reused, which the block-causal mask
    /// makes equivalent to re-running the whole prefix.
    pub fn infer(&self, images: &[Vec<TokenMap>], vq: &VqModel) -> Result<Inference> {
        self.check_vq(vq)?;
        if images.is_empty() {
            return Err(Error::shape("infer", "empty batch".to_string()));
        }
        let cfg = &self.config;
        let schedule = &cfg.schedule;
        let (l, batch, img_len) = (&self.layers, images.len(), cfg.image_len());
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let mut cache = vec![None; l.blocks.len()];
        let mut maps: Vec<Vec<TokenMap>> = vec![Vec::with_capacity(schedule.len()); batch];
        let mut inputs = Vec::new();
        for k in 0..schedule.len() {
            inputs = maps
                .iter()
                .zip(images)
                .map(|(prev, img)| build_inputs(prev, img, vq))
                .collect::<Result<Vec<_>>>()?;
            self.forwards.fetch_add(1, Ordering::Relaxed);
            let t = img_len + cfg.depth_len(k + 1);
            let first = if k == 0 { 0 } else { img_len + schedule.offset(k) };
            let extra = self.extra_on(&mut g, &p, first..t)?;
            let mut rows = Vec::with_capacity(batch);
            for s in &inputs {
                let content = if k == 0 {
                    self.content_on(&mut g, &p, s)?
                } else {
                    let x = g.constant(s.depth[k - 1].clone());
                    g.linear(x, p[l.depth_in.0], p[l.depth_in.1])?
                };
                rows.push(g.add(content, extra)?);
            }
            let h = g.concat_rows(&rows)?;
            let mask = Rc::new(sequence_mask(schedule, k + 1)?);
            let h = self.blocks_on(&mut g, &p, h, batch, &mask, Some(&mut cache))?;
            let n = schedule.tokens(k);
            let logits = self.head_on(&mut g, &p, h, batch, t - first, n)?;
            let (h, w) = schedule.scale(k);
            let v = cfg.vocab;
            let data = g.value(logits).data();
            for (b, m) in maps.iter_mut().enumerate() {
                let indices = (0..n).map(|i| argmax(&data[(b * n + i) * v..][..v])).collect();
                m.push(TokenMap::new(k, h, w, indices)?);
            }
        }
        Ok(Inference {
            maps,
            final_inputs: inputs,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        self.config.save_into(&mut ckpt);
        self.params.save_into(&mut ckpt, "var.");
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut model = Self::new(VarConfig::load_from(ckpt)?, 0)?;
        model.params.load_from(ckpt, "var.")?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Per sample, earlier rows from `cache` (`[B * tp, D]`) followed by the
/// `n` new rows from `new` (`[B * n, D]`).
fn extend_rows(g: &mut Graph, cache: Var, new: Var, batch: usize, n: usize) -> Result<Var> {
    let tp = g.value(cache).shape()[0] / batch;
    let mut parts = Vec::with_capacity(2 * batch);
    for b in 0..batch {
        parts.push(g.slice_rows(cache, b * tp, tp)?);
        parts.push(g.slice_rows(new, b * n, n)?);
    }
    g.concat_rows(&parts)
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests;
