use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{quantize, Codebook, ScaleSchedule, TokenMap};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::tensor::{conv_kernel, identity_kernel, normal, Bound, Graph, ParamId, ParamSet, Tensor, Var};

/// Autoencoder hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct VqConfig {
    pub image_size: usize,
    pub channels: usize,
    pub codebook_size: usize,
    /// Hidden widths of the three encoder blocks (mirrored by the decoder).
    pub widths: [usize; 3],
    pub schedule: ScaleSchedule,
}

impl Default for VqConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 16,
            codebook_size: 64,
            widths: [32, 48, 64],
            schedule: ScaleSchedule::geometric(8).expect("8 is a power of two"),
        }
    }
}

impl VqConfig {
    /// Encoder output side: the raster is downsampled twice by two.
    pub fn latent_size(&self) -> (usize, usize) {
        (self.image_size / 4, self.image_size / 4)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "image size {} must be a positive multiple of 4",
                self.image_size
            )));
        }
        if self.channels == 0 || self.codebook_size < 2 || self.widths.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.schedule.last() != self.latent_size() {
            return Err(Error::Schedule(format!(
                "schedule {} must end at the encoder output {}x{}",
                self.schedule,
                self.latent_size().0,
                self.latent_size().1
            )));
        }
        Ok(())
    }

    fn save_into(&self, ckpt: &mut Checkpoint) {
        ckpt.insert_scalar("vq.image_size", self.image_size as f32);
        ckpt.insert_scalar("vq.channels", self.channels as f32);
        ckpt.insert_scalar("vq.codebook_size", self.codebook_size as f32);
        for (i, w) in self.widths.iter().enumerate() {
            ckpt.insert_scalar(format!("vq.width.{i}"), *w as f32);
        }
        save_schedule(ckpt, "vq.", &self.schedule);
    }

    fn load_from(ckpt: &Checkpoint) -> Result<Self> {
        let cfg = Self {
            image_size: ckpt.count("vq.image_size")?,
            channels: ckpt.count("vq.channels")?,
            codebook_size: ckpt.count("vq.codebook_size")?,
            widths: [
                ckpt.count("vq.width.0")?,
                ckpt.count("vq.width.1")?,
                ckpt.count("vq.width.2")?,
            ],
            schedule: load_schedule(ckpt, "vq.")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub(crate) fn save_schedule(ckpt: &mut Checkpoint, prefix: &str, s: &ScaleSchedule) {
    ckpt.insert_scalar(format!("{prefix}scales"), s.len() as f32);
    for (k, (h, w)) in s.scales().iter().enumerate() {
        ckpt.insert_scalar(format!("{prefix}scale.{k}.h"), *h as f32);
        ckpt.insert_scalar(format!("{prefix}scale.{k}.w"), *w as f32);
    }
}

pub(crate) fn load_schedule(ckpt: &Checkpoint, prefix: &str) -> Result<ScaleSchedule> {
    let n = ckpt.count(&format!("{prefix}scales"))?;
    let scales = (0..n)
        .map(|k| {
            Ok((
                ckpt.count(&format!("{prefix}scale.{k}.h"))?,
                ckpt.count(&format!("{prefix}scale.{k}.w"))?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    ScaleSchedule::new(scales)
}

type Conv = (ParamId, ParamId);

#[derive(Clone, Debug)]
struct Layers {
    enc: [Conv; 4],
    dec: [Conv; 4],
    eta: Conv,
}

/// Encoder, decoder, shared composition conv and codebook.
#[derive(Clone, Debug)]
pub struct VqModel {
    config: VqConfig,
    params: ParamSet,
    layers: Layers,
    codebook: Codebook,
}

/// Everything the residual recursion produces for one feature map.
#[derive(Clone, Debug)]
pub struct Recursion {
    /// `Q[S(r_k, s_k)]` at every scale.
    pub quantized: Vec<TokenMap>,
    /// `r_1..r_{K+1}`.
    pub residuals: Vec<Tensor>,
    /// `Σ_{i<k} η(m_i)` for `k = 1..K+1`, where `m_i` are the maps fed back.
    pub partial_sums: Vec<Tensor>,
}

impl VqModel {
    pub fn new(config: VqConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let [w0, w1, w2] = config.widths;
        let c = config.channels;
        let mut conv = |name: &str, out: usize, inp: usize, k: usize, rng: &mut ChaCha8Rng| {
            (
                params.add(format!("{name}.w"), conv_kernel(rng, out, inp, k)),
                params.add(format!("{name}.b"), Tensor::zeros(&[out])),
            )
        };
        let enc = [
            conv("enc.0", w0, 1, 3, &mut rng),
            conv("enc.1", w1, w0, 3, &mut rng),
            conv("enc.2", w2, w1, 3, &mut rng),
            conv("enc.3", c, w2, 1, &mut rng),
        ];
        let dec = [
            conv("dec.0", w2, c, 3, &mut rng),
            conv("dec.1", w1, w2, 3, &mut rng),
            conv("dec.2", w0, w1, 3, &mut rng),
            conv("dec.3", 1, w0, 3, &mut rng),
        ];
        let eta = (
            params.add("eta.w", identity_kernel(c, 3)),
            params.add("eta.b", Tensor::zeros(&[c])),
        );
        let codebook = Codebook::new(normal(&mut rng, &[config.codebook_size, c], 1.0))?;
        Ok(Self {
            config,
            params,
            layers: Layers { enc, dec, eta },
            codebook,
        })
    }

    pub fn config(&self) -> &VqConfig {
        &self.config
    }

    pub fn schedule(&self) -> &ScaleSchedule {
        &self.config.schedule
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    pub fn set_codebook(&mut self, codebook: Codebook) -> Result<()> {
        if codebook.size() != self.config.codebook_size || codebook.dim() != self.config.channels {
            return Err(Error::shape(
                "set_codebook",
                format!("[{}, {}] codebook for this model", codebook.size(), codebook.dim()),
            ));
        }
        self.codebook = codebook;
        Ok(())
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Composition conv weight and bias.
    pub fn eta_conv(&self) -> (&Tensor, &Tensor) {
        (self.params.get(self.layers.eta.0), self.params.get(self.layers.eta.1))
    }

    pub fn set_eta_conv(&mut self, w: Tensor, b: Tensor) -> Result<()> {
        let (cw, cb) = self.eta_conv();
        if w.shape() != cw.shape() || b.shape() != cb.shape() {
            return Err(Error::shape(
                "set_eta_conv",
                "weights do not match the model".to_string(),
            ));
        }
        *self.params.get_mut(self.layers.eta.0) = w;
        *self.params.get_mut(self.layers.eta.1) = b;
        Ok(())
    }

    fn conv(g: &mut Graph, p: &Bound, l: Conv, x: Var, stride: usize, pad: usize) -> Result<Var> {
        g.conv2d(x, p[l.0], p[l.1], stride, pad)
    }

    /// `x[1, H, W]` to features `[C, hK, wK]` on `g`.
    pub fn encode_on(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let e = &self.layers.enc;
        let mut h = Self::conv(g, p, e[0], x, 1, 1)?;
        h = g.gelu(h);
        h = Self::conv(g, p, e[1], h, 2, 1)?;
        h = g.gelu(h);
        h = Self::conv(g, p, e[2], h, 2, 1)?;
        h = g.gelu(h);
        Self::conv(g, p, e[3], h, 1, 0)
    }

    /// Features `[C, hK, wK]` to a raster `[1, H, W]` on `g`.
    pub fn decode_on(&self, g: &mut Graph, p: &Bound, f: Var) -> Result<Var> {
        let d = &self.layers.dec;
        let side = self.config.image_size;
        let mut h = Self::conv(g, p, d[0], f, 1, 1)?;
        h = g.gelu(h);
        h = g.resize_bilinear(h, (side / 2, side / 2))?;
        h = Self::conv(g, p, d[1], h, 1, 1)?;
        h = g.gelu(h);
        h = g.resize_bilinear(h, (side, side))?;
        h = Self::conv(g, p, d[2], h, 1, 1)?;
        h = g.gelu(h);
        Self::conv(g, p, d[3], h, 1, 1)
    }

    /// Embedding lookup, resize to the latent grid, shared conv.
    pub fn eta_on(&self, g: &mut Graph, codebook: Var, w: Var, b: Var, map: &TokenMap) -> Result<Var> {
        let e = g.embedding(codebook, &map.indices)?;
        let e = g.transpose(e)?;
        let e = g.reshape(e, &[self.config.channels, map.height, map.width])?;
        let up = g.resize_bilinear(e, self.config.latent_size())?;
        g.conv2d(up, w, b, 1, 1)
    }

    /// The composition conv as bound on a graph.
    pub fn eta_vars(&self, p: &Bound) -> (Var, Var) {
        (p[self.layers.eta.0], p[self.layers.eta.1])
    }

    fn raster_var(&self, g: &mut Graph, raster: &[f32]) -> Result<Var> {
        let side = self.config.image_size;
        if raster.len() != side * side {
            return Err(Error::shape(
                "encode",
                format!("raster of {} values, expected {side}x{side}", raster.len()),
            ));
        }
        Ok(g.constant(Tensor::new(&[1, side, side], raster.to_vec())?))
    }

    pub fn encode(&self, raster: &[f32]) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = self.raster_var(&mut g, raster)?;
        let f = self.encode_on(&mut g, &p, x)?;
        Ok(g.value(f).clone())
    }

    pub fn decode(&self, features: &Tensor) -> Result<Vec<f32>> {
        self.check_features(features)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let f = g.constant(features.clone());
        let out = self.decode_on(&mut g, &p, f)?;
        Ok(g.value(out).data().to_vec())
    }

    fn check_features(&self, f: &Tensor) -> Result<()> {
        let (h, w) = self.config.latent_size();
        if f.shape() != [self.config.channels, h, w] {
            return Err(Error::shape(
                "features",
                format!("{:?}, expected [{}, {h}, {w}]", f.shape(), self.config.channels),
            ));
        }
        Ok(())
    }

    pub fn eta(&self, map: &TokenMap) -> Result<Tensor> {
        self.eta_with_codebook(map, self.codebook.vectors())
    }

    /// η with an arbitrary embedding table in place of the codebook.
    pub fn eta_with_codebook(&self, map: &TokenMap, table: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let cb = g.constant(table.clone());
        let (w, b) = self.eta_conv();
        let (w, b) = (g.constant(w.clone()), g.constant(b.clone()));
        let out = self.eta_on(&mut g, cb, w, b, map)?;
        Ok(g.value(out).clone())
    }

    /// Runs `r_k = f - Σ_{i<k} η(m_i)`, quantising each downsampled
    /// residual; `feedback(k, q_k)` picks the map `m_k` added to the sum.
    pub fn recursion(
        &self,
        features: &Tensor,
        mut feedback: impl FnMut(usize, &TokenMap) -> Result<TokenMap>,
    ) -> Result<Recursion> {
        self.check_features(features)?;
        let schedule = &self.config.schedule;
        let mut acc = Tensor::zeros(features.shape());
        let mut out = Recursion {
            quantized: Vec::with_capacity(schedule.len()),
            residuals: Vec::with_capacity(schedule.len() + 1),
            partial_sums: Vec::with_capacity(schedule.len() + 1),
        };
        for k in 0..schedule.len() {
            let r = sub(features, &acc);
            let q = quantize(&resize(&r, schedule.scale(k)), &self.codebook, k)?;
            let m = feedback(k, &q)?;
            if m.scale != k || (m.height, m.width) != schedule.scale(k) {
                return Err(Error::Schedule(format!(
                    "feedback map at scale {} does not conform to {schedule}",
                    k + 1
                )));
            }
            let contribution = self.eta(&m)?;
            out.partial_sums.push(acc.clone());
            add_assign(&mut acc, &contribution);
            out.residuals.push(r);
            out.quantized.push(q);
        }
        out.residuals.push(sub(features, &acc));
        out.partial_sums.push(acc);
        Ok(out)
    }

    pub fn decompose(&self, features: &Tensor) -> Result<Vec<TokenMap>> {
        Ok(self.recursion(features, |_, q| Ok(q.clone()))?.quantized)
    }

    /// `Σ_{i<k} η(maps_i)` for every `k = 1..=maps.len()+1`.
    pub fn partial_sums(&self, maps: &[TokenMap]) -> Result<Vec<Tensor>> {
        self.config.schedule.check_maps(maps, true)?;
        let (h, w) = self.config.latent_size();
        let mut acc = Tensor::zeros(&[self.config.channels, h, w]);
        let mut out = Vec::with_capacity(maps.len() + 1);
        for m in maps {
            let contribution = self.eta(m)?;
            out.push(acc.clone());
            add_assign(&mut acc, &contribution);
        }
        out.push(acc);
        Ok(out)
    }

    pub fn compose(&self, maps: &[TokenMap]) -> Result<Tensor> {
        self.config.schedule.check_maps(maps, false)?;
        Ok(self.partial_sums(maps)?.pop().expect("at least one partial sum"))
    }

    /// `decode(compose(decompose(encode(raster))))`.
    pub fn reconstruct(&self, raster: &[f32]) -> Result<Vec<f32>> {
        let f = self.encode(raster)?;
        let maps = self.decompose(&f)?;
        self.decode(&self.compose(&maps)?)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        self.config.save_into(&mut ckpt);
        self.params.save_into(&mut ckpt, "vq.");
        ckpt.insert("vq.codebook", self.codebook.vectors().clone());
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = VqConfig::load_from(ckpt)?;
        let mut model = Self::new(config, 0)?;
        model.params.load_from(ckpt, "vq.")?;
        model.set_codebook(Codebook::new(ckpt.require("vq.codebook")?.clone())?)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Align-corners resize of a `[C, h, w]` tensor.
pub(crate) fn resize(x: &Tensor, target: (usize, usize)) -> Tensor {
    let [c, h, w] = *x.shape() else {
        panic!("resize expects [C, h, w], got {:?}", x.shape())
    };
    if (h, w) == target {
        return x.clone();
    }
    let data = crate::tensor::kernels::resize_forward(x.data(), c, (h, w), target);
    Tensor::new(&[c, target.0, target.1], data).expect("resize keeps numel consistent")
}

fn sub(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect()).expect("operands share a shape")
}

fn add_assign(acc: &mut Tensor, x: &Tensor) {
    for (a, v) in acc.data_mut().iter_mut().zip(x.data()) {
        *a += v;
    }
}
