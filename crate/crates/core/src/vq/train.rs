use rand::seq::index::sample;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::resize;
use super::{Codebook, TokenMap, VqConfig, VqModel};
use crate::error::{Error, Result};
use crate::tensor::{AdamW, Graph, StepLr, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct VqTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub decay_period: usize,
    pub decay_gamma: f32,
    pub commitment: f32,
    pub ema_decay: f32,
    /// Samples whose encoder outputs seed the k-means codebook.
    pub warmup_samples: usize,
    pub kmeans_iters: usize,
    /// EMA cluster size under which an entry is restarted from the batch.
    pub dead_threshold: f32,
    pub seed: u64,
}

impl Default for VqTrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch: 8,
            lr: 1e-3,
            decay_period: 1000,
            decay_gamma: 0.5,
            commitment: 0.25,
            ema_decay: 0.99,
            warmup_samples: 512,
            kmeans_iters: 20,
            dead_threshold: 0.05,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VqTrainReport {
    /// Mean batch loss at every step.
    pub losses: Vec<f32>,
    /// Codebook entries re-seeded because they fell out of use.
    pub restarts: usize,
}

/// Train encoder, decoder, composition conv and codebook on normalised
/// depth rasters.
pub fn train_vqvae(
    rasters: &[Vec<f32>],
    model_config: VqConfig,
    config: &VqTrainConfig,
) -> Result<(VqModel, VqTrainReport)> {
    if rasters.is_empty() {
        return Err(Error::Data("no training rasters".into()));
    }
    if config.steps == 0 || config.batch == 0 {
        return Err(Error::Config("steps and batch must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = VqModel::new(model_config, config.seed)?;

    let warm = sample(&mut rng, rasters.len(), config.warmup_samples.min(rasters.len()));
    let mut points = Vec::new();
    for i in warm.iter() {
        points.extend(scale_vectors(&model, &model.encode(&rasters[i])?));
    }
    let init = kmeans(&points, model.config().codebook_size, config.kmeans_iters, &mut rng);
    model.set_codebook(distinct_codebook(init, model.config().channels, &mut rng)?)?;

    let mut ema = Ema::new(model.codebook());
    let mut opt = AdamW::new(model.params(), 0.0).with_betas(0.9, 0.99);
    let schedule = StepLr {
        base: config.lr,
        period: config.decay_period as u64,
        gamma: config.decay_gamma,
    };
    let mut report = VqTrainReport::default();
    for step in 0..config.steps {
        let picks: Vec<usize> = (0..config.batch).map(|_| rng.random_range(0..rasters.len())).collect();
        let mut g = Graph::new();
        let p = model.params().bind(&mut g, true);
        let cb = g.constant(model.codebook().vectors().clone());
        let (ew, eb) = model.eta_vars(&p);
        let mut terms = Vec::with_capacity(config.batch);
        let mut assigned: Vec<(usize, Vec<f32>)> = Vec::new();
        for &i in &picks {
            let side = model.config().image_size;
            let x = g.constant(Tensor::new(&[1, side, side], rasters[i].clone())?);
            let f = model.encode_on(&mut g, &p, x)?;
            let f_val = g.value(f).clone();
            let rec = model.recursion(&f_val, |_, q| Ok(q.clone()))?;
            for (k, q) in rec.quantized.iter().enumerate() {
                let down = resize(&rec.residuals[k], model.schedule().scale(k));
                collect_assignments(&down, q, &mut assigned);
            }
            let parts = rec
                .quantized
                .iter()
                .map(|q| model.eta_on(&mut g, cb, ew, eb, q))
                .collect::<Result<Vec<_>>>()?;
            let f_hat = g.add_all(&parts)?;
            let f_hat_val = g.value(f_hat).clone();
            let shift: Vec<f32> = f_hat_val.data().iter().zip(f_val.data()).map(|(a, b)| a - b).collect();
            let shift = g.constant(Tensor::new(f_val.shape(), shift)?);
            let through = g.add(f, shift)?;
            let out = model.decode_on(&mut g, &p, through)?;
            let recon = g.mse(out, x)?;
            let f_hat_const = g.constant(f_hat_val);
            let commit = g.mse(f, f_hat_const)?;
            let commit = g.scale(commit, config.commitment);
            let f_const = g.constant(f_val);
            let compose = g.mse(f_hat, f_const)?;
            terms.push(g.add_all(&[recon, commit, compose])?);
        }
        let total = g.add_all(&terms)?;
        let loss = g.scale(total, 1.0 / config.batch as f32);
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Divergence(format!("VQ loss is {value} at step {step}")));
        }
        let grads = g.backward(loss)?;
        opt.step(model.params_mut(), &p, &grads, schedule.at(step as u64));
        report.restarts += ema.update(&assigned, config, &mut rng);
        model.set_codebook(ema.codebook(&mut rng)?)?;
        report.losses.push(value);
    }
    Ok((model, report))
}

/// Fraction of codebook entries used by the decompositions of `rasters`.
pub fn codebook_usage(model: &VqModel, rasters: &[Vec<f32>]) -> Result<f64> {
    let mut used = vec![false; model.codebook().size()];
    for r in rasters {
        for map in model.decompose(&model.encode(r)?)? {
            for &j in &map.indices {
                used[j] = true;
            }
        }
    }
    Ok(used.iter().filter(|&&u| u).count() as f64 / used.len() as f64)
}

/// The `C`-vectors of `f` downsampled to every scale of the schedule.
fn scale_vectors(model: &VqModel, f: &Tensor) -> Vec<Vec<f32>> {
    let mut out = Vec::new();
    for &s in model.schedule().scales() {
        let down = resize(f, s);
        out.extend(columns(&down));
    }
    out
}

fn columns(x: &Tensor) -> Vec<Vec<f32>> {
    let c = x.shape()[0];
    let n = x.numel() / c;
    (0..n)
        .map(|p| (0..c).map(|ch| x.data()[ch * n + p]).collect())
        .collect()
}

fn collect_assignments(down: &Tensor, map: &TokenMap, out: &mut Vec<(usize, Vec<f32>)>) {
    for (v, &j) in columns(down).into_iter().zip(&map.indices) {
        out.push((j, v));
    }
}

fn dist2(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm from a k-means++ seeding. Empty clusters take the
/// point farthest from its centre.
pub(crate) fn kmeans(points: &[Vec<f32>], k: usize, iters: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f32>> {
    let mut centres = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f32> = points.iter().map(|p| dist2(p, &centres[0])).collect();
    while centres.len() < k {
        let total: f64 = d2.iter().map(|&d| d as f64).sum();
        let next = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            d2.iter()
                .position(|&d| {
                    target -= d as f64;
                    target < 0.0
                })
                .unwrap_or(points.len() - 1)
        } else {
            rng.random_range(0..points.len())
        };
        centres.push(points[next].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, &centres[centres.len() - 1]));
        }
    }
    let dim = points[0].len();
    for _ in 0..iters {
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        let mut worst = (0, -1.0f32);
        for (i, p) in points.iter().enumerate() {
            let (j, d) = centres
                .iter()
                .enumerate()
                .map(|(j, c)| (j, dist2(p, c)))
                .fold((0, f32::INFINITY), |b, c| if c.1 < b.1 { c } else { b });
            counts[j] += 1;
            for (s, &v) in sums[j].iter_mut().zip(p) {
                *s += v as f64;
            }
            if d > worst.1 {
                worst = (i, d);
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                centres[j] = points[worst.0].clone();
            } else {
                centres[j] = sums[j].iter().map(|s| (s / counts[j] as f64) as f32).collect();
            }
        }
    }
    centres
}

/// Build a codebook, nudging any entry that duplicates an earlier one.
fn distinct_codebook(mut rows: Vec<Vec<f32>>, dim: usize, rng: &mut ChaCha8Rng) -> Result<Codebook> {
    for a in 1..rows.len() {
        while rows[..a].contains(&rows[a]) {
            for v in rows[a].iter_mut() {
                *v += rng.random_range(-1e-3..1e-3);
            }
        }
    }
    let v = rows.len();
    Codebook::new(Tensor::new(&[v, dim], rows.concat())?)
}

/// Exponential moving averages of assignment counts and vector sums.
struct Ema {
    size: Vec<f32>,
    sums: Vec<Vec<f32>>,
}

impl Ema {
    fn new(cb: &Codebook) -> Self {
        Self {
            size: vec![1.0; cb.size()],
            sums: (0..cb.size()).map(|j| cb.entry(j).to_vec()).collect(),
        }
    }

    /// Returns how many entries were restarted.
    fn update(&mut self, assigned: &[(usize, Vec<f32>)], cfg: &VqTrainConfig, rng: &mut ChaCha8Rng) -> usize {
        let d = cfg.ema_decay;
        let dim = self.sums[0].len();
        let mut counts = vec![0.0f32; self.size.len()];
        let mut sums = vec![vec![0.0f32; dim]; self.size.len()];
        for (j, v) in assigned {
            counts[*j] += 1.0;
            for (s, x) in sums[*j].iter_mut().zip(v) {
                *s += x;
            }
        }
        for j in 0..self.size.len() {
            self.size[j] = d * self.size[j] + (1.0 - d) * counts[j];
            for (s, n) in self.sums[j].iter_mut().zip(&sums[j]) {
                *s = d * *s + (1.0 - d) * n;
            }
        }
        let dead: Vec<usize> = (0..self.size.len())
            .filter(|&j| self.size[j] < cfg.dead_threshold)
            .collect();
        if dead.is_empty() || assigned.is_empty() {
            return 0;
        }
        let donors = sample(rng, assigned.len(), dead.len().min(assigned.len()));
        for (j, i) in dead.iter().zip(donors.iter()) {
            self.size[*j] = 1.0;
            self.sums[*j] = assigned[i].1.clone();
        }
        dead.len().min(assigned.len())
    }

    fn codebook(&self, rng: &mut ChaCha8Rng) -> Result<Codebook> {
        let total: f32 = self.size.iter().sum();
        let v = self.size.len() as f32;
        let rows = self
            .sums
            .iter()
            .zip(&self.size)
            .map(|(s, &n)| {
                let smoothed = (n + 1e-5) / (total + v * 1e-5) * total;
                s.iter().map(|x| x / smoothed).collect()
            })
            .collect();
        distinct_codebook(rows, self.sums[0].len(), rng)
    }
}
