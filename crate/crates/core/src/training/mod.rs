//! Teacher forcing and DepthART training of the transformer.
//!
//! Teacher forcing feeds the autoencoder's own decomposition `x` as both
//! inputs and targets. DepthART first decodes greedily to get `z`, then
//! trains on inputs built from `z` against the quantised residuals
//! `t_k = Q[S(f_D - Σ_{i<k} η(z_i), s_k)]`.

mod config;

pub use config::{parse_pairs, parse_value, Regime, TrainConfig, REQUIRED_KEYS};

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::data::{normalize_depth, DepthSample};
use crate::error::{Error, Result};
use crate::tensor::{AdamW, Graph, StepLr, Tensor, Var};
use crate::var::{build_inputs, SampleInputs, VarConfig, VarModel};
use crate::vq::{TokenMap, VqModel};

/// One training sample with everything the frozen autoencoder provides.
#[derive(Clone, Debug)]
pub struct Item {
    pub image: Vec<TokenMap>,
    /// Continuous encoder features of the normalised depth, `f_D`.
    pub features: Tensor,
    /// Decomposition `x_1..x_K` of `f_D`.
    pub teacher: Vec<TokenMap>,
    /// Inputs built from `x_1..x_{K-1}`.
    pub teacher_inputs: SampleInputs,
}

/// Luminance mapped to `[-1, 1]`, the autoencoder's input range.
pub fn image_raster(sample: &DepthSample) -> Vec<f32> {
    sample.grayscale().iter().map(|v| v * 2.0 - 1.0).collect()
}

/// Image token maps for a sample.
pub fn image_tokens(sample: &DepthSample, vq: &VqModel) -> Result<Vec<TokenMap>> {
    vq.decompose(&vq.encode(&image_raster(sample))?)
}

pub fn prepare_item(sample: &DepthSample, vq: &VqModel) -> Result<Item> {
    let image = image_tokens(sample, vq)?;
    let (norm, _) = normalize_depth(&sample.depth, &sample.mask)?;
    let features = vq.encode(&norm)?;
    let teacher = vq.decompose(&features)?;
    let teacher_inputs = build_inputs(&teacher[..teacher.len() - 1], &image, vq)?;
    Ok(Item {
        image,
        features,
        teacher,
        teacher_inputs,
    })
}

/// Encode a dataset in parallel; the result is in input order.
pub fn prepare_items(samples: &[DepthSample], vq: &VqModel) -> Result<Vec<Item>> {
    samples.par_iter().map(|s| prepare_item(s, vq)).collect()
}

/// `t_k = Q[S(f_D - Σ_{i<k} η(z_i), s_k)]` for every scale.
pub fn depthart_targets(z: &[TokenMap], features: &Tensor, vq: &VqModel) -> Result<Vec<TokenMap>> {
    vq.schedule().check_maps(z, false)?;
    Ok(vq.recursion(features, |k, _| Ok(z[k].clone()))?.quantized)
}

/// Per-scale mean cross-entropy of `logits[B * N, V]` against `targets`
/// (one full map list per sample, sample-major like the logits).
pub fn scale_losses_on(g: &mut Graph, config: &VarConfig, logits: Var, targets: &[Vec<TokenMap>]) -> Result<Vec<Var>> {
    let schedule = &config.schedule;
    let n = config.depth_len(schedule.len());
    (0..schedule.len())
        .map(|k| {
            let (off, len) = (schedule.offset(k), schedule.tokens(k));
            let rows = (0..targets.len())
                .map(|b| g.slice_rows(logits, b * n + off, len))
                .collect::<Result<Vec<_>>>()?;
            let rows = g.concat_rows(&rows)?;
            let idx: Vec<usize> = targets.iter().flat_map(|t| t[k].indices.iter().copied()).collect();
            g.cross_entropy(rows, &idx)
        })
        .collect()
}

/// What one optimisation step saw and did.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    /// `Σ_k CE_k`.
    pub loss: f32,
    pub scale_losses: Vec<f32>,
    pub targets: Vec<Vec<TokenMap>>,
    /// Digests of the inputs the gradient pass consumed.
    pub input_digests: Vec<u64>,
    /// Digests of the inputs the greedy pass consumed at its last scale
    /// (DepthART only).
    pub inference_digests: Vec<u64>,
}

/// Forward with gradient, per-scale CE, one optimiser update.
fn update(
    model: &mut VarModel,
    opt: &mut AdamW,
    lr: f32,
    inputs: &[SampleInputs],
    targets: Vec<Vec<TokenMap>>,
) -> Result<StepOutcome> {
    let mut g = Graph::new();
    let p = model.params().bind(&mut g, true);
    let logits = model.forward_on(&mut g, &p, inputs)?;
    let terms = scale_losses_on(&mut g, model.config(), logits, &targets)?;
    let total = g.add_all(&terms)?;
    let loss = g.value(total).item();
    if !loss.is_finite() {
        return Err(Error::Divergence(format!("training loss is {loss}")));
    }
    let scale_losses = terms.iter().map(|&t| g.value(t).item()).collect();
    let grads = g.backward(total)?;
    opt.step(model.params_mut(), &p, &grads, lr);
    Ok(StepOutcome {
        loss,
        scale_losses,
        targets,
        input_digests: inputs.iter().map(SampleInputs::digest).collect(),
        inference_digests: Vec::new(),
    })
}

/// Inputs and targets both come from the autoencoder's decomposition.
pub fn teacher_forcing_step(model: &mut VarModel, opt: &mut AdamW, lr: f32, batch: &[&Item]) -> Result<StepOutcome> {
    let inputs: Vec<SampleInputs> = batch.iter().map(|it| it.teacher_inputs.clone()).collect();
    let targets = batch.iter().map(|it| it.teacher.clone()).collect();
    update(model, opt, lr, &inputs, targets)
}

/// Greedy pass without gradient, then one gradient pass on the model's
/// own predictions against the residual targets.
pub fn depthart_step(
    model: &mut VarModel,
    opt: &mut AdamW,
    lr: f32,
    vq: &VqModel,
    batch: &[&Item],
) -> Result<StepOutcome> {
    let images: Vec<Vec<TokenMap>> = batch.iter().map(|it| it.image.clone()).collect();
    let inference = model.infer(&images, vq)?;
    let mut out = refine_on(model, opt, lr, vq, batch, &inference.maps)?;
    out.inference_digests = inference.final_inputs.iter().map(SampleInputs::digest).collect();
    Ok(out)
}

/// Gradient pass of DepthART given the greedy predictions `z` per sample.
pub(crate) fn refine_on(
    model: &mut VarModel,
    opt: &mut AdamW,
    lr: f32,
    vq: &VqModel,
    batch: &[&Item],
    z: &[Vec<TokenMap>],
) -> Result<StepOutcome> {
    let k = vq.schedule().len();
    let mut inputs = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    for (item, z) in batch.iter().zip(z) {
        targets.push(depthart_targets(z, &item.features, vq)?);
        inputs.push(build_inputs(&z[..k - 1], &item.image, vq)?);
    }
    update(model, opt, lr, &inputs, targets)
}

/// Seed-determined sample order: a fresh shuffle per epoch.
#[derive(Clone, Debug)]
pub struct BatchOrder {
    n: usize,
    seed: u64,
    epoch: Option<(usize, Vec<usize>)>,
}

impl BatchOrder {
    pub fn new(n: usize, seed: u64) -> Self {
        Self { n, seed, epoch: None }
    }

    fn position(&mut self, p: usize) -> usize {
        let e = p / self.n;
        if self.epoch.as_ref().map(|(i, _)| *i) != Some(e) {
            let mut perm: Vec<usize> = (0..self.n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (e as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            perm.shuffle(&mut rng);
            self.epoch = Some((e, perm));
        }
        self.epoch.as_ref().expect("epoch set above").1[p % self.n]
    }

    /// Indices of the batch taken at zero-based `step`.
    pub fn batch(&mut self, step: usize, size: usize) -> Vec<usize> {
        (step * size..(step + 1) * size).map(|p| self.position(p)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    /// One-based step number.
    pub step: usize,
    pub loss: f32,
    pub lr: f32,
}

pub fn loss_csv(rows: &[LossRow]) -> String {
    let mut s = String::from("step,loss,lr\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.step, r.loss, r.lr);
    }
    s
}

pub fn parse_loss_csv(text: &str) -> Result<Vec<LossRow>> {
    let mut lines = text.lines();
    if lines.next() != Some("step,loss,lr") {
        return Err(Error::Data("loss curve lacks the step,loss,lr header".into()));
    }
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Data(format!("malformed loss row `{l}`"));
            if f.len() != 3 {
                return Err(bad());
            }
            Ok(LossRow {
                step: f[0].parse().map_err(|_| bad())?,
                loss: f[1].parse().map_err(|_| bad())?,
                lr: f[2].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

pub const CHECKPOINT_FILE: &str = "checkpoint.dart";
pub const LOSS_FILE: &str = "loss.csv";

/// Where and whether `fit` persists state.
#[derive(Clone, Copy, Debug, Default)]
pub struct FitOptions<'a> {
    pub out_dir: Option<&'a Path>,
    /// Continue from `out_dir/checkpoint.dart` when it exists.
    pub resume: bool,
}

/// Train `model` for the configured steps and return the loss curve.
///
/// With an output directory the model, optimiser state and curve are
/// written every `checkpoint_every` steps and at the end, so an aborted
/// run keeps its last checkpoint.
pub fn fit(
    model: &mut VarModel,
    vq: &VqModel,
    items: &[Item],
    config: &TrainConfig,
    options: FitOptions<'_>,
) -> Result<Vec<LossRow>> {
    config.validate()?;
    model.check_vq(vq)?;
    if items.is_empty() {
        return Err(Error::Data("no training items".into()));
    }
    let mut opt = AdamW::new(model.params(), config.wd);
    let lr = StepLr {
        base: config.lr,
        period: config.decay_period as u64,
        gamma: config.decay_gamma,
    };
    let mut rows = Vec::with_capacity(config.steps);
    if let (Some(dir), true) = (options.out_dir, options.resume) {
        let path = dir.join(CHECKPOINT_FILE);
        if path.exists() {
            let ckpt = Checkpoint::load(&path)?;
            *model = VarModel::from_checkpoint(&ckpt)?;
            opt.load_from(&ckpt, "opt.")?;
            let text = std::fs::read_to_string(dir.join(LOSS_FILE)).map_err(|e| Error::io(dir.join(LOSS_FILE), e))?;
            rows = parse_loss_csv(&text)?;
            rows.truncate(opt.steps_taken() as usize);
        }
    }
    let mut order = BatchOrder::new(items.len(), config.seed);
    for step in rows.len()..config.steps {
        let batch: Vec<&Item> = order.batch(step, config.batch).into_iter().map(|i| &items[i]).collect();
        let rate = lr.at(step as u64);
        let outcome = match config.regime {
            Regime::TeacherForcing => teacher_forcing_step(model, &mut opt, rate, &batch),
            Regime::DepthArt => depthart_step(model, &mut opt, rate, vq, &batch),
        }
        .map_err(|e| match e {
            Error::Divergence(msg) => Error::Divergence(format!("step {}: {msg}", step + 1)),
            other => other,
        })?;
        rows.push(LossRow {
            step: step + 1,
            loss: outcome.loss,
            lr: rate,
        });
        if let Some(dir) = options.out_dir {
            if (step + 1) % config.checkpoint_every == 0 || step + 1 == config.steps {
                save_progress(dir, model, &opt, &rows)?;
            }
        }
    }
    Ok(rows)
}

fn save_progress(dir: &Path, model: &VarModel, opt: &AdamW, rows: &[LossRow]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(LOSS_FILE);
    let tmp = dir.join(format!("{LOSS_FILE}.tmp"));
    std::fs::write(&tmp, loss_csv(rows)).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
    let mut ckpt = model.to_checkpoint();
    opt.save_into(&mut ckpt, "opt.");
    ckpt.save(&dir.join(CHECKPOINT_FILE))
}
