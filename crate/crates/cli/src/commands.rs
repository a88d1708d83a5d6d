use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use depthart::data::{load_dataset, make_dataset, normalize_depth, DepthSample, Split};
use depthart::metrics::{evaluate, per_scale_curve, rank_models, reconstruction_absrel, MetricsReport};
use depthart::training::{
    fit, parse_pairs, parse_value, prepare_items, FitOptions, LossRow, TrainConfig, CHECKPOINT_FILE, LOSS_FILE,
};
use depthart::var::{VarConfig, VarModel};
use depthart::vq::{codebook_usage, VqConfig, VqModel, VqTrainConfig};
use depthart::Error;
use rayon::prelude::*;

use crate::manifest::{write_atomic, RunManifest};
use crate::svg::scale_curve_svg;

pub const MANIFEST_FILE: &str = "run_manifest.txt";
pub const VQ_FILE: &str = "vq.dart";
pub const VQ_EVAL_FILE: &str = "vq_eval.csv";
pub const CONFIG_FILE: &str = "config.txt";

/// Bad invocation that is not a configuration-file problem.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn split(dir: &Path, which: Split) -> anyhow::Result<Vec<DepthSample>> {
    let samples: Vec<DepthSample> = load_dataset(dir)?
        .into_iter()
        .filter(|(s, _)| *s == which)
        .map(|(_, s)| s)
        .collect();
    if samples.is_empty() {
        return Err(Error::Data(format!("{} has no {} samples", dir.display(), which.as_str())).into());
    }
    Ok(samples)
}

fn depth_rasters(samples: &[DepthSample]) -> anyhow::Result<Vec<Vec<f32>>> {
    Ok(samples
        .par_iter()
        .map(|s| normalize_depth(&s.depth, &s.mask).map(|(n, _)| n))
        .collect::<depthart::Result<Vec<_>>>()?)
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

pub fn gen_data(out: &Path, train: usize, eval: usize, seed: u64) -> anyhow::Result<()> {
    let start = Instant::now();
    let manifest = make_dataset(train, eval, seed, out)?;
    let mut run = RunManifest::new(
        "gen-data",
        vec![
            ("out".into(), out.display().to_string()),
            ("train".into(), train.to_string()),
            ("eval".into(), eval.to_string()),
        ],
        seed,
    );
    run.outputs.push(out.join(depthart::data::MANIFEST_FILE));
    run.wall_time = start.elapsed();
    run.write(&out.join(MANIFEST_FILE))?;
    eprintln!("wrote {} samples to {}", manifest.entries.len(), out.display());
    Ok(())
}

/// `train-vqvae` invocation: config file plus flag overrides.
pub struct VqRun {
    pub config: PathBuf,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
}

const VQ_REQUIRED: [&str; 4] = ["data_dir", "out_dir", "seed", "steps"];

fn read_config(path: &Path) -> anyhow::Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_pairs(&text)?)
}

/// Resolved VQ run: data and output directories plus the trainer settings.
fn vq_settings(pairs: &[(String, String)]) -> anyhow::Result<(PathBuf, PathBuf, VqTrainConfig)> {
    let mut cfg = VqTrainConfig::default();
    let (mut data, mut out) = (PathBuf::new(), PathBuf::new());
    for (k, v) in pairs {
        match k.as_str() {
            "data_dir" => data = PathBuf::from(v),
            "out_dir" => out = PathBuf::from(v),
            "seed" => cfg.seed = parse_value(k, v)?,
            "steps" => cfg.steps = parse_value(k, v)?,
            "batch" => cfg.batch = parse_value(k, v)?,
            "lr" => cfg.lr = parse_value(k, v)?,
            "decay_period" => cfg.decay_period = parse_value(k, v)?,
            "decay_gamma" => cfg.decay_gamma = parse_value(k, v)?,
            "commitment" => cfg.commitment = parse_value(k, v)?,
            "ema_decay" => cfg.ema_decay = parse_value(k, v)?,
            "warmup_samples" => cfg.warmup_samples = parse_value(k, v)?,
            "kmeans_iters" => cfg.kmeans_iters = parse_value(k, v)?,
            "dead_threshold" => cfg.dead_threshold = parse_value(k, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`")).into()),
        }
    }
    if let Some(missing) = VQ_REQUIRED.iter().find(|r| !pairs.iter().any(|(k, _)| k == *r)) {
        return Err(Error::Config(format!("missing config key `{missing}`")).into());
    }
    if cfg.steps == 0 || cfg.batch == 0 || cfg.lr.is_nan() || cfg.lr <= 0.0 {
        return Err(Error::Config("`steps`, `batch` and `lr` must be positive".into()).into());
    }
    Ok((data, out, cfg))
}

pub fn train_vqvae(run: &VqRun) -> anyhow::Result<()> {
    let start = Instant::now();
    let mut pairs = read_config(&run.config)?;
    let overrides = [
        ("data_dir", run.data.as_ref().map(|p| p.display().to_string())),
        ("out_dir", run.out.as_ref().map(|p| p.display().to_string())),
        ("steps", run.steps.map(|v| v.to_string())),
        ("seed", run.seed.map(|v| v.to_string())),
    ];
    for (k, v) in overrides {
        if let Some(v) = v {
            pairs.retain(|(key, _)| key != k);
            pairs.push((k.to_string(), v));
        }
    }
    let (data, out, cfg) = vq_settings(&pairs)?;
    let train = depth_rasters(&split(&data, Split::Train)?)?;
    let eval = split(&data, Split::Eval)?;
    create_dir(&out)?;
    let t = Instant::now();
    let (model, report) = depthart::vq::train_vqvae(&train, VqConfig::default(), &cfg)?;
    let train_secs = t.elapsed().as_secs_f64();
    let ckpt = out.join(VQ_FILE);
    model.save(&ckpt)?;

    let lr = depthart::tensor::StepLr {
        base: cfg.lr,
        period: cfg.decay_period as u64,
        gamma: cfg.decay_gamma,
    };
    let rows: Vec<LossRow> = report
        .losses
        .iter()
        .enumerate()
        .map(|(i, &loss)| LossRow {
            step: i + 1,
            loss,
            lr: lr.at(i as u64),
        })
        .collect();
    let loss_path = out.join(LOSS_FILE);
    write_atomic(&loss_path, depthart::training::loss_csv(&rows).as_bytes())?;

    let floors = eval
        .par_iter()
        .map(|s| reconstruction_absrel(&model, s))
        .collect::<depthart::Result<Vec<_>>>()?;
    let floor = floors.iter().sum::<f64>() / floors.len() as f64;
    let usage = codebook_usage(&model, &depth_rasters(&eval)?)?;
    let eval_path = out.join(VQ_EVAL_FILE);
    write_atomic(
        &eval_path,
        format!(
            "absrel,codebook_usage,restarts,train_seconds\n{floor},{usage},{},{train_secs:.1}\n",
            report.restarts
        )
        .as_bytes(),
    )?;

    let mut manifest = RunManifest::new("train-vqvae", pairs, cfg.seed);
    manifest.outputs = vec![ckpt, loss_path, eval_path];
    manifest.wall_time = start.elapsed();
    manifest.write(&out.join(MANIFEST_FILE))?;
    eprintln!(
        "vq: held-out AbsRel {floor:.4}, codebook usage {:.0}%, {train_secs:.0}s training",
        usage * 100.0
    );
    Ok(())
}

/// `train-var` invocation: config file plus flag overrides.
pub struct VarRun {
    pub config: PathBuf,
    pub regime: Option<String>,
    pub vq: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub lr: Option<f32>,
    pub batch: Option<usize>,
    pub checkpoint_every: Option<usize>,
    pub resume: bool,
}

pub fn train_var(run: &VarRun) -> anyhow::Result<()> {
    let start = Instant::now();
    let text = std::fs::read_to_string(&run.config).map_err(|e| Error::io(&run.config, e))?;
    let owned: Vec<(&str, String)> = [
        ("regime", run.regime.clone()),
        ("vq", run.vq.as_ref().map(|p| p.display().to_string())),
        ("data_dir", run.data.as_ref().map(|p| p.display().to_string())),
        ("out_dir", run.out.as_ref().map(|p| p.display().to_string())),
        ("steps", run.steps.map(|v| v.to_string())),
        ("seed", run.seed.map(|v| v.to_string())),
        ("lr", run.lr.map(|v| v.to_string())),
        ("batch", run.batch.map(|v| v.to_string())),
        ("checkpoint_every", run.checkpoint_every.map(|v| v.to_string())),
    ]
    .into_iter()
    .filter_map(|(k, v)| v.map(|v| (k, v)))
    .collect();
    let overrides: Vec<(&str, &str)> = owned.iter().map(|(k, v)| (*k, v.as_str())).collect();
    let cfg = TrainConfig::parse_with(&text, &overrides)?;
    let vq_path = cfg
        .vq
        .clone()
        .ok_or_else(|| Error::Config("missing config key `vq` (or pass --vq)".into()))?;
    let vq = VqModel::load(&vq_path)?;
    let samples = split(&cfg.data_dir, Split::Train)?;
    let items = prepare_items(&samples, &vq)?;
    let mut model = VarModel::new(VarConfig::for_vq(&vq), cfg.seed)?;
    create_dir(&cfg.out_dir)?;
    let config_path = cfg.out_dir.join(CONFIG_FILE);
    write_atomic(&config_path, cfg.to_text().as_bytes())?;
    let options = FitOptions {
        out_dir: Some(&cfg.out_dir),
        resume: run.resume,
    };
    let t = Instant::now();
    let rows = fit(&mut model, &vq, &items, &cfg, options)?;
    let pairs = parse_pairs(&cfg.to_text())?;
    let mut manifest = RunManifest::new("train-var", pairs, cfg.seed);
    manifest.outputs = vec![
        cfg.out_dir.join(CHECKPOINT_FILE),
        cfg.out_dir.join(LOSS_FILE),
        config_path,
    ];
    manifest.wall_time = start.elapsed();
    manifest.write(&cfg.out_dir.join(MANIFEST_FILE))?;
    if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
        eprintln!(
            "{}: {} steps in {:.0}s, loss {:.3} -> {:.3}",
            cfg.regime,
            rows.len(),
            t.elapsed().as_secs_f64(),
            first.loss,
            last.loss
        );
    }
    Ok(())
}

/// Name of a model in reports: its run directory, or the file stem.
fn model_name(path: &Path) -> String {
    let stem = || {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    };
    match (path.file_name(), path.parent().and_then(Path::file_name)) {
        (Some(f), Some(dir)) if f == CHECKPOINT_FILE => dir.to_string_lossy().into_owned(),
        _ => stem(),
    }
}

fn dataset_name(data: &Path) -> String {
    let base = data
        .canonicalize()
        .ok()
        .and_then(|p| p.file_name().map(|f| f.to_string_lossy().into_owned()))
        .unwrap_or_else(|| data.display().to_string());
    format!("{base}/eval")
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut p = out.as_os_str().to_owned();
    p.push(".manifest");
    PathBuf::from(p)
}

fn parent_dir(out: &Path) -> anyhow::Result<()> {
    match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

pub fn eval(models: &[PathBuf], vq: &Path, data: &Path, out: &Path) -> anyhow::Result<()> {
    let start = Instant::now();
    let vq_model = VqModel::load(vq)?;
    let samples = split(data, Split::Eval)?;
    let dataset = dataset_name(data);
    let mut reports = Vec::with_capacity(models.len());
    for path in models {
        let model = VarModel::load(path)?;
        let row = evaluate(&model, &vq_model, &samples, &model_name(path), &dataset)
            .with_context(|| format!("evaluating {}", path.display()))?;
        reports.push(MetricsReport { rows: vec![row] });
    }
    if reports.len() > 1 {
        match rank_models(&reports) {
            Ok(ranks) => {
                for (rep, r) in reports.iter_mut().zip(ranks) {
                    rep.rows[0].rank = Some(r);
                }
            }
            Err(e) => eprintln!("warning: models not ranked: {e}"),
        }
    }
    let report = MetricsReport {
        rows: reports.into_iter().flat_map(|r| r.rows).collect(),
    };
    parent_dir(out)?;
    write_atomic(out, report.to_csv().as_bytes())?;
    let mut config = vec![
        ("vq".into(), vq.display().to_string()),
        ("data".into(), data.display().to_string()),
    ];
    config.extend(models.iter().map(|m| ("model".to_string(), m.display().to_string())));
    let mut manifest = RunManifest::new("eval", config, 0);
    manifest.outputs.push(out.to_path_buf());
    manifest.wall_time = start.elapsed();
    manifest.write(&manifest_path(out))?;
    for r in &report.rows {
        eprintln!(
            "{}: AbsRel {:.4}, delta1 err {:.4}, pe-fla {:.3} cm, pe-ori {:.2} deg",
            r.model, r.absrel, r.delta1_err, r.pe_fla, r.pe_ori
        );
    }
    Ok(())
}

pub fn scale_curve(model: &Path, vq: &Path, data: &Path, out: &Path, svg: Option<&Path>) -> anyhow::Result<()> {
    let start = Instant::now();
    let vq_model = VqModel::load(vq)?;
    let var = VarModel::load(model)?;
    let samples = split(data, Split::Eval)?;
    let curve = per_scale_curve(&var, &vq_model, &samples)?;
    parent_dir(out)?;
    write_atomic(out, curve.to_csv().as_bytes())?;
    let mut manifest = RunManifest::new(
        "scale-curve",
        vec![
            ("model".into(), model.display().to_string()),
            ("vq".into(), vq.display().to_string()),
            ("data".into(), data.display().to_string()),
        ],
        0,
    );
    manifest.outputs.push(out.to_path_buf());
    if let Some(svg) = svg {
        parent_dir(svg)?;
        write_atomic(svg, scale_curve_svg(&curve).as_bytes())?;
        manifest.outputs.push(svg.to_path_buf());
    }
    manifest.wall_time = start.elapsed();
    manifest.write(&manifest_path(out))?;
    let fmt: Vec<String> = curve.absrel.iter().map(|a| format!("{a:.4}")).collect();
    eprintln!("AbsRel per scale [{}], floor {:.4}", fmt.join(", "), curve.floor);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_names_come_from_run_directories() {
        assert_eq!(model_name(Path::new("runs/tf/checkpoint.dart")), "tf");
        assert_eq!(model_name(Path::new("best.dart")), "best");
        assert_eq!(model_name(Path::new("runs/x/other.dart")), "other");
    }

    #[test]
    fn vq_settings_need_required_keys() {
        let pairs = |s: &str| parse_pairs(s).unwrap();
        let (d, o, c) = vq_settings(&pairs("data_dir=a\nout_dir=b\nseed=4\nsteps=10\nbatch=2\n")).unwrap();
        assert_eq!((d, o), (PathBuf::from("a"), PathBuf::from("b")));
        assert_eq!((c.seed, c.steps, c.batch), (4, 10, 2));
        let err = vq_settings(&pairs("data_dir=a\nout_dir=b\nseed=4\n")).unwrap_err();
        assert!(err.to_string().contains("missing config key `steps`"));
        assert!(vq_settings(&pairs("data_dir=a\nout_dir=b\nseed=4\nsteps=1\nfoo=1\n")).is_err());
    }
}
