//! Scale-invariant depth evaluation.

mod report;

pub use report::{rank_models, MetricsReport, ReportRow, RANKED_COLUMNS};

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;

use crate::data::{denormalize_depth, normalize_depth, DepthSample};
use crate::error::{Error, Result};
use crate::training::image_tokens;
use crate::var::VarModel;
use crate::vq::{TokenMap, VqModel};

/// Ratio at or above which a pixel counts as a δ1 error.
pub const DELTA1_THRESHOLD: f64 = 1.25;
/// Planes with fewer pixels than this are not scored.
pub const MIN_PLANE_PIXELS: usize = 16;

fn check_lengths(op: &str, pred: &[f64], gt: &[f32], mask: &[bool]) -> Result<()> {
    if pred.len() != gt.len() || gt.len() != mask.len() {
        return Err(Error::Data(format!(
            "{op}: prediction, ground truth and mask sizes differ ({}, {}, {})",
            pred.len(),
            gt.len(),
            mask.len()
        )));
    }
    Ok(())
}

/// L1-optimal global scale `argmin_s Σ |s·pred - gt|` over the mask.
///
/// This is the `pred`-weighted median of `gt / pred`. When the cumulative
/// weight reaches exactly half at a candidate, the objective is flat up to
/// the next one and the lower candidate is returned. Pixels with
/// non-positive prediction are left out.
pub fn align_scale(pred: &[f64], gt: &[f32], mask: &[bool]) -> Result<f64> {
    check_lengths("align_scale", pred, gt, mask)?;
    let mut cands: Vec<(f64, f64)> = (0..pred.len())
        .filter(|&i| mask[i] && pred[i] > 0.0 && pred[i].is_finite())
        .map(|i| (gt[i] as f64 / pred[i], pred[i]))
        .collect();
    if cands.is_empty() {
        return Err(Error::Data("no valid pixel with positive prediction".into()));
    }
    cands.sort_by(|a, b| a.0.total_cmp(&b.0));
    let half = cands.iter().map(|c| c.1).sum::<f64>() / 2.0;
    let mut acc = 0.0;
    for &(ratio, w) in &cands {
        acc += w;
        if acc >= half {
            return Ok(ratio);
        }
    }
    Ok(cands[cands.len() - 1].0)
}

pub fn apply_scale(pred: &[f64], s: f64) -> Vec<f64> {
    pred.iter().map(|&p| p * s).collect()
}

fn valid_count(mask: &[bool]) -> Result<usize> {
    match mask.iter().filter(|&&m| m).count() {
        0 => Err(Error::Data("mask has no valid pixels".into())),
        n => Ok(n),
    }
}

/// Mean of `|pred - gt| / gt` over the mask.
pub fn absrel(pred: &[f64], gt: &[f32], mask: &[bool]) -> Result<f64> {
    check_lengths("absrel", pred, gt, mask)?;
    let n = valid_count(mask)?;
    let sum: f64 = (0..pred.len())
        .filter(|&i| mask[i])
        .map(|i| (pred[i] - gt[i] as f64).abs() / gt[i] as f64)
        .sum();
    Ok(sum / n as f64)
}

/// Fraction of valid pixels with `max(pred/gt, gt/pred) >= 1.25`.
/// A non-positive prediction always counts as an error.
pub fn delta1_err(pred: &[f64], gt: &[f32], mask: &[bool]) -> Result<f64> {
    check_lengths("delta1_err", pred, gt, mask)?;
    let n = valid_count(mask)?;
    let bad = (0..pred.len())
        .filter(|&i| mask[i])
        .filter(|&i| {
            let (p, g) = (pred[i], gt[i] as f64);
            p <= 0.0 || (p / g).max(g / p) >= DELTA1_THRESHOLD
        })
        .count();
    Ok(bad as f64 / n as f64)
}

/// Total-least-squares plane through `points`: unit normal and centroid,
/// or `None` when the points do not span two directions.
pub fn fit_plane(points: &[Vector3<f64>]) -> Option<(Vector3<f64>, Vector3<f64>)> {
    if points.len() < 3 {
        return None;
    }
    let centroid = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (mid, top) = (eig.eigenvalues[order[1]], eig.eigenvalues[order[2]]);
    if top.is_nan() || top <= 0.0 || mid <= 1e-12 * top {
        return None;
    }
    Some((eig.eigenvectors.column(order[0]).normalize(), centroid))
}

/// Planarity (RMS distance to the fitted plane, cm) and orientation
/// error (degrees, folded to `[0, 90]`) averaged over annotated planes.
pub fn plane_metrics(pred: &[f64], sample: &DepthSample) -> Result<(f64, f64)> {
    if pred.len() != sample.pixels() {
        return Err(Error::Data("prediction size does not match the sample".into()));
    }
    let mut fla = Vec::new();
    let mut ori = Vec::new();
    for plane in &sample.planes {
        if plane.pixel_count() < MIN_PLANE_PIXELS {
            continue;
        }
        let points: Vec<Vector3<f64>> = (0..pred.len())
            .filter(|&i| plane.mask[i] && pred[i] > 0.0)
            .map(|i| {
                let p = sample
                    .intrinsics
                    .backproject(i % sample.width, i / sample.width, pred[i]);
                Vector3::new(p[0], p[1], p[2])
            })
            .collect();
        let Some((normal, centroid)) = fit_plane(&points) else {
            continue;
        };
        let ms = points.iter().map(|p| (p - centroid).dot(&normal).powi(2)).sum::<f64>() / points.len() as f64;
        fla.push(ms.sqrt() * 100.0);
        let gt = Vector3::from(plane.normal).normalize();
        let cos = normal.dot(&gt).abs().min(1.0);
        ori.push(cos.acos().to_degrees());
    }
    if fla.is_empty() {
        return Err(Error::Data("no annotated plane could be fitted".into()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok((mean(&fla), mean(&ori)))
}

pub fn widen(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

/// Metrics of one prediction after L1 alignment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleMetrics {
    pub scale: f64,
    pub absrel: f64,
    pub delta1_err: f64,
    pub planes: Option<(f64, f64)>,
}

/// Align an un-normalised prediction to the sample's ground truth and score it.
pub fn score(pred: &[f64], sample: &DepthSample) -> Result<SampleMetrics> {
    let scale = align_scale(pred, &sample.depth, &sample.mask)?;
    let aligned = apply_scale(pred, scale);
    Ok(SampleMetrics {
        scale,
        absrel: absrel(&aligned, &sample.depth, &sample.mask)?,
        delta1_err: delta1_err(&aligned, &sample.depth, &sample.mask)?,
        planes: plane_metrics(&aligned, sample).ok(),
    })
}

/// Decode composed features into metric depth using the sample's own
/// 98th percentile.
pub fn decode_depth(vq: &VqModel, features: &crate::tensor::Tensor, sample: &DepthSample) -> Result<Vec<f64>> {
    let (_, d98) = normalize_depth(&sample.depth, &sample.mask)?;
    Ok(widen(&denormalize_depth(&vq.decode(features)?, d98)))
}

/// AbsRel after decoding each cumulative prefix `Σ_{i<=k} η(maps_i)`.
pub fn prefix_absrel(vq: &VqModel, maps: &[TokenMap], sample: &DepthSample) -> Result<Vec<f64>> {
    let sums = vq.partial_sums(maps)?;
    sums[1..]
        .iter()
        .map(|f| Ok(score(&decode_depth(vq, f, sample)?, sample)?.absrel))
        .collect()
}

/// Autoencoder round trip AbsRel for one sample.
pub fn reconstruction_absrel(vq: &VqModel, sample: &DepthSample) -> Result<f64> {
    let (norm, d98) = normalize_depth(&sample.depth, &sample.mask)?;
    let pred = widen(&denormalize_depth(&vq.reconstruct(&norm)?, d98));
    Ok(score(&pred, sample)?.absrel)
}

/// Mean AbsRel per scale plus the autoencoder floor.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleCurve {
    pub absrel: Vec<f64>,
    pub floor: f64,
}

impl ScaleCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("k,absrel,floor\n");
        for (k, a) in self.absrel.iter().enumerate() {
            s.push_str(&format!("{},{},{}\n", k + 1, a, self.floor));
        }
        s
    }
}

fn mean_columns(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len() as f64;
    (0..rows[0].len())
        .map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n)
        .collect()
}

/// Greedy predictions of `model` for each sample.
pub fn predict_maps(model: &VarModel, vq: &VqModel, samples: &[DepthSample]) -> Result<Vec<Vec<TokenMap>>> {
    samples
        .par_iter()
        .map(|s| {
            let img = image_tokens(s, vq)?;
            Ok(model.infer(&[img], vq)?.maps.remove(0))
        })
        .collect()
}

/// Per-scale reconstruction quality of the model's cumulative predictions.
pub fn per_scale_curve(model: &VarModel, vq: &VqModel, samples: &[DepthSample]) -> Result<ScaleCurve> {
    let maps = predict_maps(model, vq, samples)?;
    curve_for(vq, samples, &maps)
}

/// Per-scale curve for given maps (for instance the autoencoder's own decomposition).
pub fn curve_for(vq: &VqModel, samples: &[DepthSample], maps: &[Vec<TokenMap>]) -> Result<ScaleCurve> {
    if samples.is_empty() || samples.len() != maps.len() {
        return Err(Error::Data("need one map list per sample".into()));
    }
    let rows = samples
        .par_iter()
        .zip(maps)
        .map(|(s, m)| prefix_absrel(vq, m, s))
        .collect::<Result<Vec<_>>>()?;
    let floors = samples
        .par_iter()
        .map(|s| reconstruction_absrel(vq, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(ScaleCurve {
        absrel: mean_columns(&rows),
        floor: floors.iter().sum::<f64>() / floors.len() as f64,
    })
}

/// The autoencoder's decomposition of each sample's depth.
pub fn teacher_maps(vq: &VqModel, samples: &[DepthSample]) -> Result<Vec<Vec<TokenMap>>> {
    samples
        .par_iter()
        .map(|s| {
            let (norm, _) = normalize_depth(&s.depth, &s.mask)?;
            vq.decompose(&vq.encode(&norm)?)
        })
        .collect()
}

/// Final-scale metrics of `model` on `samples`, as one report row.
pub fn evaluate(
    model: &VarModel,
    vq: &VqModel,
    samples: &[DepthSample],
    model_name: &str,
    dataset: &str,
) -> Result<ReportRow> {
    let maps = predict_maps(model, vq, samples)?;
    let scored = samples
        .par_iter()
        .zip(&maps)
        .map(|(s, m)| score(&decode_depth(vq, &vq.compose(m)?, s)?, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(ReportRow::from_samples(model_name, dataset, &scored))
}
