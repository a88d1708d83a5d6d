//! Central finite-difference gradient checking.
//!
//! The checked function maps graph inputs to a tensor `y`; the scalar under
//! test is `Σ y ⊙ R` for a fixed pseudo-random `R`. Numeric derivatives only
//! ever evaluate forward passes, and the projection is accumulated in f64
//! outside the graph so the subtraction `f(x+h) - f(x-h)` loses as little
//! precision as possible.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Per-input `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`.
    pub relative_errors: Vec<f64>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Compare analytic and central-difference gradients of `f` at `inputs`.
///
/// Every input is inserted as a tracked leaf. Inputs whose analytic and
/// numeric gradients are both below `1e-7` in norm count as exact.
pub fn check_gradients<F>(inputs: &[Tensor], step: f32, seed: u64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let out_shape = g.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = Tensor::from_fn(&out_shape, |_| rng.random_range(-1.0..1.0));
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w)?;
    let loss = g.sum(prod);
    let grads = g.backward(loss)?;

    let project = |probe: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = probe.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(y, r)| *y as f64 * *r as f64)
            .sum())
    };

    let mut relative_errors = Vec::with_capacity(inputs.len());
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        let mut numeric = vec![0.0f64; input.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = orig + step;
            let plus = project(&probe)?;
            probe[i].data_mut()[j] = orig - step;
            let minus = project(&probe)?;
            probe[i].data_mut()[j] = orig;
            // The perturbation actually applied in f32 can differ from `step`.
            let span = ((orig + step) as f64) - ((orig - step) as f64);
            *slot = (plus - minus) / span;
        }
        let diff: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (*a as f64 - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let na = analytic.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
        let denom = na.max(nn);
        relative_errors.push(if denom < 1e-7 { 0.0 } else { diff / denom });
    }
    Ok(GradCheckReport { relative_errors })
}
