use crate::error::{Error, Result};

/// Stabiliser added to the percentile before dividing.
pub const NORM_EPS: f32 = 1e-6;

/// Nearest-rank percentile (`q` in `(0, 1]`) of the depths under `mask`.
pub fn depth_percentile(depth: &[f32], mask: &[bool], q: f64) -> Result<f32> {
    let mut valid: Vec<f32> = depth.iter().zip(mask).filter(|(_, &m)| m).map(|(d, _)| *d).collect();
    if valid.is_empty() {
        return Err(Error::Data("depth map has no valid pixels".into()));
    }
    valid.sort_by(f32::total_cmp);
    let rank = (q * valid.len() as f64).ceil().max(1.0) as usize;
    Ok(valid[rank.min(valid.len()) - 1])
}

/// Scale-invariant normalisation `D / (D98 + eps) * 2 - 1`.
///
/// The 98th percentile is taken over valid pixels only. Returns the
/// normalised raster (every pixel, valid or not) and the percentile, which
/// [`denormalize_depth`] needs to invert the mapping.
pub fn normalize_depth(depth: &[f32], mask: &[bool]) -> Result<(Vec<f32>, f32)> {
    let d98 = depth_percentile(depth, mask, 0.98)?;
    let denom = d98 + NORM_EPS;
    Ok((depth.iter().map(|d| d / denom * 2.0 - 1.0).collect(), d98))
}

pub fn denormalize_depth(normalized: &[f32], d98: f32) -> Vec<f32> {
    let denom = d98 + NORM_EPS;
    normalized.iter().map(|v| (v + 1.0) / 2.0 * denom).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_depth_maps_near_one() {
        let (n, d98) = normalize_depth(&[2.5; 9], &[true; 9]).unwrap();
        assert_eq!(d98, 2.5);
        let want = 2.0 * 2.5 / (2.5 + NORM_EPS) - 1.0;
        assert!(n.iter().all(|v| (v - want).abs() < 1e-7));
    }

    #[test]
    fn zero_depth_maps_to_minus_one_exactly() {
        let (n, _) = normalize_depth(&[0.0, 3.0], &[false, true]).unwrap();
        assert_eq!(n[0], -1.0);
    }

    #[test]
    fn ramp_uses_nearest_rank() {
        let depth: Vec<f32> = (1..=100).map(|v| v as f32).collect();
        let (n, d98) = normalize_depth(&depth, &[true; 100]).unwrap();
        assert_eq!(d98, 98.0);
        let want = 2.0 * 98.0 / (98.0 + 1e-6) - 1.0;
        assert!((n[97] as f64 - want).abs() < 1e-6);
    }

    #[test]
    fn percentile_ignores_masked_pixels() {
        let depth = [1.0, 2.0, 1000.0];
        assert_eq!(depth_percentile(&depth, &[true, true, false], 0.98).unwrap(), 2.0);
    }

    #[test]
    fn empty_mask_is_an_error() {
        assert!(matches!(
            normalize_depth(&[1.0, 2.0], &[false, false]),
            Err(Error::Data(_))
        ));
    }

    proptest! {
        #[test]
        fn monotone_and_percentile_near_one(
            depth in prop::collection::vec(0.05f32..50.0, 2..200),
        ) {
            let mask = vec![true; depth.len()];
            let (n, d98) = normalize_depth(&depth, &mask).unwrap();
            let mut pairs: Vec<(f32, f32)> = depth.iter().copied().zip(n.iter().copied()).collect();
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            for w in pairs.windows(2) {
                if w[0].0 < w[1].0 {
                    prop_assert!(w[0].1 <= w[1].1);
                }
            }
            let at = depth.iter().position(|d| *d == d98).unwrap();
            prop_assert!(n[at] > 1.0 - 1e-5 && n[at] <= 1.0);
            let back = denormalize_depth(&n, d98);
            for (b, d) in back.iter().zip(&depth) {
                prop_assert!((b - d).abs() <= 1e-5 * d.max(1.0));
            }
        }
    }
}
