//! Read downsampling and value normalization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};

use super::ContactMap;
use crate::error::{Error, Result};

/// Percentile at which values are clipped before scaling to `[0, 1]`.
pub const CLIP_PERCENTILE: f64 = 99.9;

/// Thins every upper-triangle count (rounded half to even) with a
/// `Binomial(count, ratio)` draw and mirrors the result.
pub fn downsample_reads(map: &ContactMap, ratio: f64, seed: u64) -> Result<ContactMap> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::domain(format!("ratio must lie in (0, 1], got {ratio}")));
    }
    let n = map.n();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let reads = map.get(i, j).round_ties_even();
            let v = if reads == 0.0 {
                0.0
            } else {
                let dist = Binomial::new(reads as u64, ratio)
                    .map_err(|e| Error::domain(format!("binomial({reads}, {ratio}): {e}")))?;
                dist.sample(&mut rng) as f64
            };
            out[i * n + j] = v;
            out[j * n + i] = v;
        }
    }
    Ok(map.with_counts(out))
}

/// Percentile `p` (0..=100) with linear interpolation between order
/// statistics.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::domain("percentile of an empty set"));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::domain(format!("percentile {p} outside [0, 100]")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = p / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    Ok(v[lo] + (v[hi] - v[lo]) * (rank - lo as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub map: ContactMap,
    /// Divisor applied after clipping; [`denormalize_values`] multiplies it back.
    pub scale: f64,
}

/// Clips at the [`CLIP_PERCENTILE`]th percentile and divides by it. When
/// that percentile is zero the maximum is used instead.
pub fn normalize_values(map: &ContactMap) -> Result<Normalized> {
    let max = map.counts().iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return Err(Error::domain(format!(
            "map {} is all zero and cannot be scaled",
            map.chrom()
        )));
    }
    let mut scale = percentile(map.counts(), CLIP_PERCENTILE)?;
    if scale == 0.0 {
        scale = max;
    }
    let counts = map.counts().iter().map(|&v| v.min(scale) / scale).collect();
    Ok(Normalized {
        map: map.with_counts(counts),
        scale,
    })
}

pub fn denormalize_values(map: &ContactMap, scale: f64) -> Result<ContactMap> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::domain(format!("invalid scale {scale}")));
    }
    Ok(map.with_counts(map.counts().iter().map(|v| v * scale).collect()))
}
