//! Synthetic contact maps with distance decay, TAD blocks and loop peaks.
//!
//! The expected count between bins `i` and `j` is
//! `depth / (1 + |i - j|)`, multiplied by `tad_enrichment` when both bins
//! lie in the same TAD and by `loop_enrichment` at a looped TAD's corner.
//! Observed counts are Poisson draws, so the output is an integer matrix.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use super::ContactMap;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    /// Expected count on the main diagonal outside TADs.
    pub depth: f64,
    pub tads: usize,
    /// How many of the TADs get a corner loop.
    pub loops: usize,
    pub tad_enrichment: f64,
    pub loop_enrichment: f64,
    pub bin_size: u64,
    pub chrom: String,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            depth: 1000.0,
            tads: 4,
            loops: 4,
            tad_enrichment: 3.0,
            loop_enrichment: 8.0,
            bin_size: 10_000,
            chrom: "chrS".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticMap {
    pub map: ContactMap,
    /// Half-open bin ranges `[start, end)`.
    pub tads: Vec<(usize, usize)>,
    /// Loop anchors `(i, j)` with `i < j`.
    pub loops: Vec<(usize, usize)>,
}

/// Bins `[0, n)` are cut into `tads` equal slots; each slot holds one TAD
/// covering a random half to all of the slot.
fn place_tads(n: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let slot = n.checked_div(count).unwrap_or(0);
    if slot < 2 {
        return Vec::new();
    }
    (0..count)
        .map(|k| {
            let len = rng.gen_range(slot.div_ceil(2)..=slot).max(2);
            let start = k * slot + rng.gen_range(0..=slot - len);
            (start, start + len)
        })
        .collect()
}

pub fn synthesize_map(n: usize, seed: u64, params: &SynthParams) -> Result<SyntheticMap> {
    if n < super::PATCH_SIZE {
        return Err(Error::domain(format!(
            "synthetic maps need at least {} bins, got {n}",
            super::PATCH_SIZE
        )));
    }
    if !(params.depth > 0.0) || !params.depth.is_finite() {
        return Err(Error::domain(format!("depth must be positive, got {}", params.depth)));
    }
    if !(params.tad_enrichment > 0.0 && params.loop_enrichment > 0.0) {
        return Err(Error::domain("enrichment factors must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tads = place_tads(n, params.tads, &mut rng);
    let loops: Vec<(usize, usize)> = tads.iter().take(params.loops).map(|&(s, e)| (s, e - 1)).collect();

    let mut tad_of = vec![usize::MAX; n];
    for (k, &(s, e)) in tads.iter().enumerate() {
        tad_of[s..e].fill(k);
    }
    let mut counts = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let mut lambda = params.depth / (1 + j - i) as f64;
            if tad_of[i] != usize::MAX && tad_of[i] == tad_of[j] {
                lambda *= params.tad_enrichment;
            }
            if loops.contains(&(i, j)) {
                lambda *= params.loop_enrichment;
            }
            let v = Poisson::new(lambda)
                .map_err(|e| Error::domain(format!("poisson({lambda}): {e}")))?
                .sample(&mut rng);
            counts[i * n + j] = v;
            counts[j * n + i] = v;
        }
    }
    Ok(SyntheticMap {
        map: ContactMap::new(n, counts, params.bin_size, params.chrom.clone())?,
        tads,
        loops,
    })
}
