//! Contact maps and the preprocessing pipeline that turns them into paired
//! low/high-coverage training patches.
//!
//! Inputs follow balance, downsample, normalize, patch; targets skip the
//! downsampling step. [`prepare_pairs`] runs both branches.

mod archive;
mod balance;
mod io;
mod patches;
mod sampling;
mod synth;

pub use archive::{read_patch_set, write_patch_set, Manifest};
pub use balance::{balance, balance_with_bias, Balanced, DEFAULT_BALANCE_MAX_ITER, DEFAULT_BALANCE_TOL};
pub use io::{format_map, load_map, parse_map, sniff_format, write_atomic, MapFormat, DEFAULT_BIN_SIZE};
pub use patches::{
    assign_split, extract_patches, extract_patches_sized, reassemble, split_dataset, DatasetSplit, Patch, PatchSet,
    Split, SplitRule, PATCH_SIZE,
};
pub use sampling::{denormalize_values, downsample_reads, normalize_values, percentile, Normalized, CLIP_PERCENTILE};
pub use synth::{synthesize_map, SynthParams, SyntheticMap};

use crate::error::{Error, Result};

/// Largest `|c_ij - c_ji|` tolerated when reading a dense matrix.
pub const SYMMETRY_TOLERANCE: f64 = 1e-6;

/// Symmetric, non-negative `n x n` contact matrix of one chromosome.
#[derive(Debug, Clone, PartialEq)]
pub struct ContactMap {
    n: usize,
    bin_size: u64,
    chrom: String,
    counts: Vec<f64>,
}

impl ContactMap {
    /// Validates `counts` (row-major, `n x n`). Entries that differ from
    /// their mirror by at most [`SYMMETRY_TOLERANCE`] are averaged.
    pub fn new(n: usize, counts: Vec<f64>, bin_size: u64, chrom: impl Into<String>) -> Result<Self> {
        if counts.len() != n * n {
            return Err(Error::domain(format!(
                "{} values cannot fill a {n} x {n} map",
                counts.len()
            )));
        }
        let mut counts = counts;
        for i in 0..n {
            for j in 0..n {
                let v = counts[i * n + j];
                if !v.is_finite() {
                    return Err(Error::format(Some(i + 1), format!("non-finite count at ({i}, {j})")));
                }
                if v < 0.0 {
                    return Err(Error::format(Some(i + 1), format!("negative count {v} at ({i}, {j})")));
                }
            }
        }
        for i in 0..n {
            for j in i + 1..n {
                let (a, b) = (counts[i * n + j], counts[j * n + i]);
                if (a - b).abs() > SYMMETRY_TOLERANCE {
                    return Err(Error::format(
                        Some(i + 1),
                        format!("matrix is not symmetric: ({i}, {j}) = {a} but ({j}, {i}) = {b}"),
                    ));
                }
                let m = 0.5 * (a + b);
                counts[i * n + j] = m;
                counts[j * n + i] = m;
            }
        }
        Ok(Self {
            n,
            bin_size,
            chrom: chrom.into(),
            counts,
        })
    }

    /// Builds a map from an arbitrary square matrix by averaging it with its
    /// transpose and clamping negative values to zero.
    pub fn symmetrized(n: usize, values: &[f64], bin_size: u64, chrom: impl Into<String>) -> Result<Self> {
        if values.len() != n * n {
            return Err(Error::domain(format!(
                "{} values cannot fill a {n} x {n} map",
                values.len()
            )));
        }
        let mut counts = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let m = 0.5 * (values[i * n + j] + values[j * n + i]);
                if !m.is_finite() {
                    return Err(Error::NonFinite(format!("matrix entry ({i}, {j})")));
                }
                counts[i * n + j] = m.max(0.0);
            }
        }
        Ok(Self {
            n,
            bin_size,
            chrom: chrom.into(),
            counts,
        })
    }

    /// Same metadata, new values. Callers guarantee the invariants.
    pub(crate) fn with_counts(&self, counts: Vec<f64>) -> Self {
        debug_assert_eq!(counts.len(), self.n * self.n);
        Self {
            n: self.n,
            bin_size: self.bin_size,
            chrom: self.chrom.clone(),
            counts,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn bin_size(&self) -> u64 {
        self.bin_size
    }

    pub fn chrom(&self) -> &str {
        &self.chrom
    }

    pub fn set_chrom(&mut self, chrom: impl Into<String>) {
        self.chrom = chrom.into();
    }

    /// Row-major values.
    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.counts[i * self.n + j]
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.counts.chunks(self.n.max(1)).map(|r| r.iter().sum()).collect()
    }

    /// Top-left `m x m` block.
    pub fn truncated(&self, m: usize) -> Result<Self> {
        if m > self.n {
            return Err(Error::domain(format!("cannot truncate a {} map to {m}", self.n)));
        }
        let counts = (0..m)
            .flat_map(|i| self.counts[i * self.n..i * self.n + m].iter().copied())
            .collect();
        Ok(Self {
            n: m,
            bin_size: self.bin_size,
            chrom: self.chrom.clone(),
            counts,
        })
    }
}

/// Patch pairs for one chromosome plus the scales needed to undo value
/// normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedPairs {
    pub inputs: PatchSet,
    pub targets: PatchSet,
    pub input_scale: f64,
    pub target_scale: f64,
}

/// Balance, then derive the low-coverage input (downsampled at `ratio`) and
/// the high-coverage target, normalize each to `[0, 1]` and cut both into
/// aligned `patch_size` patches.
pub fn prepare_pairs(raw: &ContactMap, ratio: f64, seed: u64, patch_size: usize) -> Result<PreparedPairs> {
    let balanced = balance(raw, DEFAULT_BALANCE_TOL, DEFAULT_BALANCE_MAX_ITER)?;
    let low = downsample_reads(&balanced, ratio, seed)?;
    let input = normalize_values(&low)?;
    let target = normalize_values(&balanced)?;
    Ok(PreparedPairs {
        inputs: extract_patches_sized(&input.map, patch_size)?,
        targets: extract_patches_sized(&target.map, patch_size)?,
        input_scale: input.scale,
        target_scale: target.scale,
    })
}
