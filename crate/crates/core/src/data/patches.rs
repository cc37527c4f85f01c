//! Non-overlapping square patches and chromosome-level dataset splits.

use std::collections::BTreeSet;

use super::ContactMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PATCH_SIZE: usize = 40;

/// A `1 x size x size` block whose top-left bin is
/// `(row_block * size, col_block * size)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub row_block: usize,
    pub col_block: usize,
    pub values: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub size: usize,
    /// Blocks per side; the set tiles the top-left `blocks * size` square.
    pub blocks: usize,
    /// Bin count of the source map.
    pub source_n: usize,
    pub bin_size: u64,
    pub chrom: String,
    /// Row-major over blocks.
    pub patches: Vec<Patch>,
}

impl PatchSet {
    pub fn tiled_n(&self) -> usize {
        self.blocks * self.size
    }

    /// Same layout with new patch values, for example network predictions.
    pub fn with_values(&self, values: Vec<Tensor>) -> Result<PatchSet> {
        if values.len() != self.patches.len() {
            return Err(Error::domain(format!(
                "{} values for {} patches",
                values.len(),
                self.patches.len()
            )));
        }
        let patches = self
            .patches
            .iter()
            .zip(values)
            .map(|(p, v)| {
                if v.numel() != self.size * self.size {
                    return Err(Error::domain(format!("patch value has shape {:?}", v.shape())));
                }
                Ok(Patch {
                    row_block: p.row_block,
                    col_block: p.col_block,
                    values: v.reshape([1, self.size, self.size])?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(PatchSet {
            patches,
            ..self.clone()
        })
    }
}

pub fn extract_patches(map: &ContactMap) -> Result<PatchSet> {
    extract_patches_sized(map, PATCH_SIZE)
}

/// Cuts `floor(n / size)^2` patches; trailing bins are dropped.
pub fn extract_patches_sized(map: &ContactMap, size: usize) -> Result<PatchSet> {
    let n = map.n();
    if size == 0 || n < size {
        return Err(Error::domain(format!("a {n} x {n} map holds no {size} x {size} patch")));
    }
    let blocks = n / size;
    let mut patches = Vec::with_capacity(blocks * blocks);
    for rb in 0..blocks {
        for cb in 0..blocks {
            let mut v = Vec::with_capacity(size * size);
            for r in 0..size {
                let start = (rb * size + r) * n + cb * size;
                v.extend_from_slice(&map.counts()[start..start + size]);
            }
            patches.push(Patch {
                row_block: rb,
                col_block: cb,
                values: Tensor::new([1, size, size], v)?,
            });
        }
    }
    Ok(PatchSet {
        size,
        blocks,
        source_n: n,
        bin_size: map.bin_size(),
        chrom: map.chrom().to_owned(),
        patches,
    })
}

/// Writes every patch back into a `blocks * size` square and symmetrizes
/// it with its transpose (negative values clamp to zero). Exact on patches
/// cut from a valid map.
pub fn reassemble(set: &PatchSet) -> Result<ContactMap> {
    let (size, m) = (set.size, set.tiled_n());
    let mut full = vec![0.0; m * m];
    let mut filled = vec![false; set.blocks * set.blocks];
    for p in &set.patches {
        if p.row_block >= set.blocks || p.col_block >= set.blocks || p.values.numel() != size * size {
            return Err(Error::domain(format!(
                "patch ({}, {}) does not fit the layout",
                p.row_block, p.col_block
            )));
        }
        let slot = &mut filled[p.row_block * set.blocks + p.col_block];
        if *slot {
            return Err(Error::domain(format!(
                "duplicate patch ({}, {})",
                p.row_block, p.col_block
            )));
        }
        *slot = true;
        for r in 0..size {
            let start = (p.row_block * size + r) * m + p.col_block * size;
            full[start..start + size].copy_from_slice(&p.values.data()[r * size..(r + 1) * size]);
        }
    }
    if filled.iter().any(|f| !f) {
        return Err(Error::domain("patch set does not cover every block"));
    }
    ContactMap::symmetrized(m, &full, set.bin_size, set.chrom.clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::domain(format!("unknown split {other:?}"))),
        }
    }
}

/// Chromosome names (without a `chr` prefix) held out for validation and
/// testing; everything else trains.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitRule {
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl Default for SplitRule {
    fn default() -> Self {
        let names = |v: &[u32]| v.iter().map(u32::to_string).collect();
        Self {
            validation: names(&[2, 6, 10, 12]),
            test: names(&[4, 14, 16, 20]),
        }
    }
}

impl SplitRule {
    pub fn validate(&self) -> Result<()> {
        let v: BTreeSet<String> = self.validation.iter().map(|s| canonical(s)).collect();
        if let Some(c) = self.test.iter().map(|s| canonical(s)).find(|c| v.contains(c)) {
            return Err(Error::domain(format!("chromosome {c} is both validation and test")));
        }
        Ok(())
    }
}

fn canonical(label: &str) -> String {
    let t = label.trim();
    let stripped = t
        .get(..3)
        .filter(|p| p.eq_ignore_ascii_case("chr"))
        .map_or(t, |_| &t[3..]);
    stripped.to_ascii_uppercase()
}

fn is_known_chromosome(name: &str) -> bool {
    matches!(name, "X" | "Y" | "M" | "MT") || name.parse::<u32>().is_ok_and(|k| (1..=22).contains(&k))
}

/// Split for one chromosome label such as `chr4` or `4`. Unrecognized
/// labels log a warning and train.
pub fn assign_split(label: &str, rule: &SplitRule) -> Split {
    let c = canonical(label);
    if rule.test.iter().any(|t| canonical(t) == c) {
        Split::Test
    } else if rule.validation.iter().any(|v| canonical(v) == c) {
        Split::Validation
    } else {
        if !is_known_chromosome(&c) {
            log::warn!("unrecognized chromosome label {label:?}; assigning it to the training split");
        }
        Split::Train
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

/// Partitions chromosome labels, keeping their input order. Repeated labels
/// appear once.
pub fn split_dataset<S: AsRef<str>>(labels: &[S], rule: &SplitRule) -> Result<DatasetSplit> {
    rule.validate()?;
    let mut out = DatasetSplit::default();
    let mut seen = BTreeSet::new();
    for l in labels {
        let l = l.as_ref();
        if !seen.insert(l.to_owned()) {
            continue;
        }
        match assign_split(l, rule) {
            Split::Train => out.train.push(l.to_owned()),
            Split::Validation => out.validation.push(l.to_owned()),
            Split::Test => out.test.push(l.to_owned()),
        }
    }
    Ok(out)
}
