//! Binary patch archives and the text manifest that pairs them.
//!
//! Archive layout, integers little-endian:
//!
//! ```text
//! b"HPAT" u8 version
//! u32 size, u32 blocks, u32 source_n, u64 bin_size, u32 chrom_len, chrom
//! u32 count
//! count x { u32 row_block, u32 col_block, size^2 x f64 }
//! ```

use std::io::{Read, Write};

use super::patches::{Patch, PatchSet, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"HPAT";
const VERSION: u8 = 1;

fn u32_of(v: usize) -> Result<[u8; 4]> {
    u32::try_from(v)
        .map(u32::to_le_bytes)
        .map_err(|_| Error::format(None, format!("{v} does not fit in u32")))
}

pub fn write_patch_set<W: Write>(set: &PatchSet, mut w: W) -> Result<()> {
    let mut out = Vec::with_capacity(64 + set.patches.len() * (8 + 8 * set.size * set.size));
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    for v in [set.size, set.blocks, set.source_n] {
        out.extend_from_slice(&u32_of(v)?);
    }
    out.extend_from_slice(&set.bin_size.to_le_bytes());
    out.extend_from_slice(&u32_of(set.chrom.len())?);
    out.extend_from_slice(set.chrom.as_bytes());
    out.extend_from_slice(&u32_of(set.patches.len())?);
    for p in &set.patches {
        if p.values.numel() != set.size * set.size {
            return Err(Error::domain("patch size does not match the set"));
        }
        out.extend_from_slice(&u32_of(p.row_block)?);
        out.extend_from_slice(&u32_of(p.col_block)?);
        for v in p.values.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&out)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::format(None, format!("patch archive truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn read_patch_set<R: Read>(mut r: R) -> Result<PatchSet> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut c = Reader { buf: &buf, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::format(None, "not a patch archive"));
    }
    let version = c.take(1)?[0];
    if version != VERSION {
        return Err(Error::format(
            None,
            format!("unsupported patch archive version {version}"),
        ));
    }
    let (size, blocks, source_n) = (c.u32()?, c.u32()?, c.u32()?);
    let bin_size = c.u64()?;
    let len = c.u32()?;
    let chrom =
        String::from_utf8(c.take(len)?.to_vec()).map_err(|_| Error::format(None, "chromosome label is not UTF-8"))?;
    let count = c.u32()?;
    let mut patches = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let (row_block, col_block) = (c.u32()?, c.u32()?);
        let raw = c.take(size * size * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        patches.push(Patch {
            row_block,
            col_block,
            values: Tensor::new([1, size, size], data)?,
        });
    }
    if c.pos != buf.len() {
        return Err(Error::format(None, "trailing bytes after last patch"));
    }
    Ok(PatchSet {
        size,
        blocks,
        source_n,
        bin_size,
        chrom,
        patches,
    })
}

/// Describes one preprocessed chromosome: `key=value` lines followed by an
/// `index,row_block,col_block` table of patch origins.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub chrom: String,
    pub split: Split,
    pub ratio: f64,
    pub seed: u64,
    pub n: usize,
    pub bin_size: u64,
    pub patch_size: usize,
    pub input_scale: f64,
    pub target_scale: f64,
    /// Archive file names, relative to the manifest.
    pub inputs: String,
    pub targets: String,
    pub origins: Vec<(usize, usize)>,
}

impl Manifest {
    pub fn render(&self) -> String {
        let mut s = format!(
            "chrom={}\nsplit={}\nratio={}\nseed={}\nn={}\nbin_size={}\npatch_size={}\ninput_scale={}\ntarget_scale={}\ninputs={}\ntargets={}\npatches={}\nindex,row_block,col_block\n",
            self.chrom,
            self.split,
            self.ratio,
            self.seed,
            self.n,
            self.bin_size,
            self.patch_size,
            self.input_scale,
            self.target_scale,
            self.inputs,
            self.targets,
            self.origins.len()
        );
        for (k, (r, c)) in self.origins.iter().enumerate() {
            s.push_str(&format!("{k},{r},{c}\n"));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = std::collections::HashMap::new();
        let mut lines = text.lines().enumerate();
        for (i, line) in lines.by_ref() {
            if line == "index,row_block,col_block" {
                break;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(Some(i + 1), format!("expected key=value, found {line:?}")))?;
            kv.insert(k.to_owned(), (i + 1, v.to_owned()));
        }
        fn field<T: std::str::FromStr>(
            kv: &std::collections::HashMap<String, (usize, String)>,
            key: &str,
        ) -> Result<T> {
            let (line, v) = kv
                .get(key)
                .ok_or_else(|| Error::format(None, format!("manifest lacks {key}")))?;
            v.parse()
                .map_err(|_| Error::format(Some(*line), format!("invalid value {v:?} for {key}")))
        }
        let split: String = field(&kv, "split")?;
        let count: usize = field(&kv, "patches")?;
        let mut origins = Vec::with_capacity(count);
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            let parse = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| Error::format(Some(i + 1), format!("bad origin row {line:?}")))
            };
            if parts.len() != 3 || parse(parts[0])? != origins.len() {
                return Err(Error::format(Some(i + 1), format!("bad origin row {line:?}")));
            }
            origins.push((parse(parts[1])?, parse(parts[2])?));
        }
        if origins.len() != count {
            return Err(Error::format(
                None,
                format!("manifest lists {} origins, header says {count}", origins.len()),
            ));
        }
        Ok(Self {
            chrom: field(&kv, "chrom")?,
            split: split.parse()?,
            ratio: field(&kv, "ratio")?,
            seed: field(&kv, "seed")?,
            n: field(&kv, "n")?,
            bin_size: field(&kv, "bin_size")?,
            patch_size: field(&kv, "patch_size")?,
            input_scale: field(&kv, "input_scale")?,
            target_scale: field(&kv, "target_scale")?,
            inputs: field(&kv, "inputs")?,
            targets: field(&kv, "targets")?,
            origins,
        })
    }
}
