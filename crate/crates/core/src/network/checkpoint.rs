//! Binary checkpoint container.
//!
//! Layout, all integers little-endian `u32` unless noted:
//!
//! ```text
//! u8   version
//! config: channels, blocks_per_stage, state_size, side, lefn_expansion,
//!         u8 global_residual
//! count
//! count x { name_len, name (UTF-8), rank, rank x dim, prod(dims) x f32 }
//! ```
//!
//! Values are stored as `f32`, so a reloaded model agrees with the saved one
//! to single precision.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u8 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::format(None, format!("value {v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn write_checkpoint<W: Write>(model: &Model, mut w: W) -> Result<()> {
    let cfg = model.config();
    let mut out = vec![CHECKPOINT_VERSION];
    for v in [
        cfg.channels,
        cfg.blocks_per_stage,
        cfg.state_size,
        cfg.side,
        cfg.lefn_expansion,
    ] {
        put_u32(&mut out, v)?;
    }
    out.push(cfg.global_residual as u8);
    put_u32(&mut out, model.params().len())?;
    for (name, t) in model.params().iter() {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    w.write_all(&out)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::format(None, format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Model> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    let version = c.u8()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(None, format!("unsupported checkpoint version {version}")));
    }
    let config = ModelConfig {
        channels: c.u32()?,
        blocks_per_stage: c.u32()?,
        state_size: c.u32()?,
        side: c.u32()?,
        lefn_expansion: c.u32()?,
        global_residual: c.u8()? != 0,
    };
    let mut model = Model::new(config, 0)?;
    let count = c.u32()?;
    if count != model.params().len() {
        return Err(Error::format(
            None,
            format!(
                "checkpoint holds {count} tensors, configuration needs {}",
                model.params().len()
            ),
        ));
    }
    for _ in 0..count {
        let len = c.u32()?;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::format(None, "parameter name is not UTF-8"))?
            .to_owned();
        let rank = c.u32()?;
        let dims = (0..rank).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        let numel: usize = dims.iter().product();
        let raw = c.take(
            numel
                .checked_mul(4)
                .ok_or_else(|| Error::format(None, "tensor too large"))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let id = model
            .params()
            .find(&name)
            .ok_or_else(|| Error::format(None, format!("unknown parameter {name}")))?;
        model.params_mut().set(id, Tensor::new(dims, data)?)?;
    }
    if c.pos != buf.len() {
        return Err(Error::format(None, "trailing bytes after last tensor"));
    }
    Ok(model)
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    write_checkpoint(model, &mut bytes)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    read_checkpoint(fs::File::open(path)?)
}
