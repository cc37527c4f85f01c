//! Text map formats.
//!
//! Dense: one whitespace-separated row per line. COO: a header `n bin_size`
//! followed by `i j count` triples, 0-indexed; the upper triangle suffices.
//! Blank lines and lines starting with `#` are ignored in both.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::ContactMap;
use crate::error::{Error, Result};

/// Bin size assigned to dense maps, which carry no header.
pub const DEFAULT_BIN_SIZE: u64 = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapFormat {
    Dense,
    Coo,
}

impl std::str::FromStr for MapFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dense" => Ok(MapFormat::Dense),
            "coo" => Ok(MapFormat::Coo),
            other => Err(Error::domain(format!("unknown map format {other:?}"))),
        }
    }
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

/// COO when the first line holds two integers and the second three tokens.
pub fn sniff_format(text: &str) -> MapFormat {
    let mut lines = content_lines(text);
    let header: Vec<&str> = lines
        .next()
        .map(|(_, l)| l.split_whitespace().collect())
        .unwrap_or_default();
    let second = lines.next().map(|(_, l)| l.split_whitespace().count());
    let integral = header.len() == 2 && header.iter().all(|t| t.parse::<u64>().is_ok());
    if integral && second.is_none_or(|c| c == 3) {
        MapFormat::Coo
    } else {
        MapFormat::Dense
    }
}

fn parse_value(tok: &str, line: usize) -> Result<f64> {
    tok.parse::<f64>()
        .map_err(|_| Error::format(Some(line), format!("cannot parse {tok:?} as a number")))
}

fn parse_dense(text: &str, chrom: &str) -> Result<ContactMap> {
    let mut rows = Vec::new();
    let mut lines = Vec::new();
    for (line, l) in content_lines(text) {
        let row = l
            .split_whitespace()
            .map(|t| parse_value(t, line))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
        lines.push(line);
    }
    let n = rows.len();
    if n == 0 {
        return Err(Error::format(None, "empty matrix"));
    }
    for (row, &line) in rows.iter().zip(&lines) {
        if row.len() != n {
            return Err(Error::format(
                Some(line),
                format!("expected {n} columns, found {}", row.len()),
            ));
        }
    }
    ContactMap::new(n, rows.concat(), DEFAULT_BIN_SIZE, chrom).map_err(|e| match e {
        Error::Format {
            line: Some(row),
            message,
        } => Error::Format {
            line: Some(lines[row - 1]),
            message,
        },
        other => other,
    })
}

fn parse_coo(text: &str, chrom: &str) -> Result<ContactMap> {
    let mut lines = content_lines(text);
    let (hline, header) = lines.next().ok_or_else(|| Error::format(None, "missing COO header"))?;
    let h: Vec<&str> = header.split_whitespace().collect();
    let parse_int = |t: &str, line| {
        t.parse::<u64>()
            .map_err(|_| Error::format(Some(line), format!("cannot parse {t:?} as a non-negative integer")))
    };
    if h.len() != 2 {
        return Err(Error::format(Some(hline), "COO header must be `n bin_size`"));
    }
    let n = parse_int(h[0], hline)? as usize;
    let bin_size = parse_int(h[1], hline)?;
    if n == 0 {
        return Err(Error::format(Some(hline), "map size must be positive"));
    }
    let mut seen: HashMap<(usize, usize), (f64, bool)> = HashMap::new();
    let mut counts = vec![0.0; n * n];
    for (line, l) in lines {
        let t: Vec<&str> = l.split_whitespace().collect();
        if t.len() != 3 {
            return Err(Error::format(Some(line), "expected `i j count`"));
        }
        let (i, j) = (parse_int(t[0], line)? as usize, parse_int(t[1], line)? as usize);
        let v = parse_value(t[2], line)?;
        if i >= n || j >= n {
            return Err(Error::format(
                Some(line),
                format!("index ({i}, {j}) outside a {n} x {n} map"),
            ));
        }
        if !v.is_finite() || v < 0.0 {
            return Err(Error::format(Some(line), format!("invalid count {v}")));
        }
        let key = (i.min(j), i.max(j));
        let upper = i <= j;
        if let Some(&(prev, prev_upper)) = seen.get(&key) {
            if prev_upper == upper || (prev - v).abs() > super::SYMMETRY_TOLERANCE {
                return Err(Error::format(Some(line), format!("conflicting entry for ({i}, {j})")));
            }
            continue;
        }
        seen.insert(key, (v, upper));
        counts[key.0 * n + key.1] = v;
        counts[key.1 * n + key.0] = v;
    }
    ContactMap::new(n, counts, bin_size, chrom)
}

/// Parses `text`; `format` defaults to [`sniff_format`].
pub fn parse_map(text: &str, format: Option<MapFormat>, chrom: &str) -> Result<ContactMap> {
    match format.unwrap_or_else(|| sniff_format(text)) {
        MapFormat::Dense => parse_dense(text, chrom),
        MapFormat::Coo => parse_coo(text, chrom),
    }
}

/// Reads a map file. The chromosome label is the file stem (`chr4.coo`
/// gives `chr4`).
pub fn load_map(path: &Path, format: Option<MapFormat>) -> Result<ContactMap> {
    let text = fs::read_to_string(path)?;
    let chrom = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
    parse_map(&text, format, chrom)
}

/// Renders `map`. Values use the shortest representation that reads back
/// to the same `f64`; COO lists non-zero upper-triangle entries.
pub fn format_map(map: &ContactMap, format: MapFormat) -> String {
    let n = map.n();
    let mut out = String::new();
    match format {
        MapFormat::Dense => {
            for i in 0..n {
                let row: Vec<String> = (0..n).map(|j| map.get(i, j).to_string()).collect();
                out.push_str(&row.join(" "));
                out.push('\n');
            }
        }
        MapFormat::Coo => {
            let _ = writeln!(out, "{n} {}", map.bin_size());
            for i in 0..n {
                for j in i..n {
                    let v = map.get(i, j);
                    if v != 0.0 {
                        let _ = writeln!(out, "{i} {j} {v}");
                    }
                }
            }
        }
    }
    out
}

/// Writes to a temporary sibling, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::domain(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}
