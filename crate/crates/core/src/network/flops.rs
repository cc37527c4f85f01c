//! Analytic floating-point operation count of one forward pass.
//!
//! A multiply-accumulate counts as two flops. Biases, activations and
//! residual additions are not counted.

use super::ModelConfig;
use crate::error::Result;

/// Per state element and step: discretization (3 MACs), state update
/// (2 MACs) and readout (1 MAC).
pub const SCAN_FLOPS_PER_STATE: u64 = 12;
/// Per state element and step: the three `A`/`B`/`C` projections.
pub const SCAN_PROJECTION_FLOPS_PER_STATE: u64 = 6;
/// Per normalized element: mean, variance, normalization and affine.
pub const NORM_FLOPS_PER_ELEMENT: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlopKind {
    Conv,
    Scan,
    Norm,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopEntry {
    pub layer: String,
    pub kind: FlopKind,
    pub flops: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FlopReport {
    pub entries: Vec<FlopEntry>,
}

impl FlopReport {
    pub fn total(&self) -> u64 {
        self.entries.iter().map(|e| e.flops).sum()
    }

    pub fn by_kind(&self, kind: FlopKind) -> u64 {
        self.entries.iter().filter(|e| e.kind == kind).map(|e| e.flops).sum()
    }

    pub fn gflops(&self) -> f64 {
        self.total() as f64 / 1e9
    }

    fn push(&mut self, layer: String, kind: FlopKind, flops: u64) {
        self.entries.push(FlopEntry { layer, kind, flops });
    }
}

/// `2 k^2 C_in C_out H_out W_out`.
pub fn conv_flops(kernel: usize, c_in: usize, c_out: usize, h_out: usize, w_out: usize) -> u64 {
    2 * (kernel * kernel * c_in * c_out * h_out * w_out) as u64
}

fn block_flops(r: &mut FlopReport, name: &str, width: usize, side: usize, cfg: &ModelConfig) {
    let px = (side * side) as u64;
    let (d, n) = (width as u64, cfg.state_size as u64);
    let hidden = width * cfg.lefn_expansion;
    r.push(format!("{name}.norm1"), FlopKind::Norm, NORM_FLOPS_PER_ELEMENT * d * px);
    let per_path = px * d * n * (SCAN_FLOPS_PER_STATE + SCAN_PROJECTION_FLOPS_PER_STATE);
    r.push(format!("{name}.ss2d"), FlopKind::Scan, 4 * per_path);
    r.push(format!("{name}.norm2"), FlopKind::Norm, NORM_FLOPS_PER_ELEMENT * d * px);
    r.push(
        format!("{name}.lefn.expand"),
        FlopKind::Conv,
        conv_flops(1, width, hidden, side, side),
    );
    r.push(
        format!("{name}.lefn.local"),
        FlopKind::Conv,
        conv_flops(3, hidden, hidden, side, side),
    );
    r.push(
        format!("{name}.lefn.project"),
        FlopKind::Conv,
        conv_flops(1, hidden, width, side, side),
    );
}

pub fn count_flops(cfg: &ModelConfig) -> Result<FlopReport> {
    cfg.validate()?;
    let (c, s) = (cfg.channels, cfg.side);
    let mut r = FlopReport::default();
    let stage = |r: &mut FlopReport, name: &str, width: usize, side: usize| {
        for i in 0..cfg.blocks_per_stage {
            block_flops(r, &format!("{name}.{i}"), width, side, cfg);
        }
    };
    r.push("input_proj".into(), FlopKind::Conv, conv_flops(3, 1, c, s, s));
    stage(&mut r, "encoder1", c, s);
    r.push("down1".into(), FlopKind::Conv, conv_flops(2, c, 2 * c, s / 2, s / 2));
    stage(&mut r, "encoder2", 2 * c, s / 2);
    r.push(
        "down2".into(),
        FlopKind::Conv,
        conv_flops(2, 2 * c, 4 * c, s / 4, s / 4),
    );
    stage(&mut r, "bottleneck", 4 * c, s / 4);
    // a 2x2 stride-2 transposed conv touches every output pixel once per input channel
    r.push(
        "up2".into(),
        FlopKind::Conv,
        2 * (4 * c * 2 * c * (s / 2) * (s / 2)) as u64,
    );
    stage(&mut r, "decoder2", 4 * c, s / 2);
    r.push("up1".into(), FlopKind::Conv, 2 * (4 * c * c * s * s) as u64);
    stage(&mut r, "decoder1", 2 * c, s);
    r.push("reduce".into(), FlopKind::Conv, conv_flops(1, 2 * c, c, s, s));
    r.push("output_proj".into(), FlopKind::Conv, conv_flops(3, c, 1, s, s));
    Ok(r)
}
