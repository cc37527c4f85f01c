//! Reverse-mode differentiation over a linear tape of coarse tensor ops.
//!
//! Every op appends one node holding its forward value; nodes are stored in
//! evaluation order, so a reverse sweep over the node list is a valid
//! topological order for the backward pass. Feature maps are single samples
//! laid out `channels x height x width`.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::ssm::{self, ScanCache, SsmView};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Tape handles of one selective scan's parameters.
#[derive(Debug, Clone, Copy)]
pub struct ScanVars {
    pub w_a: Var,
    pub b_a: Var,
    pub w_b: Var,
    pub b_b: Var,
    pub w_c: Var,
    pub b_c: Var,
    pub delta: Var,
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2x2 {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Gather {
        x: Var,
        index: Rc<[usize]>,
    },
    Scan {
        x: Var,
        params: ScanVars,
        cache: Box<ScanCache>,
    },
    L1 {
        pred: Var,
        target: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn spatial(t: &Tensor) -> (usize, usize) {
    let s = t.shape();
    (s[0], s[1..].iter().product())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Adds an input or parameter node.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// 2-D convolution with a `out x in x k x k` weight and zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (cin, h, wd) = self.value(x).chw()?;
        let ws = self.value(w).shape().to_vec();
        let [cout, wcin, k, k2] = ws[..] else {
            return Err(Error::domain(format!("conv weight must be rank 4, got {ws:?}")));
        };
        if wcin != cin || k != k2 {
            return Err(Error::domain(format!(
                "conv weight {ws:?} does not match input with {cin} channels"
            )));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::domain("input smaller than convolution kernel"));
        }
        if let Some(b) = b {
            if self.value(b).numel() != cout {
                return Err(Error::domain("conv bias length differs from output channels"));
            }
        }
        let geom = ConvGeom::new(cin, h, wd, cout, k, stride, pad);
        let mut out = vec![0.0; cout * geom.ho * geom.wo];
        conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &mut out,
        );
        let value = Tensor::new([cout, geom.ho, geom.wo], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, stride, pad }))
    }

    /// Stride-2 transposed convolution with a `in x out x 2 x 2` weight.
    pub fn conv_transpose2x2(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (cin, h, wd) = self.value(x).chw()?;
        let ws = self.value(w).shape().to_vec();
        let [wcin, cout, 2, 2] = ws[..] else {
            return Err(Error::domain(format!(
                "transposed conv weight must be in x out x 2 x 2, got {ws:?}"
            )));
        };
        if wcin != cin {
            return Err(Error::domain("transposed conv weight does not match input channels"));
        }
        let (ho, wo) = (2 * h, 2 * wd);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; cout * ho * wo];
        if let Some(b) = b {
            for (co, &bv) in self.value(b).data().iter().enumerate() {
                out[co * ho * wo..(co + 1) * ho * wo].fill(bv);
            }
        }
        for ci in 0..cin {
            for co in 0..cout {
                for ky in 0..2 {
                    for kx in 0..2 {
                        let wk = wv[((ci * cout + co) * 2 + ky) * 2 + kx];
                        for y in 0..h {
                            let xrow = &xv[(ci * h + y) * wd..(ci * h + y + 1) * wd];
                            let orow = &mut out[(co * ho + 2 * y + ky) * wo..(co * ho + 2 * y + ky + 1) * wo];
                            for (xx, &xval) in xrow.iter().enumerate() {
                                orow[2 * xx + kx] += wk * xval;
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new([cout, ho, wo], out)?;
        Ok(self.push(value, Op::ConvTranspose2x2 { x, w, b }))
    }

    /// Normalizes the channel vector at every spatial position.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xt = self.value(x);
        let (c, s) = spatial(xt);
        if self.value(gain).numel() != c || self.value(bias).numel() != c {
            return Err(Error::domain("layer norm affine parameters differ from channel count"));
        }
        let xv = xt.data();
        let g = self.value(gain).data();
        let bv = self.value(bias).data();
        let mut xhat = vec![0.0; c * s];
        let mut inv_std = vec![0.0; s];
        let mut out = vec![0.0; c * s];
        for p in 0..s {
            let mean = (0..c).map(|ch| xv[ch * s + p]).sum::<f64>() / c as f64;
            let var = (0..c).map(|ch| (xv[ch * s + p] - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[p] = is;
            for ch in 0..c {
                let xh = (xv[ch * s + p] - mean) * is;
                xhat[ch * s + p] = xh;
                out[ch * s + p] = g[ch] * xh + bv[ch];
            }
        }
        let value = Tensor::new(xt.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let out = xt.data().iter().map(|&v| gelu(v)).collect();
        let value = Tensor::new(xt.shape().to_vec(), out).expect("same shape");
        self.push(value, Op::Gelu { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(Error::domain(format!(
                "cannot add {:?} and {:?}",
                at.shape(),
                bt.shape()
            )));
        }
        let mut value = at.clone();
        value.add_assign(bt);
        Ok(self.push(value, Op::Add { a, b }))
    }

    /// Concatenates two feature maps along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ca, ha, wa) = self.value(a).chw()?;
        let (cb, hb, wb) = self.value(b).chw()?;
        if (ha, wa) != (hb, wb) {
            return Err(Error::domain("concatenated maps differ in spatial size"));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let value = Tensor::new([ca + cb, ha, wa], data)?;
        Ok(self.push(value, Op::Concat { a, b }))
    }

    /// Per-channel gather over the flattened spatial axis:
    /// `out[c][i] = x[c][index[i]]`. `shape` is the output shape, whose first
    /// axis must equal the input channel count.
    pub fn gather(&mut self, x: Var, index: Rc<[usize]>, shape: Vec<usize>) -> Result<Var> {
        let xt = self.value(x);
        let (c, s) = spatial(xt);
        if shape.first() != Some(&c) || shape[1..].iter().product::<usize>() != index.len() {
            return Err(Error::domain(format!("gather output shape {shape:?} is inconsistent")));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= s) {
            return Err(Error::domain(format!("gather index {bad} out of range {s}")));
        }
        let xv = xt.data();
        let l = index.len();
        let mut out = vec![0.0; c * l];
        for ch in 0..c {
            let src = &xv[ch * s..(ch + 1) * s];
            for (o, &i) in out[ch * l..(ch + 1) * l].iter_mut().zip(index.iter()) {
                *o = src[i];
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Gather { x, index }))
    }

    fn scan_view(&self, p: &ScanVars, state_size: usize, channels: usize) -> SsmView<'_> {
        SsmView {
            state_size,
            channels,
            w_a: self.value(p.w_a).data(),
            b_a: self.value(p.b_a).data(),
            w_b: self.value(p.w_b).data(),
            b_b: self.value(p.b_b).data(),
            w_c: self.value(p.w_c).data(),
            b_c: self.value(p.b_c).data(),
            delta: self.value(p.delta).data(),
        }
    }

    /// Input-selective scan over a `channels x len` sequence.
    pub fn selective_scan(&mut self, x: Var, params: ScanVars) -> Result<Var> {
        let xt = self.value(x);
        let [channels, len] = xt.shape()[..] else {
            return Err(Error::domain("selective scan expects a channels x length sequence"));
        };
        let ws = self.value(params.w_a).shape();
        let [state_size, wd] = ws[..] else {
            return Err(Error::domain("scan projection must be state x channels"));
        };
        if wd != channels || len == 0 {
            return Err(Error::domain(format!(
                "scan projection expects {wd} channels, sequence has {channels} (length {len})"
            )));
        }
        let view = self.scan_view(&params, state_size, channels);
        let (y, cache) = ssm::scan_forward(view, xt.data(), len);
        let value = Tensor::new([channels, len], y)?;
        Ok(self.push(
            value,
            Op::Scan {
                x,
                params,
                cache: Box::new(cache),
            },
        ))
    }

    /// Mean absolute error against a constant target.
    pub fn l1_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::domain(format!(
                "prediction {:?} and target {:?} differ in shape",
                p.shape(),
                target.shape()
            )));
        }
        let loss = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / p.numel() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::L1 {
                pred,
                target: target.clone(),
            },
        ))
    }

    /// Propagates `seed` (shaped like the value of `out`) back through the
    /// tape.
    pub fn backward(&self, out: Var, seed: Tensor) -> Result<Grads> {
        if seed.shape() != self.value(out).shape() {
            return Err(Error::domain("seed gradient shape differs from output"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);

        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gv = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let xt = self.value(*x);
                let (cin, h, wd) = xt.chw().expect("checked in forward");
                let wt = self.value(*w);
                let ws = wt.shape();
                let geom = ConvGeom::new(cin, h, wd, ws[0], ws[2], *stride, *pad);
                let mut gx = vec![0.0; xt.numel()];
                let mut gw = vec![0.0; wt.numel()];
                conv2d_backward(&geom, xt.data(), wt.data(), gv, &mut gx, &mut gw);
                accumulate(grads, *x, xt.shape(), gx);
                accumulate(grads, *w, ws, gw);
                if let Some(b) = b {
                    let plane = geom.ho * geom.wo;
                    let gb = (0..geom.cout)
                        .map(|co| gv[co * plane..(co + 1) * plane].iter().sum())
                        .collect();
                    accumulate(grads, *b, self.value(*b).shape(), gb);
                }
            }
            Op::ConvTranspose2x2 { x, w, b } => {
                let xt = self.value(*x);
                let (cin, h, wd) = xt.chw().expect("checked in forward");
                let wt = self.value(*w);
                let cout = wt.shape()[1];
                let (ho, wo) = (2 * h, 2 * wd);
                let (xv, wv) = (xt.data(), wt.data());
                let mut gx = vec![0.0; xt.numel()];
                let mut gw = vec![0.0; wt.numel()];
                for ci in 0..cin {
                    for co in 0..cout {
                        for ky in 0..2 {
                            for kx in 0..2 {
                                let widx = ((ci * cout + co) * 2 + ky) * 2 + kx;
                                let wk = wv[widx];
                                let mut acc = 0.0;
                                for y in 0..h {
                                    let grow = &gv[(co * ho + 2 * y + ky) * wo..(co * ho + 2 * y + ky + 1) * wo];
                                    let base = (ci * h + y) * wd;
                                    for xx in 0..wd {
                                        let go = grow[2 * xx + kx];
                                        gx[base + xx] += wk * go;
                                        acc += go * xv[base + xx];
                                    }
                                }
                                gw[widx] += acc;
                            }
                        }
                    }
                }
                accumulate(grads, *x, xt.shape(), gx);
                accumulate(grads, *w, wt.shape(), gw);
                if let Some(b) = b {
                    let plane = ho * wo;
                    let gb = (0..cout)
                        .map(|co| gv[co * plane..(co + 1) * plane].iter().sum())
                        .collect();
                    accumulate(grads, *b, self.value(*b).shape(), gb);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let xt = self.value(*x);
                let (c, s) = spatial(xt);
                let gn = self.value(*gain).data();
                let mut gx = vec![0.0; c * s];
                let mut ggain = vec![0.0; c];
                let mut gbias = vec![0.0; c];
                let cf = c as f64;
                for p in 0..s {
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    for ch in 0..c {
                        let i = ch * s + p;
                        ggain[ch] += gv[i] * xhat[i];
                        gbias[ch] += gv[i];
                        let gxh = gv[i] * gn[ch];
                        sum_g += gxh;
                        sum_gx += gxh * xhat[i];
                    }
                    for ch in 0..c {
                        let i = ch * s + p;
                        let gxh = gv[i] * gn[ch];
                        gx[i] = inv_std[p] / cf * (cf * gxh - sum_g - xhat[i] * sum_gx);
                    }
                }
                accumulate(grads, *x, xt.shape(), gx);
                accumulate(grads, *gain, self.value(*gain).shape(), ggain);
                accumulate(grads, *bias, self.value(*bias).shape(), gbias);
            }
            Op::Gelu { x } => {
                let xt = self.value(*x);
                let gx = xt.data().iter().zip(gv).map(|(&v, &go)| go * gelu_grad(v)).collect();
                accumulate(grads, *x, xt.shape(), gx);
            }
            Op::Add { a, b } => {
                accumulate(grads, *a, g.shape(), gv.to_vec());
                accumulate(grads, *b, g.shape(), gv.to_vec());
            }
            Op::Concat { a, b } => {
                let na = self.value(*a).numel();
                accumulate(grads, *a, self.value(*a).shape(), gv[..na].to_vec());
                accumulate(grads, *b, self.value(*b).shape(), gv[na..].to_vec());
            }
            Op::Gather { x, index } => {
                let xt = self.value(*x);
                let (c, s) = spatial(xt);
                let l = index.len();
                let mut gx = vec![0.0; c * s];
                for ch in 0..c {
                    let dst = &mut gx[ch * s..(ch + 1) * s];
                    for (&go, &i) in gv[ch * l..(ch + 1) * l].iter().zip(index.iter()) {
                        dst[i] += go;
                    }
                }
                accumulate(grads, *x, xt.shape(), gx);
            }
            Op::Scan { x, params, cache } => {
                let xt = self.value(*x);
                let channels = xt.shape()[0];
                let state_size = self.value(params.w_a).shape()[0];
                let view = self.scan_view(params, state_size, channels);
                let sg = ssm::scan_backward(view, cache, gv);
                accumulate(grads, *x, xt.shape(), sg.x);
                for (v, gp) in [
                    (params.w_a, sg.w_a),
                    (params.b_a, sg.b_a),
                    (params.w_b, sg.w_b),
                    (params.b_b, sg.b_b),
                    (params.w_c, sg.w_c),
                    (params.b_c, sg.b_c),
                    (params.delta, sg.delta),
                ] {
                    accumulate(grads, v, self.value(v).shape(), gp);
                }
            }
            Op::L1 { pred, target } => {
                let pt = self.value(*pred);
                let scale = gv[0] / pt.numel() as f64;
                let gp = pt
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(a, b)| {
                        let d = a - b;
                        if d > 0.0 {
                            scale
                        } else if d < 0.0 {
                            -scale
                        } else {
                            0.0
                        }
                    })
                    .collect();
                accumulate(grads, *pred, pt.shape(), gp);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(&g) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(Tensor::new(shape.to_vec(), g).expect("gradient shape")),
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(cin: usize, h: usize, w: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Self {
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            ho,
            wo,
        }
    }

    /// Output index range `[lo, hi)` along one axis whose input coordinate
    /// `o * stride + tap - pad` stays inside `[0, size)`.
    fn valid(&self, tap: usize, size: usize, out: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.pad > tap {
            (self.pad - tap).div_ceil(s)
        } else {
            0
        };
        let hi = if size + self.pad > tap {
            ((size - 1 + self.pad - tap) / s + 1).min(out)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

/// Unfolds `x` into a `(cin k k) x (ho wo)` matrix of zero-padded taps.
fn im2col(g: &ConvGeom, x: &[f64]) -> Vec<f64> {
    let (k, s, plane) = (g.k, g.stride, g.ho * g.wo);
    let mut cols = vec![0.0; g.cin * k * k * plane];
    for ci in 0..g.cin {
        let xc = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            let (oy_lo, oy_hi) = g.valid(ky, g.h, g.ho);
            for kx in 0..k {
                let (ox_lo, ox_hi) = g.valid(kx, g.w, g.wo);
                let row = &mut cols[((ci * k + ky) * k + kx) * plane..][..plane];
                for oy in oy_lo..oy_hi {
                    let iy = oy * s + ky - g.pad;
                    let xrow = &xc[iy * g.w..(iy + 1) * g.w];
                    let orow = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    for ox in ox_lo..ox_hi {
                        orow[ox] = xrow[ox * s + kx - g.pad];
                    }
                }
            }
        }
    }
    cols
}

/// Adds the columns of `cols` back onto the input positions they came from.
fn col2im(g: &ConvGeom, cols: &[f64], gx: &mut [f64]) {
    let (k, s, plane) = (g.k, g.stride, g.ho * g.wo);
    for ci in 0..g.cin {
        let gxc = &mut gx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            let (oy_lo, oy_hi) = g.valid(ky, g.h, g.ho);
            for kx in 0..k {
                let (ox_lo, ox_hi) = g.valid(kx, g.w, g.wo);
                let row = &cols[((ci * k + ky) * k + kx) * plane..][..plane];
                for oy in oy_lo..oy_hi {
                    let iy = oy * s + ky - g.pad;
                    let gxrow = &mut gxc[iy * g.w..(iy + 1) * g.w];
                    let grow = &row[oy * g.wo..(oy + 1) * g.wo];
                    for ox in ox_lo..ox_hi {
                        gxrow[ox * s + kx - g.pad] += grow[ox];
                    }
                }
            }
        }
    }
}

impl ConvGeom {
    /// A 1x1 stride-1 convolution reads `x` directly as its column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Row-major `c = alpha a b + beta c` with `a: m x k`, `b: k x n`, optionally
/// transposing either operand.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserted lengths cover every element addressed by the
    // given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64], bias: Option<&[f64]>, out: &mut [f64]) {
    let (plane, kk) = (g.ho * g.wo, g.cin * g.k * g.k);
    match bias {
        Some(b) => {
            for (co, oc) in out.chunks_mut(plane).enumerate() {
                oc.fill(b[co]);
            }
        }
        None => out.fill(0.0),
    }
    let owned;
    let cols = if g.is_pointwise() {
        x
    } else {
        owned = im2col(g, x);
        &owned
    };
    gemm(g.cout, kk, plane, w, false, cols, false, 1.0, out);
}

fn conv2d_backward(g: &ConvGeom, x: &[f64], w: &[f64], gout: &[f64], gx: &mut [f64], gw: &mut [f64]) {
    let (plane, kk) = (g.ho * g.wo, g.cin * g.k * g.k);
    let owned;
    let cols = if g.is_pointwise() {
        x
    } else {
        owned = im2col(g, x);
        &owned
    };
    gemm(g.cout, plane, kk, gout, false, cols, true, 1.0, gw);
    if g.is_pointwise() {
        gemm(kk, g.cout, plane, w, true, gout, false, 1.0, gx);
    } else {
        let mut gcols = vec![0.0; kk * plane];
        gemm(kk, g.cout, plane, w, true, gout, false, 0.0, &mut gcols);
        col2im(g, &gcols, gx);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Checks every leaf gradient of `sum(out * probe)` against central
    /// differences, rebuilding the graph through `build` for each probe.
    fn check<F>(leaves: Vec<Tensor>, build: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let eval = |vals: &[Tensor]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|v| tape.leaf(v.clone())).collect();
            let out = build(&mut tape, &vars);
            (tape, vars, out)
        };
        let (tape, vars, out) = eval(&leaves);
        let probe = random(tape.value(out).shape(), &mut rng);
        let objective = |vals: &[Tensor]| {
            let (t, _, o) = eval(vals);
            t.value(o)
                .data()
                .iter()
                .zip(probe.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let grads = tape.backward(out, probe.clone()).unwrap();
        let h = 1e-6;
        for (li, v) in vars.iter().enumerate() {
            let analytic = grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(leaves[li].shape()));
            for i in 0..leaves[li].numel() {
                let mut plus = leaves.clone();
                plus[li].data_mut()[i] += h;
                let mut minus = leaves.clone();
                minus[li].data_mut()[i] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                let a = analytic.data()[i];
                assert!(
                    (a - fd).abs() <= 1e-6 * (1.0 + a.abs().max(fd.abs())),
                    "leaf {li} elem {i}: analytic {a} vs numeric {fd}"
                );
            }
        }
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(k, stride, pad, h, w) in &[(3, 1, 1, 5, 4), (1, 1, 0, 3, 3), (2, 2, 0, 4, 6), (3, 2, 1, 5, 5)] {
            let leaves = vec![
                random(&[2, h, w], &mut rng),
                random(&[3, 2, k, k], &mut rng),
                random(&[3], &mut rng),
            ];
            check(leaves, |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, pad).unwrap());
        }
    }

    #[test]
    fn conv2d_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[2, 5, 6], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let mut tape = Tape::new();
        let (xv, wv) = (tape.leaf(x.clone()), tape.leaf(w.clone()));
        let out = tape.conv2d(xv, wv, None, 1, 1).unwrap();
        let y = tape.value(out);
        assert_eq!(y.shape(), &[3, 5, 6]);
        for co in 0..3 {
            for oy in 0..5i64 {
                for ox in 0..6i64 {
                    let mut acc = 0.0;
                    for ci in 0..2 {
                        for ky in 0..3i64 {
                            for kx in 0..3i64 {
                                let (iy, ix) = (oy + ky - 1, ox + kx - 1);
                                if (0..5).contains(&iy) && (0..6).contains(&ix) {
                                    acc += w.data()[((co * 2 + ci) * 3 + ky as usize) * 3 + kx as usize]
                                        * x.data()[(ci * 5 + iy as usize) * 6 + ix as usize];
                                }
                            }
                        }
                    }
                    let got = y.data()[(co * 5 + oy as usize) * 6 + ox as usize];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn transposed_conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let leaves = vec![
            random(&[3, 2, 3], &mut rng),
            random(&[3, 2, 2, 2], &mut rng),
            random(&[2], &mut rng),
        ];
        check(leaves, |t, v| t.conv_transpose2x2(v[0], v[1], Some(v[2])).unwrap());
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let leaves = vec![
            random(&[4, 2, 3], &mut rng),
            random(&[4], &mut rng),
            random(&[4], &mut rng),
        ];
        check(leaves, |t, v| t.layer_norm(v[0], v[1], v[2]).unwrap());
    }

    #[test]
    fn elementwise_and_structural_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let leaves = vec![random(&[2, 3, 3], &mut rng), random(&[2, 3, 3], &mut rng)];
        check(leaves, |t, v| {
            let s = t.add(v[0], v[1]).unwrap();
            let g = t.gelu(s);
            let c = t.concat_channels(g, v[0]).unwrap();
            let idx: Rc<[usize]> = (0..9).rev().collect::<Vec<_>>().into();
            t.gather(c, idx, vec![4, 9]).unwrap()
        });
    }

    #[test]
    fn selective_scan_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (n, d, len) = (3, 2, 5);
        let leaves = vec![
            random(&[d, len], &mut rng),
            random(&[n, d], &mut rng),
            random(&[n], &mut rng),
            random(&[n, d], &mut rng),
            random(&[n], &mut rng),
            random(&[n, d], &mut rng),
            random(&[n], &mut rng),
            random(&[d], &mut rng),
        ];
        check(leaves, |t, v| {
            let p = ScanVars {
                w_a: v[1],
                b_a: v[2],
                w_b: v[3],
                b_b: v[4],
                w_c: v[5],
                b_c: v[6],
                delta: v[7],
            };
            t.selective_scan(v[0], p).unwrap()
        });
    }

    #[test]
    fn l1_loss_value_and_gradient() {
        let mut tape = Tape::new();
        let pred = tape.leaf(Tensor::new([2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap());
        let target = Tensor::new([2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let loss = tape.l1_loss(pred, &target).unwrap();
        assert_eq!(tape.value(loss).data()[0], 0.5);
        let g = tape.backward(loss, Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.get(pred).unwrap().data(), &[-0.25, 0.0, 0.25, 0.0]);
        assert!(tape.l1_loss(pred, &Tensor::zeros([4])).is_err());
    }

    #[test]
    fn shape_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros([2, 4, 4]));
        let w = tape.leaf(Tensor::zeros([3, 1, 3, 3]));
        assert!(tape.conv2d(x, w, None, 1, 1).is_err());
        let y = tape.leaf(Tensor::zeros([2, 3, 4]));
        assert!(tape.add(x, y).is_err());
        assert!(tape.concat_channels(x, y).is_err());
    }
}
