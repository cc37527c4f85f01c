//! Two-dimensional machinery around the selective scan.
//!
//! A feature map is flattened along four traversal paths:
//!
//! | path | order                                             |
//! |------|---------------------------------------------------|
//! | 1    | row-major: left to right, top to bottom           |
//! | 2    | path 1 reversed                                   |
//! | 3    | column-major: top to bottom, left to right        |
//! | 4    | path 3 reversed                                   |
//!
//! Each path gets its own selective scan, and the four results are mapped
//! back to 2-D and summed.

use std::rc::Rc;

use rand::{Rng, SeedableRng};

use crate::autodiff::{ScanVars, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{eval_with, trunc_normal, uniform, Bound, Conv2d, LayerNorm, ParamId, ParamStore, INIT_STD};
use crate::ssm::{softplus_inverse, SsmParams};
use crate::tensor::Tensor;

pub const NUM_PATHS: usize = 4;

/// For each path, the flattened spatial index visited at each sequence step.
pub fn scan_orders(height: usize, width: usize) -> [Vec<usize>; NUM_PATHS] {
    let row_major: Vec<usize> = (0..height * width).collect();
    let col_major: Vec<usize> = (0..width)
        .flat_map(|x| (0..height).map(move |y| y * width + x))
        .collect();
    let rev = |v: &[usize]| v.iter().rev().copied().collect::<Vec<_>>();
    let (p2, p4) = (rev(&row_major), rev(&col_major));
    [row_major, p2, col_major, p4]
}

fn inverse(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (step, &pos) in order.iter().enumerate() {
        inv[pos] = step;
    }
    inv
}

/// The four flattened sequences of a feature map, each `channels x (h*w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanPaths {
    pub paths: [Tensor; NUM_PATHS],
    pub height: usize,
    pub width: usize,
}

pub fn cross_scan(fm: &Tensor) -> Result<ScanPaths> {
    let (c, h, w) = fm.chw()?;
    let orders = scan_orders(h, w);
    let data = fm.data();
    let paths = orders.map(|order| {
        let mut out = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            let plane = &data[ch * h * w..(ch + 1) * h * w];
            out.extend(order.iter().map(|&i| plane[i]));
        }
        Tensor::new([c, h * w], out).expect("path shape")
    });
    Ok(ScanPaths {
        paths,
        height: h,
        width: w,
    })
}

/// Maps every path back to 2-D and sums the four maps.
pub fn cross_merge(paths: &ScanPaths) -> Result<Tensor> {
    let (h, w) = (paths.height, paths.width);
    let c = paths.paths[0].shape().first().copied().unwrap_or(0);
    for p in &paths.paths {
        if p.shape() != [c, h * w] {
            return Err(Error::domain(format!(
                "path of shape {:?} does not match {c} x {}",
                p.shape(),
                h * w
            )));
        }
    }
    let orders = scan_orders(h, w);
    let unscan = |k: usize| {
        let seq = paths.paths[k].data();
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            let plane = &mut out[ch * h * w..(ch + 1) * h * w];
            for (step, &pos) in orders[k].iter().enumerate() {
                plane[pos] = seq[ch * h * w + step];
            }
        }
        out
    };
    // pairwise so that four equal contributions sum to exactly 4x
    let (mut a, b, mut c2, d) = (unscan(0), unscan(1), unscan(2), unscan(3));
    for i in 0..a.len() {
        a[i] += b[i];
        c2[i] += d[i];
        a[i] += c2[i];
    }
    Tensor::new([c, h, w], a)
}

/// Parameter handles of one selective scan.
#[derive(Debug, Clone)]
pub struct SsmLayer {
    pub w_a: ParamId,
    pub b_a: ParamId,
    pub w_b: ParamId,
    pub b_b: ParamId,
    pub w_c: ParamId,
    pub b_c: ParamId,
    pub delta: ParamId,
    pub state_size: usize,
    pub channels: usize,
}

/// Range of the initial timescale, sampled log-uniformly.
pub const DELTA_INIT_RANGE: (f64, f64) = (1e-3, 1e-1);

impl SsmLayer {
    /// `A` starts at `-(n + 1)` for state `n`, the timescale is log-uniform in
    /// [`DELTA_INIT_RANGE`], and the `B`/`C` projections use the usual
    /// `1/sqrt(fan_in)` uniform bound.
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, channels: usize, state_size: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (channels as f64).sqrt();
        let a_bias = (0..state_size).map(|n| softplus_inverse(n as f64 + 1.0)).collect();
        let (lo, hi) = DELTA_INIT_RANGE;
        let delta = (0..channels)
            .map(|_| softplus_inverse(rng.gen_range(lo.ln()..hi.ln()).exp()))
            .collect();
        Self {
            w_a: store.add(
                format!("{name}.w_a"),
                trunc_normal(rng, &[state_size, channels], INIT_STD),
            ),
            b_a: store.add(format!("{name}.b_a"), Tensor::new([state_size], a_bias).expect("len")),
            w_b: store.add(format!("{name}.w_b"), uniform(rng, &[state_size, channels], bound)),
            b_b: store.add(format!("{name}.b_b"), uniform(rng, &[state_size], bound)),
            w_c: store.add(format!("{name}.w_c"), uniform(rng, &[state_size, channels], bound)),
            b_c: store.add(format!("{name}.b_c"), uniform(rng, &[state_size], bound)),
            delta: store.add(format!("{name}.delta"), Tensor::new([channels], delta).expect("len")),
            state_size,
            channels,
        }
    }

    pub fn vars(&self, p: &Bound) -> ScanVars {
        ScanVars {
            w_a: p.var(self.w_a),
            b_a: p.var(self.b_a),
            w_b: p.var(self.w_b),
            b_b: p.var(self.b_b),
            w_c: p.var(self.w_c),
            b_c: p.var(self.b_c),
            delta: p.var(self.delta),
        }
    }

    pub fn params(&self, store: &ParamStore) -> SsmParams {
        let v = |id| store.get(id).data().to_vec();
        SsmParams {
            state_size: self.state_size,
            channels: self.channels,
            w_a: v(self.w_a),
            b_a: v(self.b_a),
            w_b: v(self.w_b),
            b_b: v(self.b_b),
            w_c: v(self.w_c),
            b_c: v(self.b_c),
            delta: v(self.delta),
        }
    }

    pub fn set_params(&self, store: &mut ParamStore, p: &SsmParams) -> Result<()> {
        let (n, d) = (self.state_size, self.channels);
        store.set(self.w_a, Tensor::new([n, d], p.w_a.clone())?)?;
        store.set(self.b_a, Tensor::new([n], p.b_a.clone())?)?;
        store.set(self.w_b, Tensor::new([n, d], p.w_b.clone())?)?;
        store.set(self.b_b, Tensor::new([n], p.b_b.clone())?)?;
        store.set(self.w_c, Tensor::new([n, d], p.w_c.clone())?)?;
        store.set(self.b_c, Tensor::new([n], p.b_c.clone())?)?;
        store.set(self.delta, Tensor::new([d], p.delta.clone())?)?;
        Ok(())
    }
}

/// Cross-scan, one selective scan per path, cross-merge.
#[derive(Debug, Clone)]
pub struct Ss2d {
    pub paths: [SsmLayer; NUM_PATHS],
}

impl Ss2d {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, channels: usize, state_size: usize, rng: &mut R) -> Self {
        let paths =
            [0, 1, 2, 3].map(|k| SsmLayer::new(store, &format!("{name}.path{}", k + 1), channels, state_size, rng));
        Self { paths }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let (c, h, w) = tape.value(x).chw()?;
        let mut merged: Option<Var> = None;
        for (layer, order) in self.paths.iter().zip(scan_orders(h, w)) {
            let inv: Rc<[usize]> = inverse(&order).into();
            let seq = tape.gather(x, order.into(), vec![c, h * w])?;
            let y = tape.selective_scan(seq, layer.vars(p))?;
            let back = tape.gather(y, inv, vec![c, h, w])?;
            merged = Some(match merged {
                None => back,
                Some(m) => tape.add(m, back)?,
            });
        }
        Ok(merged.expect("four paths"))
    }
}

/// Standalone 2-D selective scan with one parameter set per path.
pub fn ss2d(fm: &Tensor, params: &[SsmParams; NUM_PATHS]) -> Result<Tensor> {
    let (c, _, _) = fm.chw()?;
    let state_size = params[0].state_size;
    if params.iter().any(|p| p.channels != c || p.state_size != state_size) {
        return Err(Error::domain("path parameters do not match the feature map"));
    }
    let mut store = ParamStore::new();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let layer = Ss2d::new(&mut store, "ss2d", c, state_size, &mut rng);
    for (l, p) in layer.paths.iter().zip(params) {
        l.set_params(&mut store, p)?;
    }
    eval_with(&store, fm, |t, b, x| layer.forward(t, b, x))
}

/// Locally-enhanced feed-forward network: 1x1 expand, 3x3 local mixing,
/// 1x1 projection, each followed by GELU.
#[derive(Debug, Clone)]
pub struct Lefn {
    pub expand: Conv2d,
    pub local: Conv2d,
    pub project: Conv2d,
}

impl Lefn {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, channels: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            expand: Conv2d::new(store, &format!("{name}.expand"), channels, hidden, 1, 1, 0, rng),
            local: Conv2d::new(store, &format!("{name}.local"), hidden, hidden, 3, 1, 1, rng),
            project: Conv2d::new(store, &format!("{name}.project"), hidden, channels, 1, 1, 0, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let c = tape.value(x).chw()?.0;
        if c != self.expand.in_channels {
            return Err(Error::domain(format!(
                "LEFN expects {} channels, got {c}",
                self.expand.in_channels
            )));
        }
        let mut h = x;
        for conv in [&self.expand, &self.local, &self.project] {
            let y = conv.forward(tape, p, h)?;
            h = tape.gelu(y);
        }
        Ok(h)
    }

    pub fn apply(&self, store: &ParamStore, fm: &Tensor) -> Result<Tensor> {
        eval_with(store, fm, |t, b, x| self.forward(t, b, x))
    }
}

/// Pre-norm residual block: `u = x + SS2D(LN(x))`, `out = u + LEFN(LN(u))`.
#[derive(Debug, Clone)]
pub struct HolisticScanBlock {
    pub norm1: LayerNorm,
    pub ss2d: Ss2d,
    pub norm2: LayerNorm,
    pub lefn: Lefn,
    pub channels: usize,
}

impl HolisticScanBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        hidden: usize,
        state_size: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), channels),
            ss2d: Ss2d::new(store, &format!("{name}.ss2d"), channels, state_size, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), channels),
            lefn: Lefn::new(store, &format!("{name}.lefn"), channels, hidden, rng),
            channels,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let n1 = self.norm1.forward(tape, p, x)?;
        let s = self.ss2d.forward(tape, p, n1)?;
        let u = tape.add(x, s)?;
        let n2 = self.norm2.forward(tape, p, u)?;
        let l = self.lefn.forward(tape, p, n2)?;
        tape.add(u, l)
    }

    pub fn apply(&self, store: &ParamStore, fm: &Tensor) -> Result<Tensor> {
        eval_with(store, fm, |t, b, x| self.forward(t, b, x))
    }

    /// Sets every SS2D output projection and every LEFN weight to zero, which
    /// makes the block the identity.
    pub fn zero_branches(&self, store: &mut ParamStore) {
        let mut ids = vec![];
        for path in &self.ss2d.paths {
            ids.extend([path.w_c, path.b_c]);
        }
        for conv in [&self.lefn.expand, &self.lefn.local, &self.lefn.project] {
            ids.extend([conv.weight, conv.bias]);
        }
        for id in ids {
            store.get_mut(id).data_mut().fill(0.0);
        }
    }
}

/// Channel-wise layer normalization of a `channels x h x w` map.
pub fn layer_norm(fm: &Tensor, gain: &[f64], bias: &[f64]) -> Result<Tensor> {
    let (c, _, _) = fm.chw()?;
    let mut store = ParamStore::new();
    let norm = LayerNorm::new(&mut store, "norm", c);
    store.set(norm.gain, Tensor::new([gain.len()], gain.to_vec())?)?;
    store.set(norm.bias, Tensor::new([bias.len()], bias.to_vec())?)?;
    eval_with(&store, fm, |t, b, x| norm.forward(t, b, x))
}
