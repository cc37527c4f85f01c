//! Diagonal state space models: zero-order-hold discretization, the
//! recurrent and global-convolution evaluation paths for time-invariant
//! systems, and the input-selective scan used inside the network.
//!
//! All state matrices are diagonal, so `A` is stored as its diagonal and the
//! matrix exponential and inverse reduce to elementwise operations.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Below this magnitude of `delta * a` the input matrix uses the series limit
/// `B_bar = delta * B` instead of `(e^z - 1) / z`.
pub const ZOH_LIMIT_THRESHOLD: f64 = 1e-8;

/// Continuous-time system `h' = A h + B x`, `y = C h` with timescale `delta`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousSsm {
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    delta: f64,
}

impl ContinuousSsm {
    /// `a` is the diagonal of the state matrix; `b` and `c` are the input
    /// column and output row. All three must have the same length.
    pub fn new(a: Vec<f64>, b: Vec<f64>, c: Vec<f64>, delta: f64) -> Result<Self> {
        if a.is_empty() {
            return Err(Error::domain("state size must be at least 1"));
        }
        if b.len() != a.len() || c.len() != a.len() {
            return Err(Error::domain(format!(
                "inconsistent dimensions: A is {n}x{n}, B has {} rows, C has {} columns",
                b.len(),
                c.len(),
                n = a.len()
            )));
        }
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(Error::domain(format!("timescale must be positive, got {delta}")));
        }
        Ok(Self { a, b, c, delta })
    }

    pub fn state_size(&self) -> usize {
        self.a.len()
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }
}

/// Discrete-time system `h_t = A_bar h_{t-1} + B_bar x_t`, `y_t = C h_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteSsm {
    pub a_bar: Vec<f64>,
    pub b_bar: Vec<f64>,
    pub c: Vec<f64>,
}

impl DiscreteSsm {
    /// Builds a discrete system directly from its diagonal parts. Systems
    /// obtained from a continuous model should come from [`discretize`].
    pub fn from_parts(a_bar: Vec<f64>, b_bar: Vec<f64>, c: Vec<f64>) -> Result<Self> {
        if a_bar.is_empty() || b_bar.len() != a_bar.len() || c.len() != a_bar.len() {
            return Err(Error::domain("discrete system parts must share a non-zero state size"));
        }
        Ok(Self { a_bar, b_bar, c })
    }

    pub fn state_size(&self) -> usize {
        self.a_bar.len()
    }
}

/// Causal convolution kernel `K[t] = C A_bar^t B_bar`.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmKernel {
    pub taps: Vec<f64>,
}

/// `(e^z - 1) / z`, continuous at zero.
#[inline]
pub(crate) fn zoh_factor(z: f64) -> f64 {
    if z.abs() < ZOH_LIMIT_THRESHOLD {
        1.0 + 0.5 * z
    } else {
        z.exp_m1() / z
    }
}

/// `(exp(z), zoh_factor(z))` with one transcendental call. Away from zero
/// `exp` is cheaper than `exp_m1` and the cancellation in `e^z - 1` costs at
/// most `1e-13` relative accuracy.
#[inline]
fn exp_and_zoh(z: f64) -> (f64, f64) {
    if z.abs() > 1e-3 {
        let e = z.exp();
        (e, (e - 1.0) / z)
    } else if z.abs() < ZOH_LIMIT_THRESHOLD {
        (1.0 + z, 1.0 + 0.5 * z)
    } else {
        let em1 = z.exp_m1();
        (1.0 + em1, em1 / z)
    }
}

/// [`zoh_factor_grad`] reusing `exp(z)` and `zoh_factor(z)`.
#[inline]
fn zoh_grad_from(z: f64, a_bar: f64, phi: f64) -> f64 {
    if z.abs() < 1e-3 {
        zoh_factor_grad(z)
    } else {
        (a_bar - phi) / z
    }
}

/// Derivative of [`zoh_factor`].
#[inline]
pub(crate) fn zoh_factor_grad(z: f64) -> f64 {
    if z.abs() < 1e-3 {
        0.5 + z * (1.0 / 3.0 + z * (0.125 + z / 30.0))
    } else {
        (z * z.exp() - z.exp_m1()) / (z * z)
    }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for positive arguments.
pub(crate) fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Zero-order-hold discretization: `A_bar = exp(delta A)`,
/// `B_bar = (delta A)^-1 (exp(delta A) - I) delta B`.
pub fn discretize(ssm: &ContinuousSsm) -> DiscreteSsm {
    let delta = ssm.delta;
    let (a_bar, b_bar) = ssm
        .a
        .iter()
        .zip(&ssm.b)
        .map(|(&a, &b)| {
            let z = delta * a;
            (z.exp(), zoh_factor(z) * delta * b)
        })
        .unzip();
    DiscreteSsm {
        a_bar,
        b_bar,
        c: ssm.c.clone(),
    }
}

/// Evaluates the recurrence step by step from a zero initial state.
pub fn scan_recurrent(ssm: &DiscreteSsm, x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::domain("input sequence is empty"));
    }
    let mut h = vec![0.0; ssm.state_size()];
    let y = x
        .iter()
        .map(|&xt| {
            let mut yt = 0.0;
            for n in 0..h.len() {
                h[n] = ssm.a_bar[n] * h[n] + ssm.b_bar[n] * xt;
                yt += ssm.c[n] * h[n];
            }
            yt
        })
        .collect();
    Ok(y)
}

/// Materializes the first `len` taps of the system's impulse response.
pub fn build_kernel(ssm: &DiscreteSsm, len: usize) -> Result<SsmKernel> {
    if len == 0 {
        return Err(Error::domain("kernel length must be at least 1"));
    }
    // powers[n] holds A_bar[n]^t * B_bar[n]
    let mut powers = ssm.b_bar.clone();
    let mut taps = Vec::with_capacity(len);
    for _ in 0..len {
        taps.push(ssm.c.iter().zip(&powers).map(|(c, p)| c * p).sum());
        for (p, a) in powers.iter_mut().zip(&ssm.a_bar) {
            *p *= a;
        }
    }
    Ok(SsmKernel { taps })
}

/// Causal convolution `y_t = sum_{s <= t} K[s] x_{t-s}`.
pub fn scan_kernel(x: &[f64], kernel: &SsmKernel) -> Result<Vec<f64>> {
    if x.len() != kernel.taps.len() {
        return Err(Error::domain(format!(
            "kernel has {} taps but the sequence has length {}",
            kernel.taps.len(),
            x.len()
        )));
    }
    if x.is_empty() {
        return Err(Error::domain("input sequence is empty"));
    }
    let y = (0..x.len())
        .map(|t| (0..=t).map(|s| kernel.taps[s] * x[t - s]).sum())
        .collect();
    Ok(y)
}

/// Parameters of one input-selective scan over `channels`-wide sequences.
///
/// Projection matrices are `state_size x channels`, row-major. Per step the
/// scan computes `A_t = -softplus(W_A x_t + b_A)`, `B_t = W_B x_t + b_B` and
/// `C_t = W_C x_t + b_C`; the timescale of channel `d` is
/// `softplus(delta[d])`.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams {
    pub state_size: usize,
    pub channels: usize,
    pub w_a: Vec<f64>,
    pub b_a: Vec<f64>,
    pub w_b: Vec<f64>,
    pub b_b: Vec<f64>,
    pub w_c: Vec<f64>,
    pub b_c: Vec<f64>,
    pub delta: Vec<f64>,
}

impl SsmParams {
    pub fn zeros(state_size: usize, channels: usize) -> Self {
        let proj = vec![0.0; state_size * channels];
        let bias = vec![0.0; state_size];
        Self {
            state_size,
            channels,
            w_a: proj.clone(),
            b_a: bias.clone(),
            w_b: proj.clone(),
            b_b: bias.clone(),
            w_c: proj,
            b_c: bias,
            delta: vec![0.0; channels],
        }
    }

    pub(crate) fn view(&self) -> SsmView<'_> {
        SsmView {
            state_size: self.state_size,
            channels: self.channels,
            w_a: &self.w_a,
            b_a: &self.b_a,
            w_b: &self.w_b,
            b_b: &self.b_b,
            w_c: &self.w_c,
            b_c: &self.b_c,
            delta: &self.delta,
        }
    }

    fn validate(&self) -> Result<()> {
        let (n, d) = (self.state_size, self.channels);
        if n == 0 || d == 0 {
            return Err(Error::domain("state size and channel count must be at least 1"));
        }
        let proj_ok = [&self.w_a, &self.w_b, &self.w_c].iter().all(|w| w.len() == n * d);
        let bias_ok = [&self.b_a, &self.b_b, &self.b_c].iter().all(|b| b.len() == n);
        if !proj_ok || !bias_ok || self.delta.len() != d {
            return Err(Error::domain("selective scan parameter shapes are inconsistent"));
        }
        Ok(())
    }
}

/// Borrowed parameter slices, shared by the standalone scan and the tape op.
#[derive(Clone, Copy)]
pub(crate) struct SsmView<'a> {
    pub state_size: usize,
    pub channels: usize,
    pub w_a: &'a [f64],
    pub b_a: &'a [f64],
    pub w_b: &'a [f64],
    pub b_b: &'a [f64],
    pub w_c: &'a [f64],
    pub b_c: &'a [f64],
    pub delta: &'a [f64],
}

/// Everything the reverse pass needs from a forward scan.
#[derive(Debug, Clone)]
pub(crate) struct ScanCache {
    /// Input, transposed to `len x channels`.
    x_t: Vec<f64>,
    /// Pre-activation of `A`, `len x state`.
    u_a: Vec<f64>,
    /// `A_t`, `B_t`, `C_t`, each `len x state`.
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    /// Hidden states after each step, `len x channels x state`.
    h: Vec<f64>,
    /// `exp(z)` and `zoh_factor(z)` per step, channel and state.
    a_bar: Vec<f64>,
    phi: Vec<f64>,
    len: usize,
}

/// Gradients of a scan with respect to its input and parameters.
pub(crate) struct ScanGrads {
    pub x: Vec<f64>,
    pub w_a: Vec<f64>,
    pub b_a: Vec<f64>,
    pub w_b: Vec<f64>,
    pub b_b: Vec<f64>,
    pub w_c: Vec<f64>,
    pub b_c: Vec<f64>,
    pub delta: Vec<f64>,
}

fn project(w: &[f64], bias: &[f64], x: &[f64], out: &mut [f64]) {
    let d = x.len();
    for (n, o) in out.iter_mut().enumerate() {
        let row = &w[n * d..(n + 1) * d];
        *o = bias[n] + row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>();
    }
}

/// Forward selective scan. `x` is `channels x len`, channel-major; the output
/// has the same layout.
pub(crate) fn scan_forward(p: SsmView<'_>, x: &[f64], len: usize) -> (Vec<f64>, ScanCache) {
    let (ns, nd) = (p.state_size, p.channels);
    debug_assert_eq!(x.len(), nd * len);
    let mut x_t = vec![0.0; len * nd];
    for d in 0..nd {
        for t in 0..len {
            x_t[t * nd + d] = x[d * len + t];
        }
    }
    let dt: Vec<f64> = p.delta.iter().map(|&r| softplus(r)).collect();

    let mut u_a = vec![0.0; len * ns];
    let mut a = vec![0.0; len * ns];
    let mut b = vec![0.0; len * ns];
    let mut c = vec![0.0; len * ns];
    // filled in (t, d, n) order, which is also their memory order
    let mut h = Vec::with_capacity(len * nd * ns);
    let mut a_bar_all = Vec::with_capacity(len * nd * ns);
    let mut phi_all = Vec::with_capacity(len * nd * ns);
    let mut y = vec![0.0; nd * len];

    for t in 0..len {
        let xs = &x_t[t * nd..(t + 1) * nd];
        let rows = t * ns..(t + 1) * ns;
        project(p.w_a, p.b_a, xs, &mut u_a[rows.clone()]);
        project(p.w_b, p.b_b, xs, &mut b[rows.clone()]);
        project(p.w_c, p.b_c, xs, &mut c[rows.clone()]);
        for n in rows.clone() {
            a[n] = -softplus(u_a[n]);
        }
        let (a_t, b_t, c_t) = (&a[rows.clone()], &b[rows.clone()], &c[rows]);

        let prev_start = t.saturating_sub(1) * nd * ns;
        for d in 0..nd {
            let mut yd = 0.0;
            for n in 0..ns {
                let z = dt[d] * a_t[n];
                let (a_bar, phi) = exp_and_zoh(z);
                let b_bar = phi * dt[d] * b_t[n];
                let hp = if t == 0 { 0.0 } else { h[prev_start + d * ns + n] };
                let hn = a_bar * hp + b_bar * xs[d];
                a_bar_all.push(a_bar);
                phi_all.push(phi);
                h.push(hn);
                yd += c_t[n] * hn;
            }
            y[d * len + t] = yd;
        }
    }

    let cache = ScanCache {
        x_t,
        u_a,
        a,
        b,
        c,
        h,
        a_bar: a_bar_all,
        phi: phi_all,
        len,
    };
    (y, cache)
}

/// Reverse pass of [`scan_forward`] given the upstream gradient `gy`
/// (`channels x len`).
pub(crate) fn scan_backward(p: SsmView<'_>, cache: &ScanCache, gy: &[f64]) -> ScanGrads {
    let (ns, nd, len) = (p.state_size, p.channels, cache.len);
    let dt: Vec<f64> = p.delta.iter().map(|&r| softplus(r)).collect();

    let mut g = ScanGrads {
        x: vec![0.0; nd * len],
        w_a: vec![0.0; ns * nd],
        b_a: vec![0.0; ns],
        w_b: vec![0.0; ns * nd],
        b_b: vec![0.0; ns],
        w_c: vec![0.0; ns * nd],
        b_c: vec![0.0; ns],
        delta: vec![0.0; nd],
    };
    let mut g_dt = vec![0.0; nd];
    let mut gh = vec![0.0; nd * ns];
    let mut gx_t = vec![0.0; nd];
    let mut ga = vec![0.0; ns];
    let mut gb = vec![0.0; ns];
    let mut gc = vec![0.0; ns];
    let mut gu = vec![0.0; ns];

    for t in (0..len).rev() {
        let xs = &cache.x_t[t * nd..(t + 1) * nd];
        let rows = t * ns..(t + 1) * ns;
        let (a_t, b_t, c_t) = (&cache.a[rows.clone()], &cache.b[rows.clone()], &cache.c[rows.clone()]);
        let h_cur = &cache.h[t * nd * ns..(t + 1) * nd * ns];
        let h_prev = (t > 0).then(|| &cache.h[(t - 1) * nd * ns..t * nd * ns]);

        gx_t.fill(0.0);
        ga.fill(0.0);
        gb.fill(0.0);
        gc.fill(0.0);

        for d in 0..nd {
            let gyd = gy[d * len + t];
            for n in 0..ns {
                let idx = d * ns + n;
                gc[n] += gyd * h_cur[idx];
                let gh_dn = gh[idx] + gyd * c_t[n];

                let z = dt[d] * a_t[n];
                let a_bar = cache.a_bar[t * nd * ns + idx];
                let phi = cache.phi[t * nd * ns + idx];
                let b_bar = phi * dt[d] * b_t[n];
                let hp = h_prev.map_or(0.0, |h| h[idx]);

                let g_abar = gh_dn * hp;
                let g_bbar = gh_dn * xs[d];
                gx_t[d] += gh_dn * b_bar;
                gh[idx] = gh_dn * a_bar;

                let gz = g_abar * a_bar + g_bbar * dt[d] * b_t[n] * zoh_grad_from(z, a_bar, phi);
                g_dt[d] += g_bbar * phi * b_t[n] + gz * a_t[n];
                gb[n] += g_bbar * phi * dt[d];
                ga[n] += gz * dt[d];
            }
        }

        for n in 0..ns {
            gu[n] = -ga[n] * sigmoid(cache.u_a[t * ns + n]);
        }
        for (gproj, gbias, w, gout) in [
            (&mut g.w_a, &mut g.b_a, p.w_a, &gu),
            (&mut g.w_b, &mut g.b_b, p.w_b, &gb),
            (&mut g.w_c, &mut g.b_c, p.w_c, &gc),
        ] {
            for n in 0..ns {
                let go = gout[n];
                if go == 0.0 {
                    continue;
                }
                gbias[n] += go;
                let wrow = &w[n * nd..(n + 1) * nd];
                let grow = &mut gproj[n * nd..(n + 1) * nd];
                for d in 0..nd {
                    grow[d] += go * xs[d];
                    gx_t[d] += go * wrow[d];
                }
            }
        }
        for d in 0..nd {
            g.x[d * len + t] = gx_t[d];
        }
    }
    for d in 0..nd {
        g.delta[d] = g_dt[d] * sigmoid(p.delta[d]);
    }
    g
}

/// Input-selective scan over a `channels x len` sequence.
pub fn selective_scan(x: &Tensor, params: &SsmParams) -> Result<Tensor> {
    params.validate()?;
    let (channels, len) = match x.shape() {
        &[c, l] => (c, l),
        s => {
            return Err(Error::domain(format!(
                "expected a channels x length sequence, got {s:?}"
            )))
        }
    };
    if channels != params.channels {
        return Err(Error::domain(format!(
            "sequence has {channels} channels, projections expect {}",
            params.channels
        )));
    }
    if len == 0 {
        return Err(Error::domain("input sequence is empty"));
    }
    let (y, _) = scan_forward(params.view(), x.data(), len);
    Tensor::new([channels, len], y)
}
