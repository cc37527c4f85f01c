//! Effective receptive field: input saliency of a single output pixel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Model;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamStore};
use crate::tensor::Tensor;

/// A map-to-map network that can be recorded on a tape.
pub trait Differentiable {
    /// Side length of the square `1 x side x side` input.
    fn side(&self) -> usize;

    /// Binds parameters and records the forward pass of `x`.
    fn record(&self, tape: &mut Tape, x: Var) -> Result<Var>;
}

impl Differentiable for Model {
    fn side(&self) -> usize {
        self.config().side
    }

    fn record(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let p = self.params().bind(tape);
        self.graph(tape, &p, x, None)
    }
}

/// Two stacked 3x3 convolutions (input and output projection only), the
/// purely local reference for receptive field comparisons.
#[derive(Debug, Clone)]
pub struct ConvBaseline {
    params: ParamStore,
    input_proj: Conv2d,
    output_proj: Conv2d,
    side: usize,
}

impl ConvBaseline {
    pub fn new(channels: usize, side: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let input_proj = Conv2d::new(&mut params, "input_proj", 1, channels, 3, 1, 1, &mut rng);
        let output_proj = Conv2d::new(&mut params, "output_proj", channels, 1, 3, 1, 1, &mut rng);
        Self {
            params,
            input_proj,
            output_proj,
            side,
        }
    }
}

impl Differentiable for ConvBaseline {
    fn side(&self) -> usize {
        self.side
    }

    fn record(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let p = self.params.bind(tape);
        let h = self.input_proj.forward(tape, &p, x)?;
        self.output_proj.forward(tape, &p, h)
    }
}

/// `|d out[probe] / d input|` averaged over `samples` uniform random inputs,
/// scaled so the largest entry is 1. Returns a `side x side` map; an
/// all-zero saliency is returned unscaled.
pub fn effective_receptive_field<M: Differentiable + ?Sized>(
    model: &M,
    probe: (usize, usize),
    samples: usize,
    seed: u64,
) -> Result<Tensor> {
    let side = model.side();
    if probe.0 >= side || probe.1 >= side {
        return Err(Error::domain(format!("probe {probe:?} outside a {side} x {side} map")));
    }
    if samples == 0 {
        return Err(Error::domain("at least one input sample is required"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = vec![0.0; side * side];
    for _ in 0..samples {
        let input = Tensor::new([1, side, side], (0..side * side).map(|_| rng.gen::<f64>()).collect())?;
        let mut tape = Tape::new();
        let x = tape.leaf(input);
        let out = model.record(&mut tape, x)?;
        let mut seed_grad = Tensor::zeros(tape.value(out).shape());
        seed_grad.data_mut()[probe.0 * side + probe.1] = 1.0;
        let grads = tape.backward(out, seed_grad)?;
        if let Some(g) = grads.get(x) {
            for (a, v) in acc.iter_mut().zip(g.data()) {
                *a += v.abs();
            }
        }
    }
    let max = acc.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        acc.iter_mut().for_each(|v| *v /= max);
    }
    Tensor::new([side, side], acc)
}
